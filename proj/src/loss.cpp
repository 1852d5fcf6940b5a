#include "klnorm/loss.hpp"

#include <cmath>

namespace klnorm {

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return softmax_cross_entropy(logits, labels);
}

double beta_at(const BetaSchedule& schedule, int epoch) {
  if (epoch < 1) {
    throw std::invalid_argument("beta_at: epochs are 1-indexed, got " +
                                std::to_string(epoch));
  }
  if (schedule.beta0 < 0.0) {
    throw std::invalid_argument("beta_at: beta0 must be >= 0");
  }
  return std::min(schedule.cap, static_cast<double>(epoch) * schedule.beta0);
}

LossBreakdown total_loss(double ce, double kl, double beta_t) {
  if (!std::isfinite(ce) || !std::isfinite(kl) || !std::isfinite(beta_t)) {
    throw NumericalError("total_loss: non-finite input (ce=" +
                         std::to_string(ce) + ", kl=" + std::to_string(kl) +
                         ", beta_t=" + std::to_string(beta_t) + ")");
  }
  LossBreakdown b;
  b.ce = ce;
  b.kl = kl;
  b.beta_t = beta_t;
  b.total = ce + beta_t * kl;
  return b;
}

}  // namespace klnorm
