#pragma once

#include <span>

#include "klnorm/tensor.hpp"

namespace klnorm {

// Mean over the batch of -log softmax(logits)[label]. Labels must lie in
// [0, C). Stabilized by row-max subtraction; differentiable in the logits.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// Linear annealing of the KL weight: beta_t = min(cap, epoch * beta0),
// epochs 1-indexed.
struct BetaSchedule {
  double beta0 = 0.0;
  double cap = 1.0;
};

double beta_at(const BetaSchedule& schedule, int epoch);

struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double beta_t = 0.0;
  double total = 0.0;  // ce + beta_t * kl, exact
};

LossBreakdown total_loss(double ce, double kl, double beta_t);

}  // namespace klnorm
