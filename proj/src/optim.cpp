#include "klnorm/optim.hpp"

#include <cmath>

namespace klnorm {

AdamState make_adam(std::span<const Tensor> params, const AdamConfig& cfg) {
  AdamState state;
  state.cfg = cfg;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const auto& p : params) {
    state.m.emplace_back(p.numel(), 0.0);
    state.v.emplace_back(p.numel(), 0.0);
  }
  return state;
}

void adam_step(AdamState& state, std::span<Tensor> params) {
  if (params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter count changed");
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (!params[pi].has_grad()) continue;
    for (double g : params[pi].grad()) {
      if (!std::isfinite(g)) {
        throw NumericalError("adam_step: non-finite gradient in parameter " +
                             std::to_string(pi));
      }
    }
  }
  state.step += 1;
  const auto& c = state.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    if (!params[pi].has_grad()) continue;
    auto theta = params[pi].data_mut();
    const auto grad = params[pi].grad();
    auto& m = state.m[pi];
    auto& v = state.v[pi];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double g = grad[i];
      if (c.weight_decay != 0.0) g += c.weight_decay * theta[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      theta[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps_opt);
    }
  }
}

}  // namespace klnorm
