#pragma once

#include <span>
#include <vector>

#include "klnorm/tensor.hpp"

namespace klnorm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  // Coupled L2 penalty added to the gradient before the moment updates.
  // Off by default; only the explicit weight-decay baseline turns it on.
  double weight_decay = 0.0;
};

// Standard bias-corrected Adam. Moment buffers are shaped like the
// parameters they track; `step` counts completed updates.
struct AdamState {
  AdamConfig cfg;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

AdamState make_adam(std::span<const Tensor> params, const AdamConfig& cfg = {});

// One update over all parameters. Parameters without an accumulated gradient
// are skipped. A non-finite gradient aborts the step with a NumericalError
// before any parameter is touched.
void adam_step(AdamState& state, std::span<Tensor> params);

}  // namespace klnorm
