#pragma once

#include <cstdint>

#include "klnorm/tensor.hpp"

namespace klnorm {

// Predicted log-variances are clamped to this range before exponentiation,
// which bounds the rescaling scale in [e^-5, e^5].
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

// Exponentially weighted running mean/variance used at inference.
// mu_hat starts at 0 and var_hat at 1, i.e. standard-normal statistics.
struct MovingStats {
  Tensor mu_hat;   // {d}
  Tensor var_hat;  // {d}, >= 0 elementwise
  double alpha = 0.1;  // update rate, in (0,1]
  double eps = 1e-5;   // variance floor inside the sqrt
};

MovingStats make_moving_stats(std::size_t d, double alpha = 0.1,
                              double eps = 1e-5);

// mu_hat <- alpha*mu + (1-alpha)*mu_hat, same for var_hat. Raw buffer update,
// never taped.
void update_moving_stats(MovingStats& s, const Tensor& mu, const Tensor& var);

struct BatchNormState {
  Tensor gamma;        // {d} scale, trainable
  Tensor beta_affine;  // {d} shift, trainable
  MovingStats stats;
};

BatchNormState make_batchnorm(std::size_t d, double alpha = 0.1,
                              double eps = 1e-5);

struct BatchNormOut {
  Tensor z;      // gamma * x_hat + beta
  Tensor x_hat;  // (x - mu) / sqrt(var + eps), batch statistics
  Tensor mu;     // batch mean {d}
  Tensor var;    // biased batch variance {d}
};

// Training-mode batch norm. Moving statistics are NOT touched here; callers
// pass the returned mu/var to update_moving_stats once per training batch.
BatchNormOut batchnorm_forward_train(const Tensor& x, const BatchNormState& s);

// Inference-mode batch norm from the tracked moving statistics. Per-sample:
// the output for a row never depends on the rest of the batch.
Tensor batchnorm_forward_infer(const Tensor& x, const BatchNormState& s);

struct LayerNormState {
  Tensor gamma;
  Tensor beta_affine;
  double eps = 1e-5;
};

LayerNormState make_layernorm(std::size_t d, double eps = 1e-5);

// Each row standardized by its own feature mean/variance, then affine.
Tensor layernorm_forward(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta_affine, double eps);

struct GroupNormState {
  Tensor gamma;
  Tensor beta_affine;
  std::size_t groups = 1;
  double eps = 1e-5;
};

GroupNormState make_groupnorm(std::size_t d, std::size_t groups,
                              double eps = 1e-5);

// Per-row standardization within contiguous feature groups; groups must
// divide the feature count.
Tensor groupnorm_forward(const Tensor& x, std::size_t groups,
                         const Tensor& gamma, const Tensor& beta_affine,
                         double eps);

// KL-regularized normalization. Two linear heads (K -> K) read the same
// pre-normalization input that is being normalized and predict the rescaling
// mean and log-variance; the standardized input is rescaled as
// z = sigma_v . x_hat + mu_v and the predicted distribution is pulled toward
// the standard-normal prior by a closed-form KL penalty.
struct KlNormState {
  Tensor mean_weight;    // {K,K}, trainable
  Tensor mean_bias;      // {K}, trainable
  Tensor logvar_weight;  // {K,K}, trainable
  Tensor logvar_bias;    // {K}, trainable
  MovingStats stats;
};

KlNormState make_klnorm(std::size_t k, std::uint64_t seed, double alpha = 0.1,
                        double eps = 1e-5);

struct KlTerm {
  Tensor value;        // rank-0, batch mean of per_example; >= 0
  Tensor per_example;  // {m}
};

// KL(N(mu0_i, diag(var0_i)) || N(mu1, diag(var1))) for each row i, summed
// over the K feature dimensions. Differentiable in all four arguments.
KlTerm kl_diag_rows(const Tensor& mu0, const Tensor& var0, const Tensor& mu1,
                    const Tensor& var1);

// Closed-form KL between two diagonal Gaussians given as {K} vectors:
//   1/2 (sum var0/var1 + sum (mu1-mu0)^2/var1 - K + sum log var1 - sum log var0)
Tensor kl_diag_gauss(const Tensor& mu0, const Tensor& var0, const Tensor& mu1,
                     const Tensor& var1);

struct KlNormOut {
  Tensor z;
  KlTerm kl;
  Tensor x_hat;
};

// Training forward: standardize with batch statistics, rescale with the head
// outputs, return the batch-mean KL against N(0, I). Updates moving stats.
KlNormOut klnorm_forward_train(const Tensor& x, KlNormState& s);

// Inference forward: z = sigma_v(x) . (x - mu_hat)/sqrt(var_hat + eps)
// + mu_v(x). Deterministic per sample, state untouched.
Tensor klnorm_forward_infer(const Tensor& x, const KlNormState& s);

// Head outputs for an input batch: {m,K} mean and clamped log-variance.
struct HeadOutputs {
  Tensor mu_v;
  Tensor logvar_v;
};
HeadOutputs klnorm_heads(const Tensor& x, const KlNormState& s);

}  // namespace klnorm
