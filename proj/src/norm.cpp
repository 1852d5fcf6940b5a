#include "klnorm/norm.hpp"

#include <cmath>

#include "klnorm/rng.hpp"

namespace klnorm {

namespace {

void check_width(const char* op, const Tensor& x, std::size_t d) {
  if (x.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 input, got " +
                                shape_str(x.shape()));
  }
  if (x.shape()[1] != d) {
    throw std::invalid_argument(std::string(op) + ": input width " +
                                std::to_string(x.shape()[1]) +
                                " does not match state width " +
                                std::to_string(d));
  }
}

// (x - mu) / sqrt(var + eps). Shared by the batch-norm and KL-Norm paths so
// the two layers are bitwise-identical up to their affine stages.
Tensor standardize(const Tensor& x, const Tensor& mu, const Tensor& var,
                   double eps) {
  return div(sub(x, mu), sqrt(var + eps));
}

}  // namespace

MovingStats make_moving_stats(std::size_t d, double alpha, double eps) {
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("moving stats: alpha must be in (0,1], got " +
                                std::to_string(alpha));
  }
  if (!(eps > 0.0)) {
    throw std::invalid_argument("moving stats: eps must be > 0");
  }
  MovingStats s;
  s.mu_hat = Tensor::zeros({d});
  s.var_hat = Tensor::full({d}, 1.0);
  s.alpha = alpha;
  s.eps = eps;
  return s;
}

void update_moving_stats(MovingStats& s, const Tensor& mu, const Tensor& var) {
  if (mu.shape() != s.mu_hat.shape() || var.shape() != s.var_hat.shape()) {
    throw std::invalid_argument(
        "update_moving_stats: statistics shape mismatch");
  }
  auto mh = s.mu_hat.data_mut();
  auto vh = s.var_hat.data_mut();
  const auto m = mu.data();
  const auto v = var.data();
  const double a = s.alpha;
  for (std::size_t i = 0; i < mh.size(); ++i) {
    mh[i] = a * m[i] + (1.0 - a) * mh[i];
    vh[i] = a * v[i] + (1.0 - a) * vh[i];
  }
}

BatchNormState make_batchnorm(std::size_t d, double alpha, double eps) {
  BatchNormState s;
  s.gamma = Tensor::full({d}, 1.0).set_requires_grad();
  s.beta_affine = Tensor::zeros({d}).set_requires_grad();
  s.stats = make_moving_stats(d, alpha, eps);
  return s;
}

BatchNormOut batchnorm_forward_train(const Tensor& x, const BatchNormState& s) {
  check_width("batchnorm_forward_train", x, s.gamma.numel());
  BatchNormOut out;
  Stats st = reduce_stats(x);
  out.mu = st.mean;
  out.var = st.var;
  out.x_hat = standardize(x, st.mean, st.var, s.stats.eps);
  out.z = add(mul(s.gamma, out.x_hat), s.beta_affine);
  return out;
}

Tensor batchnorm_forward_infer(const Tensor& x, const BatchNormState& s) {
  check_width("batchnorm_forward_infer", x, s.gamma.numel());
  Tensor x_hat = standardize(x, s.stats.mu_hat, s.stats.var_hat, s.stats.eps);
  return add(mul(s.gamma, x_hat), s.beta_affine);
}

LayerNormState make_layernorm(std::size_t d, double eps) {
  LayerNormState s;
  s.gamma = Tensor::full({d}, 1.0).set_requires_grad();
  s.beta_affine = Tensor::zeros({d}).set_requires_grad();
  s.eps = eps;
  return s;
}

Tensor layernorm_forward(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta_affine, double eps) {
  check_width("layernorm_forward", x, gamma.numel());
  Stats st = row_stats(x);
  Tensor x_hat = standardize(x, st.mean, st.var, eps);
  return add(mul(gamma, x_hat), beta_affine);
}

GroupNormState make_groupnorm(std::size_t d, std::size_t groups, double eps) {
  if (groups == 0 || d % groups != 0) {
    throw std::invalid_argument("groupnorm: " + std::to_string(groups) +
                                " groups do not divide width " +
                                std::to_string(d));
  }
  GroupNormState s;
  s.gamma = Tensor::full({d}, 1.0).set_requires_grad();
  s.beta_affine = Tensor::zeros({d}).set_requires_grad();
  s.groups = groups;
  s.eps = eps;
  return s;
}

Tensor groupnorm_forward(const Tensor& x, std::size_t groups,
                         const Tensor& gamma, const Tensor& beta_affine,
                         double eps) {
  check_width("groupnorm_forward", x, gamma.numel());
  const std::size_t m = x.shape()[0], d = x.shape()[1];
  if (groups == 0 || d % groups != 0) {
    throw std::invalid_argument("groupnorm_forward: " + std::to_string(groups) +
                                " groups do not divide width " +
                                std::to_string(d));
  }
  // View each group as its own row, standardize per row, view back.
  Tensor grouped = x.reshape({m * groups, d / groups});
  Stats st = row_stats(grouped);
  Tensor x_hat = standardize(grouped, st.mean, st.var, eps).reshape({m, d});
  return add(mul(gamma, x_hat), beta_affine);
}

KlNormState make_klnorm(std::size_t k, std::uint64_t seed, double alpha,
                        double eps) {
  if (k == 0) throw std::invalid_argument("klnorm: K must be >= 1");
  SplitMix64 rng = make_stream(seed, rng_stream::kInit);
  const double bound = 1.0 / std::sqrt(static_cast<double>(k));
  auto init = [&](std::size_t n) {
    std::vector<double> w(n);
    for (double& v : w) v = rng.uniform(-bound, bound);
    return w;
  };
  KlNormState s;
  s.mean_weight = Tensor::matrix(k, k, init(k * k)).set_requires_grad();
  s.mean_bias = Tensor::zeros({k}).set_requires_grad();
  s.logvar_weight = Tensor::matrix(k, k, init(k * k)).set_requires_grad();
  s.logvar_bias = Tensor::zeros({k}).set_requires_grad();
  s.stats = make_moving_stats(k, alpha, eps);
  return s;
}

HeadOutputs klnorm_heads(const Tensor& x, const KlNormState& s) {
  check_width("klnorm_heads", x, s.mean_bias.numel());
  HeadOutputs h;
  h.mu_v = add(matmul(x, s.mean_weight), s.mean_bias);
  h.logvar_v =
      clamp(add(matmul(x, s.logvar_weight), s.logvar_bias), kLogVarMin,
            kLogVarMax);
  check_finite(h.mu_v, "klnorm head mu_v");
  check_finite(h.logvar_v, "klnorm head logvar_v");
  return h;
}

KlTerm kl_diag_rows(const Tensor& mu0, const Tensor& var0, const Tensor& mu1,
                    const Tensor& var1) {
  if (mu0.shape() != var0.shape() || mu1.shape() != var1.shape()) {
    throw std::invalid_argument("kl_diag_gauss: mean/variance shape mismatch");
  }
  for (double v : var0.data()) {
    if (!(v > 0.0)) {
      throw NumericalError("kl_diag_gauss: var0 must be > 0, got " +
                           std::to_string(v));
    }
  }
  for (double v : var1.data()) {
    if (!(v > 0.0)) {
      throw NumericalError("kl_diag_gauss: var1 must be > 0, got " +
                           std::to_string(v));
    }
  }
  // 1/2 sum_k [ var0/var1 + (mu1-mu0)^2/var1 - 1 + log var1 - log var0 ]
  Tensor ratio = div(var0, var1);
  Tensor diff = sub(mu1, mu0);
  Tensor mahal = div(mul(diff, diff), var1);
  Tensor logs = sub(log(var1), log(var0));
  Tensor per_dim = add(add(ratio, mahal), logs) - 1.0;
  KlTerm term;
  term.per_example = sum_cols(per_dim) * 0.5;
  term.value = mean(term.per_example);
  return term;
}

Tensor kl_diag_gauss(const Tensor& mu0, const Tensor& var0, const Tensor& mu1,
                     const Tensor& var1) {
  if (mu0.rank() != 1 || var0.rank() != 1 || mu1.rank() != 1 ||
      var1.rank() != 1) {
    throw std::invalid_argument("kl_diag_gauss: expected rank-1 vectors");
  }
  const std::size_t k = mu0.numel();
  KlTerm term = kl_diag_rows(mu0.reshape({1, k}), var0.reshape({1, k}), mu1,
                             var1);
  return term.value;
}

KlNormOut klnorm_forward_train(const Tensor& x, KlNormState& s) {
  check_width("klnorm_forward_train", x, s.mean_bias.numel());
  const std::size_t k = s.mean_bias.numel();
  KlNormOut out;
  Stats st = reduce_stats(x);
  out.x_hat = standardize(x, st.mean, st.var, s.stats.eps);
  HeadOutputs h = klnorm_heads(x, s);
  Tensor sigma_v = exp(h.logvar_v * 0.5);
  out.z = add(mul(sigma_v, out.x_hat), h.mu_v);
  out.kl = kl_diag_rows(h.mu_v, exp(h.logvar_v), Tensor::zeros({k}),
                        Tensor::full({k}, 1.0));
  update_moving_stats(s.stats, st.mean.detach(), st.var.detach());
  return out;
}

Tensor klnorm_forward_infer(const Tensor& x, const KlNormState& s) {
  check_width("klnorm_forward_infer", x, s.mean_bias.numel());
  Tensor x_hat = standardize(x, s.stats.mu_hat, s.stats.var_hat, s.stats.eps);
  HeadOutputs h = klnorm_heads(x, s);
  Tensor sigma_v = exp(h.logvar_v * 0.5);
  return add(mul(sigma_v, x_hat), h.mu_v);
}

}  // namespace klnorm
