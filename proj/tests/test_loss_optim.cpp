#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "klnorm/loss.hpp"
#include "klnorm/optim.hpp"
#include "klnorm/rng.hpp"
#include "testutil.hpp"

using namespace klnorm;

TEST_CASE("cross-entropy anchors") {
  // Uniform logits over C=2: ln 2.
  Tensor uniform = Tensor::matrix(1, 2, {0.0, 0.0});
  CHECK(cross_entropy(uniform, std::vector<int>{0}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-14));

  // Logits (10, -10), label 0: loss = log(1 + e^-20).
  Tensor confident = Tensor::matrix(1, 2, {10.0, -10.0});
  const double expected = std::log1p(std::exp(-20.0));
  CHECK(expected == doctest::Approx(2.061153622e-9).epsilon(1e-6));
  CHECK(cross_entropy(confident, std::vector<int>{0}).item() ==
        doctest::Approx(expected).epsilon(1e-9));

  CHECK_THROWS_AS(cross_entropy(uniform, std::vector<int>{2}),
                  std::invalid_argument);
}

TEST_CASE("cross-entropy is equivariant under class permutation") {
  SplitMix64 rng(3);
  std::vector<double> ld(4 * 3);
  for (auto& v : ld) v = rng.normal();
  Tensor logits = Tensor::matrix(4, 3, ld);
  std::vector<int> labels{0, 2, 1, 2};
  const double base = cross_entropy(logits, labels).item();

  const std::vector<std::size_t> perm{2, 0, 1};
  std::vector<double> permuted(ld.size());
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      permuted[i * 3 + perm[j]] = ld[i * 3 + j];
    }
  }
  std::vector<int> plabels(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    plabels[i] = static_cast<int>(perm[static_cast<std::size_t>(labels[i])]);
  }
  CHECK(cross_entropy(Tensor::matrix(4, 3, permuted), plabels).item() ==
        doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("beta schedule: min(1, epoch * beta0)") {
  BetaSchedule s{0.25, 1.0};
  CHECK(beta_at(s, 1) == 0.25);
  CHECK(beta_at(s, 3) == doctest::Approx(0.75));
  CHECK(beta_at(s, 5) == 1.0);   // capped at epoch 4 already
  CHECK(beta_at({2.0, 1.0}, 1) == 1.0);
  CHECK_THROWS_AS(beta_at(s, 0), std::invalid_argument);

  // Monotone nondecreasing for any beta0 > 0.
  SplitMix64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    BetaSchedule sched{rng.uniform(1e-4, 3.0), 1.0};
    double prev = 0.0;
    for (int epoch = 1; epoch <= 30; ++epoch) {
      const double b = beta_at(sched, epoch);
      CHECK(b >= prev);
      CHECK(b <= sched.cap);
      prev = b;
    }
  }
}

TEST_CASE("total_loss breakdown") {
  const LossBreakdown b = total_loss(0.5, 2.0, 0.1);
  CHECK(b.total == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(total_loss(0.83, 5.0, 0.0).total == 0.83);  // beta=0 ablation path
  CHECK(total_loss(0.83, 0.0, 0.7).total == 0.83);  // pinned heads
  CHECK_THROWS_AS(
      total_loss(std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0),
      NumericalError);
}

TEST_CASE("d(total)/d(kl) equals beta_t exactly") {
  Tensor kl = Tensor::scalar(1.37).set_requires_grad();
  const double beta_t = 0.625;  // exactly representable
  Tape tape;
  Tensor ce = Tensor::scalar(0.4);
  Tensor total = add(ce, mul(kl, Tensor::scalar(beta_t)));
  tape.backward(total);
  CHECK(kl.grad()[0] == beta_t);
}

TEST_CASE("adam: first-step delta is -lr, zero grad is a no-op") {
  Tensor theta = Tensor::row({0.5}).set_requires_grad();
  std::vector<Tensor> params{theta};
  AdamConfig cfg;
  cfg.lr = 0.01;
  AdamState opt = make_adam(params, cfg);
  {
    Tape tape;
    Tensor loss = sum(mul(theta, Tensor::row({3.0})));  // constant grad 3
    tape.backward(loss);
  }
  adam_step(opt, params);
  // Bias-corrected first step: m_hat/sqrt(v_hat) = g/|g| = 1.
  CHECK(std::abs(theta.at(0) - (0.5 - 0.01)) < 1e-9);
  zero_grad(params);

  // Fresh optimizer: a zero first-step gradient moves nothing.
  const double before = theta.at(0);
  AdamState fresh = make_adam(params, cfg);
  {
    Tape tape;
    Tensor loss = sum(mul(theta, Tensor::row({0.0})));  // zero grad
    tape.backward(loss);
  }
  adam_step(fresh, params);
  CHECK(theta.at(0) == before);
}

TEST_CASE("adam matches the reference recurrence and converges on a bowl") {
  Tensor theta = Tensor::row({1.0}).set_requires_grad();
  std::vector<Tensor> params{theta};
  AdamConfig cfg;
  cfg.lr = 1e-2;
  AdamState opt = make_adam(params, cfg);

  // Plain-double reference of the same update rule.
  double ref_theta = 1.0, ref_m = 0.0, ref_v = 0.0;
  for (int step = 1; step <= 500; ++step) {
    {
      Tape tape;
      Tensor loss = sum(mul(theta, theta));  // f = theta^2, grad = 2 theta
      tape.backward(loss);
    }
    adam_step(opt, params);
    zero_grad(params);

    const double g = 2.0 * ref_theta;
    ref_m = cfg.beta1 * ref_m + (1.0 - cfg.beta1) * g;
    ref_v = cfg.beta2 * ref_v + (1.0 - cfg.beta2) * g * g;
    const double m_hat = ref_m / (1.0 - std::pow(cfg.beta1, step));
    const double v_hat = ref_v / (1.0 - std::pow(cfg.beta2, step));
    ref_theta -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps_opt);
    CHECK(theta.at(0) == doctest::Approx(ref_theta).epsilon(1e-12));
  }
  CHECK(std::abs(theta.at(0)) < 1e-3);
}

TEST_CASE("adam aborts on non-finite gradients") {
  Tensor theta = Tensor::row({1.0}).set_requires_grad();
  std::vector<Tensor> params{theta};
  AdamState opt = make_adam(params);
  {
    Tape tape;
    Tensor inf_factor =
        Tensor::row({std::numeric_limits<double>::infinity()});
    Tensor loss = sum(mul(theta, inf_factor));
    tape.backward(loss);
  }
  CHECK_THROWS_AS(adam_step(opt, params), NumericalError);
  CHECK(theta.at(0) == 1.0);  // parameter untouched
}

TEST_CASE("weight decay adds the coupled L2 term") {
  Tensor theta = Tensor::row({2.0}).set_requires_grad();
  std::vector<Tensor> params{theta};
  AdamConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  AdamState opt = make_adam(params, cfg);
  {
    Tape tape;
    Tensor loss = sum(mul(theta, Tensor::row({0.0})));
    tape.backward(loss);
  }
  adam_step(opt, params);
  // Effective gradient 0.5*2 = 1 > 0, so theta must shrink by ~lr.
  CHECK(theta.at(0) < 2.0);
  CHECK(std::abs(theta.at(0) - (2.0 - 0.1)) < 1e-8);
}
