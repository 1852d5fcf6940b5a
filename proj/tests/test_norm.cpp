#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "klnorm/norm.hpp"
#include "klnorm/rng.hpp"
#include "testutil.hpp"

using namespace klnorm;
namespace tu = klnorm::testutil;

TEST_CASE("batchnorm train: hand-evaluated standardization") {
  // x = [1;2;3], gamma=1, beta=0: mu=2, var=2/3, x_hat = +-sqrt(3/2).
  BatchNormState s = make_batchnorm(1, 0.1, 1e-12);
  Tensor x = Tensor::matrix(3, 1, {1, 2, 3});
  BatchNormOut out = batchnorm_forward_train(x, s);
  const double expected = 1.0 / std::sqrt(2.0 / 3.0 + 1e-12);
  CHECK(out.x_hat.at(0, 0) == doctest::Approx(-expected).epsilon(1e-9));
  CHECK(out.x_hat.at(1, 0) == doctest::Approx(0.0));
  CHECK(out.x_hat.at(2, 0) == doctest::Approx(expected).epsilon(1e-9));
  CHECK(out.x_hat.at(2, 0) == doctest::Approx(1.2247).epsilon(1e-4));
  CHECK(out.mu.at(0) == doctest::Approx(2.0));
  CHECK(out.var.at(0) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("batchnorm train: constant batch collapses to beta") {
  BatchNormState s = make_batchnorm(2, 0.1, 1e-5);
  s.beta_affine.data_mut()[0] = 0.7;
  s.beta_affine.data_mut()[1] = -0.3;
  Tensor x = Tensor::matrix(3, 2, {4, 1, 4, 1, 4, 1});
  BatchNormOut out = batchnorm_forward_train(x, s);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(out.x_hat.at(i, 0) == 0.0);
    CHECK(out.z.at(i, 0) == 0.7);
    CHECK(out.z.at(i, 1) == -0.3);
  }
}

TEST_CASE("batchnorm affine: gamma=2 beta=1 on unit x_hat") {
  // Choose a batch whose x_hat contains exactly 1, then z = 2*1 + 1 = 3.
  // x = [-1, 1]: mu=0, var=1, x_hat=[-1, 1] once eps is negligible.
  BatchNormState s = make_batchnorm(1);
  s.gamma.data_mut()[0] = 2.0;
  s.beta_affine.data_mut()[0] = 1.0;
  s.stats.eps = 1e-300;
  Tensor x = Tensor::matrix(2, 1, {-1, 1});
  BatchNormOut out = batchnorm_forward_train(x, s);
  CHECK(out.z.at(1, 0) == doctest::Approx(3.0));
}

TEST_CASE("update_moving_stats follows the exponential rule") {
  MovingStats s = make_moving_stats(1, 0.1);
  update_moving_stats(s, Tensor::row({1.0}), Tensor::row({1.0}));
  CHECK(s.mu_hat.at(0) == doctest::Approx(0.1));

  MovingStats s2 = make_moving_stats(1, 1.0);
  update_moving_stats(s2, Tensor::row({-3.0}), Tensor::row({2.0}));
  CHECK(s2.mu_hat.at(0) == -3.0);  // alpha=1 adopts the batch exactly
  CHECK(s2.var_hat.at(0) == 2.0);

  CHECK_THROWS_AS(update_moving_stats(s, Tensor::row({1, 2}), Tensor::row({1})),
                  std::invalid_argument);
}

TEST_CASE("moving stats converge geometrically on a stationary stream") {
  MovingStats s = make_moving_stats(1, 0.1);
  const double c = 4.0;
  const int steps = 500;
  for (int t = 0; t < steps; ++t) {
    update_moving_stats(s, Tensor::row({c}), Tensor::row({1.0}));
  }
  const double bound = std::pow(1.0 - 0.1, steps) * std::abs(0.0 - c) + 1e-12;
  CHECK(std::abs(s.mu_hat.at(0) - c) < bound);
}

TEST_CASE("batchnorm inference") {
  BatchNormState s = make_batchnorm(2, 0.1, 1e-300);
  // Standard-normal moving stats with eps~0: identity map.
  Tensor x = Tensor::matrix(2, 2, {0.5, -1.5, 2.0, 0.25});
  Tensor z = batchnorm_forward_infer(x, s);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(z.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
  }

  // Batch independence: a row alone equals the same row inside a batch.
  Tensor row = Tensor::matrix(1, 2, {0.5, -1.5});
  Tensor zr = batchnorm_forward_infer(row, s);
  CHECK(zr.at(0, 0) == z.at(0, 0));
  CHECK(zr.at(0, 1) == z.at(0, 1));

  // Frozen stats from the train anchor: mu_hat=2, var_hat=2/3, x=2 -> 0.
  BatchNormState frozen = make_batchnorm(1);
  frozen.stats.mu_hat.data_mut()[0] = 2.0;
  frozen.stats.var_hat.data_mut()[0] = 2.0 / 3.0;
  Tensor z2 = batchnorm_forward_infer(Tensor::matrix(1, 1, {2.0}), frozen);
  CHECK(z2.at(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("layernorm: anchors and shift/scale invariance") {
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  Tensor x = Tensor::matrix(1, 3, {1, 2, 3});
  Tensor z = layernorm_forward(x, gamma, beta, 1e-300);
  CHECK(z.at(0, 0) == doctest::Approx(-1.224744871391589).epsilon(1e-9));
  CHECK(z.at(0, 1) == doctest::Approx(0.0));
  CHECK(z.at(0, 2) == doctest::Approx(1.224744871391589).epsilon(1e-9));

  Tensor constant = Tensor::matrix(1, 3, {5, 5, 5});
  Tensor zc = layernorm_forward(constant, gamma, beta, 1e-5);
  for (std::size_t j = 0; j < 3; ++j) CHECK(zc.at(0, j) == 0.0);

  // layernorm(a*x + b) == layernorm(x) for a > 0 when eps ~ 0.
  Tensor shifted = x * 3.0 + 7.0;
  Tensor zs = layernorm_forward(shifted, gamma, beta, 1e-300);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(zs.at(0, j) == doctest::Approx(z.at(0, j)).epsilon(1e-9));
  }
}

TEST_CASE("groupnorm: degenerate cases and per-group anchor") {
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  SplitMix64 rng(3);
  std::vector<double> xd(8);
  for (auto& v : xd) v = rng.normal();
  Tensor x = Tensor::matrix(2, 4, xd);

  // g=1 equals layernorm.
  Tensor g1 = groupnorm_forward(x, 1, gamma, beta, 1e-5);
  Tensor ln = layernorm_forward(x, gamma, beta, 1e-5);
  for (std::size_t i = 0; i < 8; ++i) CHECK(g1.data()[i] == ln.data()[i]);

  // g=d: every group is a single scalar, so pre-affine output is 0.
  Tensor gd = groupnorm_forward(x, 4, gamma, beta, 1e-5);
  for (std::size_t i = 0; i < 8; ++i) CHECK(gd.data()[i] == 0.0);

  // d=4, g=2, row [1,3,10,30]: each pair standardizes to [-1, 1].
  Tensor row = Tensor::matrix(1, 4, {1, 3, 10, 30});
  Tensor g2 = groupnorm_forward(row, 2, gamma, beta, 1e-300);
  CHECK(g2.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(g2.at(0, 1) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(g2.at(0, 2) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(g2.at(0, 3) == doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS_AS(groupnorm_forward(x, 3, gamma, beta, 1e-5),
                  std::invalid_argument);
}

TEST_CASE("kl_diag_gauss: anchors verified by the Monte-Carlo oracle") {
  // Identical distributions: exactly zero.
  Tensor mu = Tensor::row({0.3, -1.2});
  Tensor var = Tensor::row({0.8, 2.5});
  CHECK(kl_diag_gauss(mu, var, mu, var).item() == 0.0);

  // mu0=(1,0), var0=(2,0.5) against N(0,I): closed form gives 0.75.
  {
    Tensor mu0 = Tensor::row({1.0, 0.0});
    Tensor var0 = Tensor::row({2.0, 0.5});
    Tensor mu1 = Tensor::zeros({2});
    Tensor var1 = Tensor::full({2}, 1.0);
    const double closed = kl_diag_gauss(mu0, var0, mu1, var1).item();
    CHECK(closed == doctest::Approx(0.75).epsilon(1e-12));
    const auto mc = tu::mc_kl_diag(mu0.data(), var0.data(), mu1.data(),
                                   var1.data(), 200000, 99);
    CHECK(std::abs(closed - mc.mean) < 3.0 * mc.stderr_);
  }

  // mu0=(3), var0=(1): 0.5 * 3^2 = 4.5.
  {
    Tensor mu0 = Tensor::row({3.0});
    Tensor var0 = Tensor::row({1.0});
    Tensor mu1 = Tensor::zeros({1});
    Tensor var1 = Tensor::full({1}, 1.0);
    const double closed = kl_diag_gauss(mu0, var0, mu1, var1).item();
    CHECK(closed == doctest::Approx(4.5).epsilon(1e-12));
    const auto mc = tu::mc_kl_diag(mu0.data(), var0.data(), mu1.data(),
                                   var1.data(), 200000, 101);
    CHECK(std::abs(closed - mc.mean) < 3.0 * mc.stderr_);
  }
}

TEST_CASE("kl_diag_gauss is asymmetric; both directions match Monte-Carlo") {
  Tensor mu_p = Tensor::row({0.0});
  Tensor var_p = Tensor::row({4.0});
  Tensor mu_q = Tensor::zeros({1});
  Tensor var_q = Tensor::full({1}, 1.0);

  const double forward = kl_diag_gauss(mu_p, var_p, mu_q, var_q).item();
  const double reverse = kl_diag_gauss(mu_q, var_q, mu_p, var_p).item();
  // Closed forms: (4 - 1 - ln4)/2 and (1/4 - 1 + ln4)/2.
  CHECK(forward == doctest::Approx(0.5 * (3.0 - std::log(4.0))).epsilon(1e-12));
  CHECK(forward == doctest::Approx(0.8069).epsilon(1e-4));
  CHECK(reverse ==
        doctest::Approx(0.5 * (0.25 - 1.0 + std::log(4.0))).epsilon(1e-12));
  CHECK(forward != reverse);

  const auto mc_f = tu::mc_kl_diag(mu_p.data(), var_p.data(), mu_q.data(),
                                   var_q.data(), 400000, 7);
  const auto mc_r = tu::mc_kl_diag(mu_q.data(), var_q.data(), mu_p.data(),
                                   var_p.data(), 400000, 8);
  CHECK(std::abs(forward - mc_f.mean) < 3.0 * mc_f.stderr_);
  CHECK(std::abs(reverse - mc_r.mean) < 3.0 * mc_r.stderr_);
}

TEST_CASE("kl_diag_gauss: property tests") {
  SplitMix64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.next_below(6);
    std::vector<double> mu0(k), var0(k), mu1(k), var1(k);
    for (std::size_t j = 0; j < k; ++j) {
      mu0[j] = rng.uniform(-3.0, 3.0);
      var0[j] = rng.uniform(0.05, 10.0);
      mu1[j] = rng.uniform(-3.0, 3.0);
      var1[j] = rng.uniform(0.05, 10.0);
    }
    const double kl = kl_diag_gauss(Tensor::row(mu0), Tensor::row(var0),
                                    Tensor::row(mu1), Tensor::row(var1))
                          .item();
    CHECK(kl >= 0.0);
  }
  CHECK_THROWS_AS(kl_diag_gauss(Tensor::row({0.0}), Tensor::row({-1.0}),
                                Tensor::row({0.0}), Tensor::row({1.0})),
                  NumericalError);
}

TEST_CASE("kl gradient w.r.t. inputs matches finite differences") {
  SplitMix64 rng(29);
  std::vector<double> mu(3), lv(3);
  for (auto& v : mu) v = rng.uniform(-1.0, 1.0);
  for (auto& v : lv) v = rng.uniform(-0.7, 0.7);
  Tensor mu0 = Tensor::row(mu).set_requires_grad();
  Tensor logvar0 = Tensor::row(lv).set_requires_grad();
  std::vector<Tensor> params{mu0, logvar0};
  CHECK(tu::gradcheck(
            [&]() {
              return kl_diag_gauss(mu0, exp(logvar0), Tensor::zeros({3}),
                                   Tensor::full({3}, 1.0));
            },
            params, 1e-5) < 1e-4);
}

TEST_CASE("klnorm forward train: pinned heads reduce to batchnorm bitwise") {
  SplitMix64 rng(37);
  std::vector<double> xd(12);
  for (auto& v : xd) v = rng.normal();
  Tensor x = Tensor::matrix(3, 4, xd);

  KlNormState kn = make_klnorm(4, 123);
  for (auto* t : {&kn.mean_weight, &kn.mean_bias, &kn.logvar_weight,
                  &kn.logvar_bias}) {
    for (auto& v : t->data_mut()) v = 0.0;
  }
  BatchNormState bn = make_batchnorm(4);

  KlNormOut ko = klnorm_forward_train(x, kn);
  BatchNormOut bo = batchnorm_forward_train(x, bn);
  REQUIRE(ko.z.numel() == bo.z.numel());
  for (std::size_t i = 0; i < ko.z.numel(); ++i) {
    CHECK(ko.z.data()[i] == bo.z.data()[i]);  // bitwise
  }
  CHECK(ko.kl.value.item() == 0.0);
  for (double v : ko.kl.per_example.data()) CHECK(v == 0.0);
}

TEST_CASE("klnorm forward train: anchors and state update") {
  // Single example, heads forced to mu_v=(1,0), logvar=(ln2, ln0.5):
  // per-example KL must be 0.75 and z = sigma_v*x_hat + mu_v.
  KlNormState s = make_klnorm(2, 5);
  for (auto& v : s.mean_weight.data_mut()) v = 0.0;
  for (auto& v : s.logvar_weight.data_mut()) v = 0.0;
  s.mean_bias.data_mut()[0] = 1.0;
  s.mean_bias.data_mut()[1] = 0.0;
  s.logvar_bias.data_mut()[0] = std::log(2.0);
  s.logvar_bias.data_mut()[1] = std::log(0.5);

  Tensor x = Tensor::matrix(1, 2, {0.4, -0.9});
  KlNormOut out = klnorm_forward_train(x, s);
  CHECK(out.kl.per_example.at(0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(out.kl.value.item() == doctest::Approx(0.75).epsilon(1e-12));
  // m=1: x_hat = 0, so z equals mu_v.
  CHECK(out.z.at(0, 0) == doctest::Approx(1.0));
  CHECK(out.z.at(0, 1) == doctest::Approx(0.0));
  // Moving stats moved toward the batch statistics.
  CHECK(s.stats.mu_hat.at(0) == doctest::Approx(0.1 * 0.4));
  CHECK(s.stats.var_hat.at(0) == doctest::Approx(0.1 * 0.0 + 0.9 * 1.0));
}

TEST_CASE("klnorm inference: identity composition and batch independence") {
  KlNormState s = make_klnorm(2, 9);
  for (auto* t : {&s.mean_weight, &s.mean_bias, &s.logvar_weight,
                  &s.logvar_bias}) {
    for (auto& v : t->data_mut()) v = 0.0;
  }
  s.stats.eps = 1e-300;
  Tensor x = Tensor::matrix(2, 2, {0.3, -0.7, 1.5, 0.1});
  Tensor z = klnorm_forward_infer(x, s);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(z.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
  }

  Tensor row = Tensor::matrix(1, 2, {1.5, 0.1});
  Tensor zr = klnorm_forward_infer(row, s);
  CHECK(zr.at(0, 0) == z.at(1, 0));
  CHECK(zr.at(0, 1) == z.at(1, 1));
}

TEST_CASE("klnorm inference: frozen toy state substitution") {
  // mu_hat=2, var_hat=2/3, heads pinned to mu_v=0.5, sigma_v=1, x=2 -> 0.5.
  KlNormState s = make_klnorm(1, 11);
  for (auto& v : s.mean_weight.data_mut()) v = 0.0;
  for (auto& v : s.logvar_weight.data_mut()) v = 0.0;
  s.mean_bias.data_mut()[0] = 0.5;
  s.logvar_bias.data_mut()[0] = 0.0;
  s.stats.mu_hat.data_mut()[0] = 2.0;
  s.stats.var_hat.data_mut()[0] = 2.0 / 3.0;
  Tensor z = klnorm_forward_infer(Tensor::matrix(1, 1, {2.0}), s);
  CHECK(z.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("klnorm inference never mutates state") {
  KlNormState s = make_klnorm(3, 21);
  const std::vector<double> mu_before(s.stats.mu_hat.data().begin(),
                                      s.stats.mu_hat.data().end());
  const std::vector<double> var_before(s.stats.var_hat.data().begin(),
                                       s.stats.var_hat.data().end());
  SplitMix64 rng(2);
  std::vector<double> xd(9);
  for (auto& v : xd) v = rng.normal();
  for (int i = 0; i < 5; ++i) {
    klnorm_forward_infer(Tensor::matrix(3, 3, xd), s);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s.stats.mu_hat.at(i) == mu_before[i]);
    CHECK(s.stats.var_hat.at(i) == var_before[i]);
  }
}

TEST_CASE("train-mode x_hat has zero mean and epsilon-corrected unit variance") {
  SplitMix64 rng(43);
  std::vector<double> xd(40);
  for (auto& v : xd) v = rng.uniform(-5.0, 5.0);
  Tensor x = Tensor::matrix(8, 5, xd);
  BatchNormState s = make_batchnorm(5, 0.1, 1e-5);
  BatchNormOut out = batchnorm_forward_train(x, s);
  Stats st = reduce_stats(out.x_hat);
  Stats raw = reduce_stats(x);
  for (std::size_t j = 0; j < 5; ++j) {
    CHECK(std::abs(st.mean.at(j)) < 1e-10);
    // var(x_hat) = var / (var + eps)
    const double expected = raw.var.at(j) / (raw.var.at(j) + 1e-5);
    CHECK(st.var.at(j) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("general affine view: z == alpha_e * x + zeta_e") {
  SplitMix64 rng(51);
  std::vector<double> xd(24);
  for (auto& v : xd) v = rng.normal();
  Tensor x = Tensor::matrix(6, 4, xd);

  // Batch norm with arbitrary affine parameters.
  BatchNormState s = make_batchnorm(4, 0.1, 1e-5);
  for (auto& v : s.gamma.data_mut()) v = rng.uniform(0.5, 2.0);
  for (auto& v : s.beta_affine.data_mut()) v = rng.uniform(-1.0, 1.0);
  BatchNormOut out = batchnorm_forward_train(x, s);

  for (std::size_t j = 0; j < 4; ++j) {
    const double denom = std::sqrt(out.var.at(j) + 1e-5);
    const double alpha_e = s.gamma.at(j) / denom;
    const double zeta_e =
        s.beta_affine.at(j) - s.gamma.at(j) * out.mu.at(j) / denom;
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(std::abs(out.z.at(i, j) - (alpha_e * x.at(i, j) + zeta_e)) < 1e-12);
    }
  }

  // KL-Norm with live heads: per-example alpha_e = sigma_v, zeta row-wise.
  KlNormState kn = make_klnorm(4, 77);
  KlNormOut ko = klnorm_forward_train(x, kn);
  HeadOutputs h = klnorm_heads(x, kn);
  Stats st = reduce_stats(x);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double denom = std::sqrt(st.var.at(j) + kn.stats.eps);
      const double sigma_v = std::exp(0.5 * h.logvar_v.at(i, j));
      const double alpha_e = sigma_v / denom;
      const double zeta_e =
          h.mu_v.at(i, j) - sigma_v * st.mean.at(j) / denom;
      CHECK(std::abs(ko.z.at(i, j) - (alpha_e * x.at(i, j) + zeta_e)) < 1e-12);
    }
  }
}

TEST_CASE("kl term gradient w.r.t. head parameters matches finite differences") {
  KlNormState s = make_klnorm(3, 55);
  SplitMix64 rng(61);
  std::vector<double> xd(12);
  for (auto& v : xd) v = rng.normal();
  Tensor x = Tensor::matrix(4, 3, xd);
  std::vector<Tensor> params{s.mean_weight, s.mean_bias, s.logvar_weight,
                             s.logvar_bias};
  // Fresh stats each call so the forward is a pure function of the params.
  CHECK(tu::gradcheck(
            [&]() {
              KlNormState scratch = s;
              scratch.stats = make_moving_stats(3);
              return klnorm_forward_train(x, scratch).kl.value;
            },
            params, 1e-5) < 1e-4);
}
