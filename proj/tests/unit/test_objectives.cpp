#include <cmath>
#include <numbers>
#include <gtest/gtest.h>

#include "ruq/error.hpp"
#include "ruq/objectives.hpp"
#include "support/stats.hpp"

namespace ad = ruq::ad;
using ad::Tensor;
using ruq::FunctionalModel;
using ruq::ModelKind;
using ruq::ModelSpec;
using ruq::NoiseBundle;
using ruq::Rng;
using ruq::Sampler;

namespace {

Tensor col(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n, 1}, std::move(v));
}

Tensor random_batch(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<double> v(n * d);
  for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
  return Tensor({n, d}, std::move(v));
}

ModelSpec small_spec(ModelKind kind, Sampler sampler = Sampler::lrt) {
  ModelSpec s;
  s.input_dim = 3;
  s.hidden = {5, 4};
  s.kind = kind;
  s.dropout_p = 0.25;
  s.sampler = sampler;
  s.prior_scale = 0.7;
  s.q_scale = 0.2;
  return s;
}

// log N(x; 0, s^2) summed, the oracle for the KL Monte Carlo check.
double log_normal(const std::vector<double>& x, const std::vector<double>& mu,
                  const std::vector<double>& s) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mu[i]) / s[i];
    acc += -0.5 * std::log(2.0 * std::numbers::pi) - std::log(s[i]) - 0.5 * z * z;
  }
  return acc;
}

// Exact KL for a radial layer: E[w_i^2] = mu_i^2 + sigma_i^2 / D under the radial law.
double radial_kl_exact(const ruq::VariationalLinear& layer) {
  const double D = static_cast<double>(layer.weight_count());
  const double s = layer.prior_scale;
  double cross = 0.0, sum_log_sigma = 0.0;
  auto add = [&](const Tensor& mu, const Tensor& rho) {
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const double sigma = ad::softplus(rho[i]);
      sum_log_sigma += std::log(sigma);
      cross += 0.5 * std::log(2.0 * std::numbers::pi * s * s) +
               (mu[i] * mu[i] + sigma * sigma / D) / (2.0 * s * s);
    }
  };
  add(layer.mu_W, layer.rho_W);
  add(layer.mu_b, layer.rho_b);
  return cross - sum_log_sigma - ruq::radial_standard_entropy(layer.weight_count());
}

}  // namespace

TEST(Objectives, GaussianNllExamples) {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi);
  EXPECT_NEAR(ruq::gaussian_nll(col({1.0}), col({1.0}), col({1.0 / (2.0 * std::numbers::pi)})).item(),
              0.0, 1e-15);
  EXPECT_NEAR(ruq::gaussian_nll(col({2.0}), col({2.0}), col({1.0})).item(), c, 1e-15);
  EXPECT_NEAR(ruq::gaussian_nll(col({3.0}), col({2.0}), col({1.0})).item(), 0.5 + c, 1e-15);
  EXPECT_NEAR(c, 0.9189385332, 1e-10);
  EXPECT_NEAR(ruq::gaussian_nll_sum(col({3.0, 2.0}), col({2.0, 2.0}), col({1.0, 1.0})).item(),
              0.5 + 2.0 * c, 1e-14);
}

TEST(Objectives, GaussianNllRejectsNonPositiveVariance) {
  EXPECT_THROW(ruq::gaussian_nll(col({1.0}), col({1.0}), col({0.0})), ruq::DomainError);
  EXPECT_THROW(ruq::gaussian_nll(col({1.0}), col({1.0}), col({-1.0})), ruq::DomainError);
  EXPECT_THROW(ruq::gaussian_nll(col({1.0, 2.0}), col({1.0}), col({1.0})), ruq::ShapeError);
}

TEST(Objectives, GaussianNllGradientMatchesFiniteDifferences) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor y = random_batch(6, 1, rng);
    Tensor mu = random_batch(6, 1, rng);
    Tensor rho = random_batch(6, 1, rng);
    Tensor wrt[] = {y, mu, rho};
    auto f = [&] {
      const Tensor var = ad::square(ad::softplus(rho));
      return ruq::gaussian_nll(y, mu, var);
    };
    EXPECT_LT(ad::grad_check(f, wrt, 1e-5), 1e-4);
  }
}

TEST(Objectives, KlExamples) {
  EXPECT_NEAR(ruq::kl_diag_gaussians(Tensor({3}, {0, 0, 0}), Tensor({3}, {0.3, 0.3, 0.3}), 0.3).item(),
              0.0, 1e-15);
  EXPECT_NEAR(ruq::kl_diag_gaussians(Tensor({1}, {1.0}), Tensor({1}, {1.0}), 1.0).item(), 0.5, 1e-15);
  EXPECT_THROW(ruq::kl_diag_gaussians(Tensor({1}, {1.0}), Tensor({1}, {0.0}), 1.0), ruq::DomainError);
}

TEST(Objectives, KlIsNonNegativeAndZeroOnlyAtPrior) {
  const double s = 0.8;
  for (double mu = -1.0; mu <= 1.0; mu += 0.25) {
    for (double sigma = 0.2; sigma <= 1.6; sigma += 0.2) {
      const double kl = ruq::kl_diag_gaussians(Tensor({1}, {mu}), Tensor({1}, {sigma}), s).item();
      EXPECT_GE(kl, 0.0);
      const bool at_prior = mu == 0.0 && std::abs(sigma - s) < 1e-12;
      if (at_prior) {
        EXPECT_NEAR(kl, 0.0, 1e-15);
      } else {
        EXPECT_GT(kl, 1e-6);
      }
    }
  }
}

TEST(Objectives, KlMatchesMonteCarlo) {
  Rng rng(5);
  std::vector<double> mu(10), sigma(10);
  for (std::size_t i = 0; i < 10; ++i) {
    mu[i] = 2.0 * rng.uniform() - 1.0;
    sigma[i] = 0.2 + rng.uniform();
  }
  const double prior = 0.9;
  const double closed = ruq::kl_diag_gaussians(Tensor({10}, mu), Tensor({10}, sigma), prior).item();
  constexpr int kDraws = 200000;
  std::vector<double> est(kDraws), w(10);
  const std::vector<double> zero(10, 0.0), ps(10, prior);
  for (int d = 0; d < kDraws; ++d) {
    for (std::size_t i = 0; i < 10; ++i) w[i] = mu[i] + sigma[i] * rng.normal();
    est[d] = log_normal(w, mu, sigma) - log_normal(w, zero, ps);
  }
  const auto m = ruq::testing::moments(est);
  EXPECT_LT(std::abs(m.mean - closed), 3.0 * m.se_mean);
}

TEST(Objectives, MinibatchWeightExamples) {
  EXPECT_EQ(ruq::minibatch_weights(1), std::vector<double>{1.0});
  const auto w3 = ruq::minibatch_weights(3);
  EXPECT_DOUBLE_EQ(w3[0], 4.0 / 7.0);
  EXPECT_DOUBLE_EQ(w3[1], 2.0 / 7.0);
  EXPECT_DOUBLE_EQ(w3[2], 1.0 / 7.0);
  const auto w10 = ruq::minibatch_weights(10);
  EXPECT_DOUBLE_EQ(w10[0], 512.0 / 1023.0);
  for (std::size_t i = 1; i < 10; ++i) EXPECT_DOUBLE_EQ(w10[i], w10[i - 1] / 2.0);
  const auto u = ruq::minibatch_weights(4, ruq::KlWeighting::uniform);
  for (double x : u) EXPECT_EQ(x, 0.25);
  EXPECT_THROW(ruq::minibatch_weights(0), ruq::ConfigError);
}

TEST(Objectives, MinibatchWeightsSumToOneExactly) {
  for (std::size_t M = 1; M <= 64; ++M) {
    const auto w = ruq::exact_minibatch_weights(M);
    std::uint64_t total = 0;
    for (std::uint64_t n : w.numerators) total += n;
    EXPECT_EQ(total, w.denominator) << "M = " << M;
    const auto approx = ruq::minibatch_weights(M);
    double s = 0.0;
    for (double x : approx) s += x;
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(Objectives, ElboUniformSingleBatchIsKlPlusNllSum) {
  Rng rng(6);
  const FunctionalModel model(small_spec(ModelKind::variational, Sampler::lrt), rng);
  const Tensor x = random_batch(7, 3, rng);
  const Tensor y = random_batch(7, 1, rng);
  const std::vector<NoiseBundle> draws = {ruq::draw_noise(model, x, Rng(1))};
  ruq::ElboConfig cfg;
  cfg.weighting = ruq::KlWeighting::uniform;
  const auto terms = ruq::elbo_estimate(model, x, y, 0, cfg, draws);
  double kl = 0.0;
  for (const auto& l : model.variational()) kl += ruq::kl_layer(l).item();
  const auto out = ruq::model_forward(model, x, draws[0]);
  const double nll = ruq::gaussian_nll_sum(y, out.mu, out.var).item();
  EXPECT_NEAR(terms.kl.item(), kl, 1e-12);
  EXPECT_NEAR(terms.loss.item(), kl + nll, 1e-10);
  EXPECT_EQ(terms.weight, 1.0);
}

TEST(Objectives, ElboPointMassDataTermIsMleNll) {
  Rng rng(7);
  FunctionalModel model(small_spec(ModelKind::variational, Sampler::naive), rng);
  model.set_rho(-40.0);
  const Tensor x = random_batch(9, 3, rng);
  const Tensor y = random_batch(9, 1, rng);
  const std::vector<NoiseBundle> draws = {ruq::draw_noise(model, x, Rng(2))};
  ruq::ElboConfig cfg;
  cfg.M = 3;
  const auto terms = ruq::elbo_estimate(model, x, y, 1, cfg, draws);
  const auto det = ruq::model_forward(model.mean_model(), x);
  EXPECT_NEAR(terms.data.item(), 9.0 * ruq::gaussian_nll(y, det.mu, det.var).item(), 1e-9);
  double kl = 0.0;
  for (const auto& l : model.variational()) kl += ruq::kl_layer(l).item();
  EXPECT_NEAR(terms.kl.item(), kl, 1e-9 * kl);
  EXPECT_DOUBLE_EQ(terms.weight, 2.0 / 7.0);
}

TEST(Objectives, ElboGradientMatchesFiniteDifferences) {
  for (Sampler s : {Sampler::naive, Sampler::lrt, Sampler::flipout, Sampler::radial}) {
    for (int trial = 0; trial < 3; ++trial) {
      Rng rng(100 + trial);
      const FunctionalModel model(small_spec(ModelKind::variational, s), rng);
      const Tensor x = random_batch(6, 3, rng);
      const Tensor y = random_batch(6, 1, rng);
      ruq::ElboConfig cfg;
      cfg.n_mc_train = 2;
      cfg.M = 4;
      const std::vector<NoiseBundle> draws = {ruq::draw_noise(model, x, Rng(2 * trial)),
                                              ruq::draw_noise(model, x, Rng(2 * trial + 1))};
      auto params = model.parameters();
      auto f = [&] { return ruq::elbo_estimate(model, x, y, 0, cfg, draws).loss; };
      EXPECT_LT(ad::grad_check(f, params, 1e-5), 1e-4) << ruq::sampler_name(s);
    }
  }
}

TEST(Objectives, ElboRejectsBadInputs) {
  Rng rng(8);
  const FunctionalModel model(small_spec(ModelKind::variational), rng);
  const Tensor x = random_batch(4, 3, rng);
  const Tensor y = random_batch(4, 1, rng);
  const std::vector<NoiseBundle> one = {ruq::draw_noise(model, x, Rng(1))};
  ruq::ElboConfig cfg;
  EXPECT_THROW(ruq::elbo_estimate(model, Tensor::zeros({0, 3}), Tensor::zeros({0, 1}), 0, cfg, one),
               ruq::ShapeError);
  cfg.n_mc_train = 2;
  EXPECT_THROW(ruq::elbo_estimate(model, x, y, 0, cfg, one), ruq::ConfigError);
  cfg.n_mc_train = 1;
  EXPECT_THROW(ruq::elbo_estimate(model, x, y, 1, cfg, one), ruq::ConfigError);
  cfg.sampled_kl = true;
  EXPECT_THROW(ruq::elbo_estimate(model, x, y, 0, cfg, one), ruq::ConfigError);
  const FunctionalModel det(small_spec(ModelKind::deterministic), rng);
  EXPECT_THROW(ruq::elbo_estimate(det, x, y, 0, ruq::ElboConfig{}, std::vector<NoiseBundle>{{}}),
               ruq::ConfigError);
}

TEST(Objectives, SampledKlAveragesToClosedForm) {
  for (Sampler s : {Sampler::naive, Sampler::flipout}) {
    Rng rng(9);
    const FunctionalModel model(small_spec(ModelKind::variational, s), rng);
    const Tensor x = random_batch(3, 3, rng);
    double closed = 0.0;
    for (const auto& l : model.variational()) closed += ruq::kl_layer(l).item();
    std::vector<double> est;
    for (int d = 0; d < 20000; ++d) {
      const std::vector<NoiseBundle> draw = {ruq::draw_noise(model, x, Rng(d))};
      est.push_back(ruq::model_kl(model, draw, true).item());
    }
    const auto m = ruq::testing::moments(est);
    EXPECT_LT(std::abs(m.mean - closed), 3.0 * m.se_mean) << ruq::sampler_name(s);
  }
}

TEST(Objectives, RadialKlConvergesToExactValue) {
  Rng rng(10);
  const FunctionalModel model(small_spec(ModelKind::variational, Sampler::radial), rng);
  const auto& layer = model.variational()[0];
  std::vector<double> mc, sampled;
  for (int d = 0; d < 20000; ++d) {
    Rng r(1000 + d);
    const auto noise = ruq::draw_radial_noise(layer.in(), layer.out(), r);
    mc.push_back(ruq::kl_radial_mc(layer, std::span(&noise, 1)).item());
    NoiseBundle b;
    for (std::size_t l = 0; l < model.dense_count(); ++l) {
      b.layers.emplace_back(l == 0 ? noise : ruq::draw_radial_noise(model.variational()[l].in(),
                                                                    model.variational()[l].out(), r));
    }
    sampled.push_back(ruq::model_kl(model, std::span(&b, 1), true).item());
  }
  const double exact = radial_kl_exact(layer);
  const auto m = ruq::testing::moments(mc);
  EXPECT_LT(std::abs(m.mean - exact), 3.0 * m.se_mean);
  double exact_model = 0.0;
  for (const auto& l : model.variational()) exact_model += radial_kl_exact(l);
  const auto ms = ruq::testing::moments(sampled);
  EXPECT_LT(std::abs(ms.mean - exact_model), 3.0 * ms.se_mean);
}

TEST(Objectives, RadialKlEntropyShiftsWithSigma) {
  Rng rng(11);
  const FunctionalModel model(small_spec(ModelKind::variational, Sampler::radial), rng);
  const auto& layer = model.variational()[1];
  Rng r(3);
  std::vector<ruq::RadialNoise> draws;
  for (int d = 0; d < 4; ++d) draws.push_back(ruq::draw_radial_noise(layer.in(), layer.out(), r));
  // Entropy part alone: KL minus the cross-entropy estimated from the same draws.
  auto entropy_part = [&](const ruq::VariationalLinear& l) {
    const double kl = ruq::kl_radial_mc(l, draws).item();
    double cross = 0.0;
    for (const auto& n : draws) {
      const auto scaled = ruq::radial_standardized(n);
      const double s = l.prior_scale;
      std::size_t k = 0;
      auto acc = [&](const Tensor& mu, const Tensor& rho) {
        for (std::size_t i = 0; i < mu.size(); ++i, ++k) {
          const double w = mu[i] + ad::softplus(rho[i]) * scaled[k];
          cross += 0.5 * std::log(2.0 * std::numbers::pi * s * s) + w * w / (2.0 * s * s);
        }
      };
      acc(l.mu_W, l.rho_W);
      acc(l.mu_b, l.rho_b);
    }
    return kl - cross / draws.size();
  };
  ruq::VariationalLinear doubled = layer;
  doubled.rho_W = layer.rho_W.clone();
  doubled.rho_b = layer.rho_b.clone();
  for (double& x : doubled.rho_W.mutable_data()) x = ad::softplus_inverse(2.0 * ad::softplus(x));
  for (double& x : doubled.rho_b.mutable_data()) x = ad::softplus_inverse(2.0 * ad::softplus(x));
  const double shift = entropy_part(layer) - entropy_part(doubled);
  EXPECT_NEAR(shift, layer.weight_count() * std::log(2.0), 1e-9);
}

TEST(Objectives, RadialKlGradientMatchesFiniteDifferences) {
  Rng rng(12);
  const FunctionalModel model(small_spec(ModelKind::variational, Sampler::radial), rng);
  const auto& layer = model.variational()[0];
  Rng r(4);
  std::vector<ruq::RadialNoise> draws;
  for (int d = 0; d < 3; ++d) draws.push_back(ruq::draw_radial_noise(layer.in(), layer.out(), r));
  Tensor wrt[] = {layer.mu_W, layer.mu_b, layer.rho_W};
  EXPECT_LT(ad::grad_check([&] { return ruq::kl_radial_mc(layer, draws); }, wrt, 1e-5), 1e-3);
}

TEST(Objectives, RadialKlVarianceShrinksAsOneOverDraws) {
  Rng rng(13);
  const FunctionalModel model(small_spec(ModelKind::variational, Sampler::radial), rng);
  const auto& layer = model.variational()[0];
  std::vector<double> log_draws, log_var;
  Rng r(5);
  for (std::size_t draws : {1, 2, 4, 8, 16, 32}) {
    std::vector<double> est;
    for (int rep = 0; rep < 400; ++rep) est.push_back(ruq::kl_radial_mc(layer, draws, r).item());
    log_draws.push_back(std::log(static_cast<double>(draws)));
    log_var.push_back(std::log(ruq::testing::moments(est).var));
  }
  EXPECT_NEAR(ruq::testing::ols_slope(log_draws, log_var), -1.0, 0.2);
  EXPECT_THROW(ruq::kl_radial_mc(layer, 0, r), ruq::ConfigError);
}

TEST(Objectives, McdObjectiveExamples) {
  Rng rng(14);
  FunctionalModel model(small_spec(ModelKind::dropout), rng);
  const Tensor x = random_batch(5, 3, rng);
  const Tensor y = random_batch(5, 1, rng);
  const NoiseBundle masks = ruq::draw_noise(model, x, Rng(3));
  const auto out = ruq::model_forward(model, x, masks);
  EXPECT_EQ(ruq::mcd_objective(model, x, y, 0.0, masks).item(),
            ruq::gaussian_nll(y, out.mu, out.var).item());
  for (auto& l : model.linear()) {
    for (double& w : l.W.mutable_data()) w = 0.0;
  }
  const auto zero_out = ruq::model_forward(model, x, masks);
  EXPECT_EQ(ruq::mcd_objective(model, x, y, 1.0, masks).item(),
            ruq::gaussian_nll(y, zero_out.mu, zero_out.var).item());
  EXPECT_THROW(ruq::mcd_objective(model, x, y, -1.0, masks), ruq::ConfigError);
}

TEST(Objectives, McdObjectiveGradientMatchesFiniteDifferences) {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(200 + trial);
    const FunctionalModel model(small_spec(ModelKind::dropout), rng);
    const Tensor x = random_batch(6, 3, rng);
    const Tensor y = random_batch(6, 1, rng);
    const NoiseBundle masks = ruq::draw_noise(model, x, Rng(trial));
    auto params = model.parameters();
    auto f = [&] { return ruq::mcd_objective(model, x, y, 0.1, masks); };
    EXPECT_LT(ad::grad_check(f, params, 1e-5), 1e-4);
  }
}

TEST(Objectives, ObjectivesAreDeterministic) {
  Rng rng(15);
  const FunctionalModel model(small_spec(ModelKind::variational, Sampler::flipout), rng);
  const Tensor x = random_batch(5, 3, rng);
  const Tensor y = random_batch(5, 1, rng);
  const std::vector<NoiseBundle> draws = {ruq::draw_noise(model, x, Rng(8))};
  ruq::ElboConfig cfg;
  const double a = ruq::elbo_estimate(model, x, y, 0, cfg, draws).loss.item();
  const double b = ruq::elbo_estimate(model, x, y, 0, cfg, draws).loss.item();
  EXPECT_EQ(std::bit_cast<std::uint64_t>(a), std::bit_cast<std::uint64_t>(b));
}
