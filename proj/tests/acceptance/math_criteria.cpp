#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

#include "criteria.hpp"
#include "ruq/layers.hpp"
#include "ruq/metrics.hpp"
#include "ruq/objectives.hpp"
#include "ruq/predictors.hpp"
#include "support/stats.hpp"

namespace ruq::acceptance {
namespace {

using ad::Tensor;
using testing::moments;

Tensor random_batch(std::size_t n, std::size_t d, Rng& rng) {
  std::vector<double> v(n * d);
  for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
  return Tensor({n, d}, std::move(v));
}

Tensor normals(ad::Shape shape, Rng& rng) {
  std::vector<double> v(ad::element_count(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

Tensor signs(ad::Shape shape, Rng& rng) {
  std::vector<double> v(ad::element_count(shape));
  for (double& x : v) x = rng.sign();
  return Tensor(std::move(shape), std::move(v));
}

ModelSpec random_spec(ModelKind kind, Sampler sampler, Rng& rng) {
  ModelSpec s;
  s.input_dim = 2 + rng.below(3);
  s.hidden = {3 + rng.below(4), 2 + rng.below(4)};
  s.kind = kind;
  s.sampler = sampler;
  s.dropout_p = 0.1 + 0.4 * rng.uniform();
  s.prior_scale = 0.3 + rng.uniform();
  s.q_scale = 0.05 + 0.3 * rng.uniform();
  s.target_shift = rng.normal();
  s.target_scale = 0.5 + rng.uniform();
  return s;
}

// in = 3, out = 2 layer with hand-picked means and scales.
VariationalLinear moment_layer(Sampler sampler) {
  VariationalLinear layer;
  layer.mu_W = Tensor({3, 2}, {0.5, -1.0, 0.25, 2.0, -0.75, 0.1});
  layer.mu_b = Tensor({2}, {0.3, -0.2});
  std::vector<double> sw = {0.4, 0.2, 0.3, 0.5, 0.1, 0.6};
  for (double& s : sw) s = ad::softplus_inverse(s);
  layer.rho_W = Tensor({3, 2}, sw);
  layer.rho_b = Tensor({2}, {ad::softplus_inverse(0.25), ad::softplus_inverse(0.35)});
  layer.sampler = sampler;
  return layer;
}

Tensor sample_once(const VariationalLinear& layer, const Tensor& x, Rng& rng) {
  const std::size_t n = x.rows();
  switch (layer.sampler) {
    case Sampler::naive:
      return forward_naive(layer, x, draw_weight_noise(layer.in(), layer.out(), rng));
    case Sampler::lrt:
      return forward_lrt(layer, x, {normals({n, layer.out()}, rng)});
    case Sampler::flipout: {
      FlipoutNoise f;
      f.eps_W = normals({layer.in(), layer.out()}, rng);
      f.sign_out = signs({n, layer.out()}, rng);
      f.sign_in = signs({n, layer.in()}, rng);
      f.eps_b = normals({n, layer.out()}, rng);
      return forward_flipout(layer, x, f);
    }
    case Sampler::radial:
      return forward_radial(layer, x, draw_radial_noise(layer.in(), layer.out(), rng));
  }
  return {};
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

}  // namespace

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(Rng(0xacc1).split(trial)());
    const std::size_t n = 4 + rng.below(4);
    struct Case {
      std::string name;
      ModelKind kind;
      Sampler sampler;
    };
    const Case cases[] = {{"gaussian_nll", ModelKind::deterministic, Sampler::lrt},
                          {"elbo/naive", ModelKind::variational, Sampler::naive},
                          {"elbo/lrt", ModelKind::variational, Sampler::lrt},
                          {"elbo/flipout", ModelKind::variational, Sampler::flipout},
                          {"elbo/radial", ModelKind::variational, Sampler::radial},
                          {"mcd_objective", ModelKind::dropout, Sampler::lrt}};
    for (const auto& c : cases) {
      const FunctionalModel model(random_spec(c.kind, c.sampler, rng), rng);
      const Tensor x = random_batch(n, model.spec().input_dim, rng);
      const Tensor y = random_batch(n, 1, rng);
      auto params = model.parameters();
      std::function<Tensor()> f;
      std::vector<NoiseBundle> draws;
      ElboConfig elbo;
      if (c.kind == ModelKind::deterministic) {
        f = [&] {
          const auto out = model_forward(model, x);
          return gaussian_nll(y, out.mu, out.var);
        };
      } else if (c.kind == ModelKind::dropout) {
        draws.push_back(draw_noise(model, x, rng.split(1)));
        f = [&] { return mcd_objective(model, x, y, 1e-3, draws[0]); };
      } else {
        elbo.n_mc_train = 2;
        elbo.M = 3;
        draws = {draw_noise(model, x, rng.split(1)), draw_noise(model, x, rng.split(2))};
        f = [&] { return elbo_estimate(model, x, y, 1, elbo, draws).loss; };
      }
      const double e = ad::grad_check(f, params, 1e-5);
      ++checks;
      if (e > worst) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1e-4 && secs < 60.0, std::to_string(checks) + " checks, max relative error " + fmt(worst) + " (" +
                                           worst_name + ") < 1e-4, " + fmt(secs) + " s < 60 s"};
}

Outcome sampler_moments() {
  const std::vector<double> xv = {0.8, -1.5, 1.2};
  const Tensor x({1, 3}, xv);
  constexpr int kDraws = 100000;
  bool pass = true;
  double worst = 0.0;
  for (Sampler s : {Sampler::naive, Sampler::lrt, Sampler::flipout}) {
    const VariationalLinear layer = moment_layer(s);
    Rng rng(Rng(0xacc2).split(static_cast<std::uint64_t>(s))());
    std::vector<std::vector<double>> samples(2, std::vector<double>(kDraws));
    for (int d = 0; d < kDraws; ++d) {
      const Tensor out = sample_once(layer, x, rng);
      samples[0][d] = out[0];
      samples[1][d] = out[1];
    }
    for (std::size_t k = 0; k < 2; ++k) {
      double mean = layer.mu_b[k];
      double var = std::pow(ad::softplus(layer.rho_b[k]), 2);
      for (std::size_t j = 0; j < 3; ++j) {
        mean += layer.mu_W[j * 2 + k] * xv[j];
        var += xv[j] * xv[j] * std::pow(ad::softplus(layer.rho_W[j * 2 + k]), 2);
      }
      const auto m = moments(samples[k]);
      const double zm = std::abs(m.mean - mean) / m.se_mean;
      const double zv = std::abs(m.var - var) / m.se_var;
      worst = std::max({worst, zm, zv});
      pass = pass && zm < 3.0 && zv < 3.0;
    }
  }
  return {pass, "naive, lrt, flipout: max |deviation| " + fmt(worst) + " standard errors < 3 at 1e5 draws"};
}

Outcome flipout_decorrelation() {
  const Tensor x({2, 3}, {1.0, 0.8, 1.2, 0.9, 1.1, 0.7});
  constexpr int kDraws = 100000;
  double z_flip = 0.0, z_naive = 0.0;
  for (Sampler s : {Sampler::flipout, Sampler::naive}) {
    const VariationalLinear layer = moment_layer(s);
    const Tensor mean = layer.forward_mean(x);
    Rng rng(Rng(0xacc3).split(static_cast<std::uint64_t>(s))());
    std::vector<double> p0(kDraws), p1(kDraws);
    for (int d = 0; d < kDraws; ++d) {
      const Tensor out = sample_once(layer, x, rng);
      p0[d] = out[0] - mean[0];
      p1[d] = out[2] - mean[2];
    }
    const auto [cov, se] = testing::covariance(p0, p1);
    (s == Sampler::flipout ? z_flip : z_naive) = cov / se;
  }
  return {std::abs(z_flip) < 3.0 && z_naive > 3.0,
          "cross-row covariance z: flipout " + fmt(z_flip) + " (|z| < 3), naive " + fmt(z_naive) + " (> 3)"};
}

Outcome radial_law() {
  constexpr int kDraws = 10000;
  Rng rng(0xacc4);
  std::vector<double> radii(kDraws);
  for (int d = 0; d < kDraws; ++d) {
    const auto z = radial_standardized(draw_radial_noise(5, 4, rng));
    double ss = 0.0;
    for (double v : z) ss += v * v;
    radii[d] = std::sqrt(ss);
  }
  const double ks = testing::ks_statistic(radii, testing::half_normal_cdf);
  const double crit = testing::ks_critical_1pct(kDraws);
  return {ks < crit, "KS statistic " + fmt(ks) + " < 1% critical value " + fmt(crit) + " at 1e4 draws"};
}

Outcome decomposition_identity() {
  Rng rng(0xacc5);
  std::size_t rows = 0, violations = 0;
  double worst_mixture = 0.0;
  for (Method m : all_methods()) {
    std::vector<FunctionalModel> models;
    const std::size_t count = m == Method::de ? 5 : 1;
    ModelSpec spec;
    spec.input_dim = 4;
    spec.hidden = {8, 8};
    spec.kind = m == Method::mcd ? ModelKind::dropout : is_bnn(m) ? ModelKind::variational : ModelKind::deterministic;
    spec.dropout_p = 0.3;
    if (is_bnn(m)) spec.sampler = sampler_for(m);
    spec.q_scale = 0.2;
    spec.target_shift = 60.0;
    spec.target_scale = 30.0;
    for (std::size_t k = 0; k < count; ++k) models.emplace_back(spec, rng);
    const Tensor x = random_batch(200, 4, rng);
    const PredictionSet p = predict(m, models, x, 30, rng.split(7));
    for (const auto& r : p.rows) {
      ++rows;
      if (r.total != r.epistemic + r.aleatoric) ++violations;
    }
    if (m == Method::de) {
      for (std::size_t i = 0; i < p.samples.batch; ++i) {
        std::vector<double> mu, var;
        for (std::size_t s = 0; s < p.samples.passes; ++s) {
          mu.push_back(p.samples.mu_at(s, i));
          var.push_back(p.samples.var_at(s, i));
        }
        const auto [mm, mv] = ensemble_mixture(mu, var);
        worst_mixture = std::max(worst_mixture, std::abs(mv - p.rows[i].total));
      }
    }
  }
  return {violations == 0 && worst_mixture <= 1e-12,
          std::to_string(violations) + " of " + std::to_string(rows) +
              " rows violate total = epistemic + aleatoric; max |DE mixture - decomposition| " + fmt(worst_mixture) +
              " <= 1e-12"};
}

Outcome kl_correctness() {
  Rng rng(0xacc6);
  double worst = 0.0;
  constexpr int kDraws = 1000000;
  for (int c = 0; c < 10; ++c) {
    std::vector<double> mu(10), sigma(10);
    for (std::size_t i = 0; i < 10; ++i) {
      mu[i] = 2.0 * rng.uniform() - 1.0;
      sigma[i] = 0.2 + rng.uniform();
    }
    const double prior = 0.5 + rng.uniform();
    const double closed = kl_diag_gaussians(Tensor({10}, mu), Tensor({10}, sigma), prior).item();
    std::vector<double> est(kDraws);
    for (int d = 0; d < kDraws; ++d) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 10; ++i) {
        const double e = rng.normal();
        const double w = mu[i] + sigma[i] * e;
        acc += -std::log(sigma[i]) - 0.5 * e * e + std::log(prior) + 0.5 * (w / prior) * (w / prior);
      }
      est[d] = acc;
    }
    const auto m = moments(est);
    worst = std::max(worst, std::abs(m.mean - closed) / m.se_mean);
  }
  bool exact = true;
  for (std::size_t M = 1; M <= 64; ++M) {
    const auto w = exact_minibatch_weights(M);
    std::uint64_t total = 0;
    for (auto n : w.numerators) total += n;
    exact = exact && total == w.denominator;
    const auto approx = minibatch_weights(M);
    for (std::size_t i = 0; i < M; ++i) {
      exact = exact && approx[i] == static_cast<double>(w.numerators[i]) / static_cast<double>(w.denominator);
    }
  }
  return {worst < 3.0 && exact, "closed form vs 1e6-draw estimate: max " + fmt(worst) +
                                    " standard errors < 3; weights sum to 1 exactly for M in [1, 64]: " +
                                    (exact ? "yes" : "no")};
}

Outcome metric_oracles() {
  Rng rng(0xacc7);
  std::vector<double> F;
  for (int t = 0; t < 10000; ++t) {
    const double mu = 50.0 * rng.uniform();
    const double var = 1.0 + 20.0 * rng.uniform();
    F.push_back(gaussian_cdf(mu + std::sqrt(var) * rng.normal(), mu, var));
  }
  const auto curve = calibration_curve(F, 101);
  const double r = rmsce(curve), area = miscalibration_area(curve);

  const double zero = rmsce(calibration_curve(std::vector<double>(10, 0.0), 3));
  const double hand = std::sqrt(1.25 / 3.0);

  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    PredictiveSampleSet s;
    s.passes = 1 + rng.below(8);
    s.batch = 1 + rng.below(6);
    std::vector<double> y;
    for (std::size_t i = 0; i < s.batch; ++i) y.push_back(4.0 * rng.normal());
    for (std::size_t k = 0; k < s.passes * s.batch; ++k) {
      s.mu.push_back(3.0 * rng.normal());
      s.var.push_back(0.3 + 3.0 * rng.uniform());
    }
    const auto rows = nll_mixture_rows(y, s);
    for (std::size_t i = 0; i < s.batch; ++i) {
      double density = 0.0;
      for (std::size_t p = 0; p < s.passes; ++p) {
        const double v = s.var_at(p, i), d = y[i] - s.mu_at(p, i);
        density += std::exp(-0.5 * d * d / v) / std::sqrt(2.0 * std::numbers::pi * v);
      }
      worst = std::max(worst, std::abs(rows[i] + std::log(density / static_cast<double>(s.passes))));
    }
  }
  const bool pass = r < 0.02 && area < 0.015 && std::abs(zero - hand) < 1e-12 && std::abs(zero - 0.6455) < 5e-5 &&
                    worst < 1e-10;
  return {pass, "PIT oracle rmsce " + fmt(r) + " < 0.02, area " + fmt(area) + " < 0.015; all-zero rmsce " +
                    fmt(zero) + " vs 0.6455; mixture NLL max deviation " + fmt(worst) + " < 1e-10"};
}

}  // namespace ruq::acceptance
