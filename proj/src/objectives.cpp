#include "ruq/objectives.hpp"

#include <cmath>
#include <numbers>

#include "ruq/error.hpp"

namespace ruq {

using ad::Tensor;

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

Tensor nll_terms(const Tensor& y, const Tensor& mu, const Tensor& var) {
  if (y.shape() != mu.shape() || y.shape() != var.shape()) {
    throw ShapeError("gaussian_nll: y " + ad::to_string(y.shape()) + ", mu " +
                     ad::to_string(mu.shape()) + ", var " + ad::to_string(var.shape()));
  }
  if (y.size() == 0) throw ShapeError("gaussian_nll: empty batch");
  for (double v : var.data()) {
    if (!(v > 0.0)) throw DomainError("gaussian_nll: predicted variance must be positive");
  }
  return ad::log(var) * 0.5 + ad::square(y - mu) / (var * 2.0) + kHalfLog2Pi;
}

double minibatch_weight(std::size_t M, std::size_t i, KlWeighting weighting) {
  if (weighting == KlWeighting::uniform) return 1.0 / static_cast<double>(M);
  // 2^(M-i) / (2^M - 1) rewritten as 2^-i / (1 - 2^-M) to avoid overflow.
  return std::ldexp(1.0, -static_cast<int>(i)) / (1.0 - std::ldexp(1.0, -static_cast<int>(M)));
}

// sum[-log sigma - ((w - mu)/sigma)^2 / 2 + log s + w^2 / (2 s^2)]; the 2pi terms cancel.
Tensor gaussian_log_ratio(const Tensor& w, const Tensor& mu, const Tensor& sigma, double s) {
  const Tensor z = (w - mu) / sigma;
  const Tensor terms = ad::square(z) * -0.5 - ad::log(sigma) + ad::square(w) * (0.5 / (s * s));
  return ad::sum(terms) + static_cast<double>(w.size()) * std::log(s);
}

Tensor radial_scaled(const Tensor& eps, double k) {
  std::vector<double> v(eps.data().begin(), eps.data().end());
  for (double& x : v) x *= k;
  return Tensor(eps.shape(), std::move(v));
}

double radial_norm(const RadialNoise& n) {
  double ss = 0.0;
  for (double v : n.eps_W.data()) ss += v * v;
  for (double v : n.eps_b.data()) ss += v * v;
  if (!(ss > 0.0)) throw DomainError("radial noise direction has zero norm");
  return std::sqrt(ss);
}

// -log p(w) under N(0, s^2) for the radial draw, summed over weights and biases.
Tensor radial_cross_entropy(const VariationalLinear& layer, const RadialNoise& n) {
  const double k = n.radius / radial_norm(n);
  const double s = layer.prior_scale;
  const Tensor w = layer.mu_W + softplus_scale(layer.rho_W) * radial_scaled(n.eps_W, k);
  const Tensor b = layer.mu_b + softplus_scale(layer.rho_b) * radial_scaled(n.eps_b, k);
  const double c = static_cast<double>(layer.weight_count()) * 0.5 * std::log(2.0 * std::numbers::pi * s * s);
  return (ad::sum(ad::square(w)) + ad::sum(ad::square(b))) * (0.5 / (s * s)) + c;
}

Tensor sum_log_sigma(const VariationalLinear& layer) {
  return ad::sum(ad::log(softplus_scale(layer.rho_W))) + ad::sum(ad::log(softplus_scale(layer.rho_b)));
}

// log q(w) - log p(w) for one radial draw.
Tensor radial_sampled_log_ratio(const VariationalLinear& layer, const RadialNoise& n) {
  const std::size_t dim = layer.weight_count();
  const double r = n.radius;
  if (!(r > 0.0)) throw DomainError("radial radius must be positive for a sampled density");
  // Density of the standardized vector z = r u: half-normal radius spread over the sphere.
  const double log_area = std::log(2.0) + 0.5 * dim * std::log(std::numbers::pi) - std::lgamma(0.5 * dim);
  const double log_pz = 0.5 * std::log(2.0 / std::numbers::pi) - 0.5 * r * r -
                        (static_cast<double>(dim) - 1.0) * std::log(r) - log_area;
  return (radial_cross_entropy(layer, n) - sum_log_sigma(layer)) + log_pz;
}

Tensor gaussian_sampled_log_ratio(const VariationalLinear& layer, const LayerNoise& noise) {
  const Tensor sw = softplus_scale(layer.rho_W);
  const Tensor sb = softplus_scale(layer.rho_b);
  const double s = layer.prior_scale;
  if (const auto* n = std::get_if<WeightNoise>(&noise)) {
    const Tensor w = layer.mu_W + sw * n->eps_W;
    const Tensor b = layer.mu_b + sb * n->eps_b;
    return gaussian_log_ratio(w, layer.mu_W, sw, s) + gaussian_log_ratio(b, layer.mu_b, sb, s);
  }
  if (const auto* n = std::get_if<FlipoutNoise>(&noise)) {
    // Sign flips leave the Gaussian density unchanged; the per-example bias
    // draws are averaged over the batch.
    const Tensor w = layer.mu_W + sw * n->eps_W;
    const Tensor b = ad::add(n->eps_b * sb, layer.mu_b);
    const double rows = static_cast<double>(n->eps_b.rows());
    return gaussian_log_ratio(w, layer.mu_W, sw, s) +
           gaussian_log_ratio(b, layer.mu_b, sb, s) * (1.0 / rows);
  }
  throw ConfigError(std::string("sampled KL is not available for the ") +
                    sampler_name(layer.sampler) + " sampler");
}

}  // namespace

Tensor gaussian_nll(const Tensor& y, const Tensor& mu, const Tensor& var) {
  return ad::mean(nll_terms(y, mu, var));
}

Tensor gaussian_nll_sum(const Tensor& y, const Tensor& mu, const Tensor& var) {
  return ad::sum(nll_terms(y, mu, var));
}

Tensor kl_diag_gaussians(const Tensor& mu, const Tensor& sigma, double prior_scale) {
  if (mu.shape() != sigma.shape()) {
    throw ShapeError("kl_diag_gaussians: mu " + ad::to_string(mu.shape()) + " vs sigma " +
                     ad::to_string(sigma.shape()));
  }
  if (!(prior_scale > 0.0)) throw DomainError("kl_diag_gaussians: prior scale must be positive");
  for (double s : sigma.data()) {
    if (!(s > 0.0)) throw DomainError("kl_diag_gaussians: sigma must be positive");
  }
  const double s2 = prior_scale * prior_scale;
  const Tensor terms = (ad::square(sigma) + ad::square(mu)) * (0.5 / s2) - ad::log(sigma);
  return ad::sum(terms) + static_cast<double>(mu.size()) * (std::log(prior_scale) - 0.5);
}

std::vector<double> minibatch_weights(std::size_t M, KlWeighting weighting) {
  if (M == 0) throw ConfigError("minibatch_weights: M must be at least 1");
  std::vector<double> w(M);
  for (std::size_t i = 1; i <= M; ++i) w[i - 1] = minibatch_weight(M, i, weighting);
  return w;
}

ExactWeights exact_minibatch_weights(std::size_t M) {
  if (M == 0 || M > 64) throw ConfigError("exact_minibatch_weights: M must lie in [1, 64]");
  ExactWeights w;
  w.denominator = M == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << M) - 1;
  for (std::size_t i = 1; i <= M; ++i) w.numerators.push_back(std::uint64_t{1} << (M - i));
  return w;
}

Tensor kl_layer(const VariationalLinear& layer) {
  return kl_diag_gaussians(layer.mu_W, softplus_scale(layer.rho_W), layer.prior_scale) +
         kl_diag_gaussians(layer.mu_b, softplus_scale(layer.rho_b), layer.prior_scale);
}

double radial_standard_entropy(std::size_t dim) {
  if (dim == 0) throw DomainError("radial entropy needs a positive dimension");
  const double d = static_cast<double>(dim);
  const double half_normal_entropy = 0.5 * std::log(0.5 * std::numbers::pi * std::numbers::e);
  const double mean_log_radius = -0.5 * (std::numbers::egamma + std::log(2.0));
  const double log_area = std::log(2.0) + 0.5 * d * std::log(std::numbers::pi) - std::lgamma(0.5 * d);
  return half_normal_entropy + (d - 1.0) * mean_log_radius + log_area;
}

Tensor kl_radial_mc(const VariationalLinear& layer, std::span<const RadialNoise> draws) {
  if (draws.empty()) throw ConfigError("kl_radial_mc: at least one draw is required");
  Tensor cross = radial_cross_entropy(layer, draws[0]);
  for (std::size_t d = 1; d < draws.size(); ++d) cross = cross + radial_cross_entropy(layer, draws[d]);
  cross = cross * (1.0 / static_cast<double>(draws.size()));
  const Tensor entropy = sum_log_sigma(layer) + radial_standard_entropy(layer.weight_count());
  return cross - entropy;
}

Tensor kl_radial_mc(const VariationalLinear& layer, std::size_t draws, Rng& rng) {
  if (draws < 1) throw ConfigError("kl_radial_mc: at least one draw is required");
  std::vector<RadialNoise> noise;
  noise.reserve(draws);
  for (std::size_t d = 0; d < draws; ++d) noise.push_back(draw_radial_noise(layer.in(), layer.out(), rng));
  return kl_radial_mc(layer, noise);
}

Tensor model_kl(const FunctionalModel& model, std::span<const NoiseBundle> draws, bool sampled) {
  if (model.spec().kind != ModelKind::variational) {
    throw ConfigError("KL term needs a model with variational layers");
  }
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < model.dense_count(); ++l) {
    const VariationalLinear& layer = model.variational()[l];
    const bool needs_draws = sampled || layer.sampler == Sampler::radial;
    if (!needs_draws) {
      total = total + kl_layer(layer);
      continue;
    }
    if (draws.empty()) throw ConfigError("KL estimate needs at least one noise draw");
    if (layer.sampler == Sampler::lrt) {
      throw ConfigError("sampled KL is not available for the lrt sampler");
    }
    std::vector<RadialNoise> radial;
    Tensor acc = Tensor::scalar(0.0);
    for (const auto& bundle : draws) {
      if (bundle.layers.size() != model.dense_count()) {
        throw ConfigError("noise bundle lacks draws for variational layer " + std::to_string(l));
      }
      const LayerNoise& n = bundle.layers[l];
      if (layer.sampler == Sampler::radial) {
        const auto* r = std::get_if<RadialNoise>(&n);
        if (!r) throw ConfigError("missing radial noise for layer " + std::to_string(l));
        if (sampled) {
          acc = acc + radial_sampled_log_ratio(layer, *r);
        } else {
          radial.push_back(*r);
        }
      } else {
        acc = acc + gaussian_sampled_log_ratio(layer, n);
      }
    }
    if (!radial.empty()) {
      total = total + kl_radial_mc(layer, radial);
    } else {
      total = total + acc * (1.0 / static_cast<double>(draws.size()));
    }
  }
  return total;
}

ElboTerms elbo_estimate(const FunctionalModel& model, const Tensor& x, const Tensor& y,
                        std::size_t batch_index, const ElboConfig& cfg,
                        std::span<const NoiseBundle> draws) {
  if (x.rank() != 2 || x.rows() == 0) throw ShapeError("elbo_estimate: empty batch");
  if (cfg.n_mc_train < 1) throw ConfigError("elbo_estimate: n_mc_train must be at least 1");
  if (cfg.M < 1 || batch_index >= cfg.M) {
    throw ConfigError("elbo_estimate: batch index " + std::to_string(batch_index) +
                      " outside [0, " + std::to_string(cfg.M) + ")");
  }
  if (draws.size() != cfg.n_mc_train) {
    throw ConfigError("elbo_estimate: expected " + std::to_string(cfg.n_mc_train) +
                      " noise bundles, got " + std::to_string(draws.size()));
  }
  ElboTerms t;
  t.weight = minibatch_weight(cfg.M, batch_index + 1, cfg.weighting);
  t.kl = model_kl(model, draws, cfg.sampled_kl);
  Tensor data = Tensor::scalar(0.0);
  for (const auto& bundle : draws) {
    const ModelOutput out = model_forward(model, x, bundle);
    data = data + gaussian_nll_sum(y, out.mu, out.var);
  }
  t.data = data * (1.0 / static_cast<double>(draws.size()));
  t.loss = t.kl * t.weight + t.data;
  return t;
}

Tensor mcd_objective(const FunctionalModel& model, const Tensor& x, const Tensor& y, double lambda,
                     const NoiseBundle& masks) {
  if (!(lambda >= 0.0)) throw ConfigError("mcd_objective: lambda must be non-negative");
  const ModelOutput out = model_forward(model, x, masks);
  Tensor loss = gaussian_nll(y, out.mu, out.var);
  if (lambda == 0.0) return loss;
  Tensor penalty = Tensor::scalar(0.0);
  for (const Tensor& W : model.weight_matrices()) penalty = penalty + ad::sum(ad::square(W));
  return loss + penalty * lambda;
}

}  // namespace ruq
