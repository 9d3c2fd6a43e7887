#include "ruq/layers.hpp"

#include <cmath>

#include "ruq/error.hpp"

namespace ruq {

using ad::Tensor;

namespace {

Tensor uniform_tensor(ad::Shape shape, double bound, Rng& rng) {
  std::vector<double> v(ad::element_count(shape));
  for (double& x : v) x = bound * (2.0 * rng.uniform() - 1.0);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor normal_tensor(ad::Shape shape, Rng& rng) {
  std::vector<double> v(ad::element_count(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

void expect_shape(const char* what, const Tensor& t, const ad::Shape& shape) {
  if (t.shape() != shape) {
    throw ShapeError(std::string(what) + ": expected " + ad::to_string(shape) + ", got " +
                     ad::to_string(t.shape()));
  }
}

void expect_signs(const char* what, const Tensor& t) {
  for (double s : t.data()) {
    if (s != 1.0 && s != -1.0) throw DomainError(std::string(what) + " entries must be +1 or -1");
  }
}

double joint_norm(const Tensor& a, const Tensor& b) {
  double ss = 0.0;
  for (double v : a.data()) ss += v * v;
  for (double v : b.data()) ss += v * v;
  return std::sqrt(ss);
}

Tensor scaled(const Tensor& t, double k) {
  std::vector<double> v(t.data().begin(), t.data().end());
  for (double& x : v) x *= k;
  return Tensor(t.shape(), std::move(v));
}

}  // namespace

const char* sampler_name(Sampler s) {
  switch (s) {
    case Sampler::naive: return "naive";
    case Sampler::lrt: return "lrt";
    case Sampler::flipout: return "flipout";
    case Sampler::radial: return "radial";
  }
  return "?";
}

Sampler parse_sampler(const std::string& name) {
  if (name == "naive") return Sampler::naive;
  if (name == "lrt") return Sampler::lrt;
  if (name == "flipout") return Sampler::flipout;
  if (name == "radial") return Sampler::radial;
  throw ConfigError("unknown sampler '" + name + "' (expected naive, lrt, flipout, radial)");
}

LinearLayer LinearLayer::init(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  LinearLayer layer;
  layer.W = uniform_tensor({in, out}, bound, rng);
  layer.b = uniform_tensor({out}, bound, rng);
  return layer;
}

Tensor LinearLayer::forward(const Tensor& x) const { return ad::add(ad::matmul(x, W), b); }

VariationalLinear VariationalLinear::init(std::size_t in, std::size_t out, double prior_scale,
                                          double q_scale, Sampler sampler, Rng& rng) {
  if (!(prior_scale > 0.0)) throw ConfigError("prior_scale must be positive");
  if (!(q_scale > 0.0)) throw ConfigError("q_scale must be positive");
  const LinearLayer means = LinearLayer::init(in, out, rng);
  const double rho = ad::softplus_inverse(q_scale);
  VariationalLinear layer;
  layer.mu_W = means.W;
  layer.mu_b = means.b;
  layer.rho_W = Tensor::filled({in, out}, rho, true);
  layer.rho_b = Tensor::filled({out}, rho, true);
  layer.prior_scale = prior_scale;
  layer.sampler = sampler;
  return layer;
}

Tensor VariationalLinear::forward_mean(const Tensor& x) const {
  return ad::add(ad::matmul(x, mu_W), mu_b);
}

Tensor softplus_scale(const Tensor& rho) { return ad::softplus(rho); }

Tensor forward_naive(const VariationalLinear& layer, const Tensor& x, const WeightNoise& noise) {
  expect_shape("naive weight noise", noise.eps_W, layer.mu_W.shape());
  expect_shape("naive bias noise", noise.eps_b, layer.mu_b.shape());
  const Tensor W = layer.mu_W + softplus_scale(layer.rho_W) * noise.eps_W;
  const Tensor b = layer.mu_b + softplus_scale(layer.rho_b) * noise.eps_b;
  return ad::add(ad::matmul(x, W), b);
}

Tensor forward_lrt(const VariationalLinear& layer, const Tensor& x, const LocalNoise& noise) {
  expect_shape("lrt noise", noise.eps, {x.rows(), layer.out()});
  const Tensor mean = layer.forward_mean(x);
  const Tensor var_W = ad::square(softplus_scale(layer.rho_W));
  const Tensor var_b = ad::square(softplus_scale(layer.rho_b));
  const Tensor var = ad::add(ad::matmul(ad::square(x), var_W), var_b);
  return mean + noise.eps * ad::sqrt(var);
}

Tensor forward_flipout(const VariationalLinear& layer, const Tensor& x,
                       const FlipoutNoise& noise) {
  const std::size_t n = x.rows();
  expect_shape("flipout weight noise", noise.eps_W, layer.mu_W.shape());
  expect_shape("flipout output signs", noise.sign_out, {n, layer.out()});
  expect_shape("flipout input signs", noise.sign_in, {n, layer.in()});
  expect_shape("flipout bias noise", noise.eps_b, {n, layer.out()});
  expect_signs("flipout output signs", noise.sign_out);
  expect_signs("flipout input signs", noise.sign_in);
  const Tensor delta_W = softplus_scale(layer.rho_W) * noise.eps_W;
  const Tensor perturbation = noise.sign_out * ad::matmul(x * noise.sign_in, delta_W);
  const Tensor bias_perturbation = noise.eps_b * softplus_scale(layer.rho_b);
  return layer.forward_mean(x) + perturbation + bias_perturbation;
}

Tensor forward_radial(const VariationalLinear& layer, const Tensor& x, const RadialNoise& noise) {
  expect_shape("radial weight noise", noise.eps_W, layer.mu_W.shape());
  expect_shape("radial bias noise", noise.eps_b, layer.mu_b.shape());
  const double norm = joint_norm(noise.eps_W, noise.eps_b);
  if (!(norm > 0.0)) throw DomainError("radial noise direction has zero norm");
  const double k = noise.radius / norm;
  const Tensor W = layer.mu_W + softplus_scale(layer.rho_W) * scaled(noise.eps_W, k);
  const Tensor b = layer.mu_b + softplus_scale(layer.rho_b) * scaled(noise.eps_b, k);
  return ad::add(ad::matmul(x, W), b);
}

void validate_dropout_p(double p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
}

Tensor forward_dropout(const DropoutLayer& layer, const Tensor& x, const DropoutMask& mask) {
  validate_dropout_p(layer.p);
  expect_shape("dropout mask", mask.mask, x.shape());
  if (layer.p == 0.0) return x;
  return (x * mask.mask) * (1.0 / (1.0 - layer.p));
}

WeightNoise draw_weight_noise(std::size_t in, std::size_t out, Rng& rng) {
  WeightNoise n;
  n.eps_W = normal_tensor({in, out}, rng);
  n.eps_b = normal_tensor({out}, rng);
  return n;
}

RadialNoise draw_radial_noise(std::size_t in, std::size_t out, Rng& rng) {
  RadialNoise n;
  do {
    n.eps_W = normal_tensor({in, out}, rng);
    n.eps_b = normal_tensor({out}, rng);
  } while (!(joint_norm(n.eps_W, n.eps_b) > 0.0));
  n.radius = std::abs(rng.normal());
  return n;
}

std::vector<double> radial_standardized(const RadialNoise& noise) {
  const double k = noise.radius / joint_norm(noise.eps_W, noise.eps_b);
  std::vector<double> out;
  out.reserve(noise.eps_W.size() + noise.eps_b.size());
  for (double v : noise.eps_W.data()) out.push_back(v * k);
  for (double v : noise.eps_b.data()) out.push_back(v * k);
  return out;
}

}  // namespace ruq
