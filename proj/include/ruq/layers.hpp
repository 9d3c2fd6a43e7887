#pragma once

// Deterministic, dropout, and mean-field variational dense layers.
//
// Weight matrices are stored input-major ([in, out]) so a batch [n, in]
// multiplies on the left. Every stochastic forward takes its noise as an
// explicit argument; drawing the noise is a separate step (see model.hpp).

#include <cstddef>
#include <string>

#include "ruq/autodiff.hpp"
#include "ruq/rng.hpp"

namespace ruq {

enum class Sampler { naive, lrt, flipout, radial };

const char* sampler_name(Sampler s);
Sampler parse_sampler(const std::string& name);

struct LinearLayer {
  ad::Tensor W;  // [in, out]
  ad::Tensor b;  // [out]

  std::size_t in() const { return W.shape()[0]; }
  std::size_t out() const { return W.shape()[1]; }

  /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
  static LinearLayer init(std::size_t in, std::size_t out, Rng& rng);
  ad::Tensor forward(const ad::Tensor& x) const;
};

struct VariationalLinear {
  ad::Tensor mu_W;   // [in, out]
  ad::Tensor rho_W;  // [in, out]
  ad::Tensor mu_b;   // [out]
  ad::Tensor rho_b;  // [out]
  double prior_scale = 1.0;
  Sampler sampler = Sampler::lrt;

  std::size_t in() const { return mu_W.shape()[0]; }
  std::size_t out() const { return mu_W.shape()[1]; }
  std::size_t weight_count() const { return mu_W.size() + mu_b.size(); }

  /// Means as in LinearLayer::init, rho = softplus^-1(q_scale) everywhere.
  static VariationalLinear init(std::size_t in, std::size_t out, double prior_scale, double q_scale,
                                Sampler sampler, Rng& rng);

  /// Output of the layer with every weight at its mean.
  ad::Tensor forward_mean(const ad::Tensor& x) const;
};

struct DropoutLayer {
  double p = 0.0;
  std::size_t width = 0;
};

/// Standard-normal draws shaped like the weights and biases; one draw per batch.
struct WeightNoise {
  ad::Tensor eps_W;  // [in, out]
  ad::Tensor eps_b;  // [out]
};

/// Standard-normal pre-activation noise, one independent row per example.
struct LocalNoise {
  ad::Tensor eps;  // [batch, out]
};

struct FlipoutNoise {
  ad::Tensor eps_W;     // [in, out], shared
  ad::Tensor sign_out;  // [batch, out], entries +-1
  ad::Tensor sign_in;   // [batch, in], entries +-1
  ad::Tensor eps_b;     // [batch, out], per-example bias noise
};

/// Radial draw: weights and biases form one direction vector, scaled by radius.
struct RadialNoise {
  ad::Tensor eps_W;  // [in, out]
  ad::Tensor eps_b;  // [out]
  double radius = 0.0;
};

struct DropoutMask {
  ad::Tensor mask;  // [batch, width], entries 0 or 1
};

/// sigma = softplus(rho), stable for large |rho|.
ad::Tensor softplus_scale(const ad::Tensor& rho);

ad::Tensor forward_naive(const VariationalLinear& layer, const ad::Tensor& x,
                         const WeightNoise& noise);
ad::Tensor forward_lrt(const VariationalLinear& layer, const ad::Tensor& x,
                       const LocalNoise& noise);
/// Throws DomainError if any sign entry is not exactly +1 or -1.
ad::Tensor forward_flipout(const VariationalLinear& layer, const ad::Tensor& x,
                           const FlipoutNoise& noise);
/// Throws DomainError if the joint noise vector has zero norm; draw_radial_noise
/// never produces one.
ad::Tensor forward_radial(const VariationalLinear& layer, const ad::Tensor& x,
                          const RadialNoise& noise);
/// Inverted dropout: x * mask / (1 - p). Throws ConfigError unless 0 <= p < 1.
ad::Tensor forward_dropout(const DropoutLayer& layer, const ad::Tensor& x,
                           const DropoutMask& mask);

WeightNoise draw_weight_noise(std::size_t in, std::size_t out, Rng& rng);
RadialNoise draw_radial_noise(std::size_t in, std::size_t out, Rng& rng);

/// Samples (w - mu) / sigma for a radial draw, flattened weights then biases.
std::vector<double> radial_standardized(const RadialNoise& noise);

void validate_dropout_p(double p);

}  // namespace ruq
