#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ruq/autodiff.hpp"
#include "ruq/model.hpp"

namespace ruq {

enum class KlWeighting { geometric, uniform };

struct ElboConfig {
  std::size_t n_mc_train = 1;
  std::size_t M = 1;  // minibatches per epoch
  KlWeighting weighting = KlWeighting::geometric;
  /// Sampled log q - log p at the drawn weights instead of the closed form.
  /// Not available for the local reparametrization sampler, which never
  /// materializes weights.
  bool sampled_kl = false;
};

/// Mean over the batch of 0.5 log var + (y - mu)^2 / (2 var) + 0.5 log 2pi.
/// Throws DomainError if any variance is not positive.
ad::Tensor gaussian_nll(const ad::Tensor& y, const ad::Tensor& mu, const ad::Tensor& var);
/// Same terms summed over the batch.
ad::Tensor gaussian_nll_sum(const ad::Tensor& y, const ad::Tensor& mu, const ad::Tensor& var);

/// KL(N(mu, sigma^2) || N(0, prior_scale^2)) summed over all coordinates.
ad::Tensor kl_diag_gaussians(const ad::Tensor& mu, const ad::Tensor& sigma, double prior_scale);

/// pi_i = 2^(M-i) / (2^M - 1) (geometric) or 1/M (uniform), i = 1..M.
std::vector<double> minibatch_weights(std::size_t M, KlWeighting weighting = KlWeighting::geometric);

/// Geometric weights as exact integer fractions numerators[i] / denominator.
struct ExactWeights {
  std::vector<std::uint64_t> numerators;
  std::uint64_t denominator = 1;
};
/// Valid for 1 <= M <= 64.
ExactWeights exact_minibatch_weights(std::size_t M);

/// Closed-form KL of one Gaussian variational layer (weights and biases).
ad::Tensor kl_layer(const VariationalLinear& layer);

/// Differential entropy of the standardized radial variable in `dim`
/// dimensions: direction uniform on the sphere, radius |N(0, 1)|.
double radial_standard_entropy(std::size_t dim);

/// MC estimate of KL(q || p) for a radial layer. The cross-entropy term
/// averages -log p over the given draws (reparametrized, so gradients reach
/// mu and rho); the entropy term is analytic.
ad::Tensor kl_radial_mc(const VariationalLinear& layer, std::span<const RadialNoise> draws);
/// Convenience overload drawing `draws` fresh samples from `rng`.
ad::Tensor kl_radial_mc(const VariationalLinear& layer, std::size_t draws, Rng& rng);

/// Sum of layer KL terms. Radial layers use the radial draws in `draws`;
/// with `sampled` every layer uses log q - log p at its drawn weights.
ad::Tensor model_kl(const FunctionalModel& model, std::span<const NoiseBundle> draws,
                    bool sampled = false);

struct ElboTerms {
  ad::Tensor loss;     // pi_i * kl + data
  ad::Tensor kl;
  ad::Tensor data;     // (1/S) sum_s sum_rows NLL
  double weight = 0.0; // pi_i
};

/// Minibatch ELBO loss for batch `batch_index` (0-based) of cfg.M, using one
/// forward pass per noise bundle in `draws` (draws.size() == cfg.n_mc_train).
ElboTerms elbo_estimate(const FunctionalModel& model, const ad::Tensor& x, const ad::Tensor& y,
                        std::size_t batch_index, const ElboConfig& cfg,
                        std::span<const NoiseBundle> draws);

/// Batch-mean Gaussian NLL under one mask draw plus lambda * sum ||W||^2.
ad::Tensor mcd_objective(const FunctionalModel& model, const ad::Tensor& x, const ad::Tensor& y,
                         double lambda, const NoiseBundle& masks);

}  // namespace ruq
