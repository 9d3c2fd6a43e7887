#pragma once

#include <span>
#include <utility>
#include <vector>

#include "ruq/autodiff.hpp"
#include "ruq/model.hpp"
#include "ruq/rng.hpp"

namespace ruq {

/// N stochastic passes over a batch; row s of each array holds pass s.
struct PredictiveSampleSet {
  std::size_t passes = 0;
  std::size_t batch = 0;
  std::vector<double> mu;   // passes x batch
  std::vector<double> var;  // passes x batch, strictly positive

  double mu_at(std::size_t s, std::size_t i) const { return mu[s * batch + i]; }
  double var_at(std::size_t s, std::size_t i) const { return var[s * batch + i]; }
};

/// Predictive mean and variances in target units (variances, not deviations).
struct Prediction {
  double mu = 0.0;
  double total = 0.0;
  double epistemic = 0.0;
  double aleatoric = 0.0;
};

/// Runs N passes with noise bundles drawn from `stream.split(s)`. A
/// deterministic model always yields a single pass. Throws ConfigError if N < 1.
PredictiveSampleSet sample_predictive(const FunctionalModel& model, const ad::Tensor& x,
                                      std::size_t N, const Rng& stream);

/// mu = mean(mu_s), epistemic = mean((mu_s - mu)^2), aleatoric = mean(var_s),
/// total = epistemic + aleatoric.
std::vector<Prediction> decompose(const PredictiveSampleSet& s);

/// Mixture moments: mean of the member means and
/// (1/M) sum(var_m + mu_m^2) - mean^2. Throws ConfigError on an empty list.
std::pair<double, double> ensemble_mixture(std::span<const double> mu, std::span<const double> var);

struct PredictionSet {
  std::vector<Prediction> rows;
  PredictiveSampleSet samples;
  /// Set for deep ensembles, whose epistemic/aleatoric split is reported
  /// but not interpreted.
  bool nominal_decomposition = false;
  /// Set when the requested pass count was overridden (deterministic models).
  bool passes_forced = false;
};

/// Uniform facade over the methods. `models` holds one model, or the members
/// of a deep ensemble. Throws ConfigError when the models do not fit the tag.
PredictionSet predict(Method method, std::span<const FunctionalModel> models, const ad::Tensor& x,
                      std::size_t N, const Rng& stream);

/// Checks that each model's kind (and sampler) matches the method tag.
void check_models_match(Method method, std::span<const FunctionalModel> models);

}  // namespace ruq
