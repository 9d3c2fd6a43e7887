#pragma once

// Optimization loop: Adam, minibatching, deterministic pretraining of the
// variational means, early stopping and deep-ensemble orchestration.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ruq/autodiff.hpp"
#include "ruq/data.hpp"
#include "ruq/model.hpp"
#include "ruq/objectives.hpp"

namespace ruq {

struct TrainConfig {
  Method method = Method::hnn;
  double learning_rate = 0.001574;
  std::size_t batch_size = 250;
  std::size_t max_epochs = 500;
  std::size_t patience = 50;
  std::size_t pretrain_epochs = 0;
  std::size_t n_mc_train = 1;
  std::size_t n_mc_valid = 20;
  std::uint64_t seed = 0;
  double prior_scale = 1.0;
  double q_scale = 1e-3;
  double dropout_p = 0.0;
  double lambda = 1e-5;  // L2 weight of the dropout objective
  std::vector<std::size_t> hidden = {32, 32};
  KlWeighting weighting = KlWeighting::geometric;
  bool sampled_kl = false;
  /// Standardize the outputs with the training-target mean and standard
  /// deviation and start the heads at that prediction.
  bool init_heads = true;

  /// Tuned defaults of each method at max_epochs = 500.
  static TrainConfig defaults(Method m);
  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

/// Sets max_epochs and scales the method's default patience by max_epochs / 500.
TrainConfig with_epoch_budget(TrainConfig cfg, std::size_t max_epochs);

nlohmann::json to_json(const TrainConfig& cfg);
/// Overlays the keys of `j` onto `base`; unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base);

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> valid_loss;
  std::size_t stop_epoch = 0;  // epochs run
  std::size_t best_epoch = 0;  // 1-based epoch of the restored parameters
  double best_valid = 0.0;
  double wall_seconds = 0.0;

  /// CSV with columns epoch, train_loss, valid_loss (wall time excluded so
  /// that the file is reproducible).
  std::string to_csv() const;
};

/// First and second moment estimates of Adam, one buffer per parameter.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(std::span<const ad::Tensor> params);
};

/// One bias-corrected Adam update using the gradients stored on `params`.
/// Throws NumericError on a non-finite gradient before touching any parameter.
void adam_step(std::span<ad::Tensor> params, AdamState& state, double lr);

ModelSpec model_spec_for(const TrainConfig& cfg, std::size_t input_dim);

/// Fresh model for `cfg`, initialized from `cfg.seed` (heads set from the targets when enabled).
FunctionalModel make_model(const TrainConfig& cfg, std::size_t input_dim, std::span<const double> targets);

/// Trains a deterministic copy of the means with an RMSE loss for `epochs`
/// epochs, then copies the result into the means. The scales are untouched.
void pretrain_functional(FunctionalModel& model, const WindowSet& train, const TrainConfig& cfg,
                         std::size_t epochs);

/// Trains `model` on the train split with early stopping on the valid split
/// and restores the best-validation parameters. Never reads the test split.
TrainHistory train(FunctionalModel& model, const DatasetBundle& data, const TrainConfig& cfg);

/// Validation loss of the objective being trained (deterministic for HNNs,
/// averaged over n_mc_valid common draws otherwise).
double validation_loss(const FunctionalModel& model, const WindowSet& valid, std::size_t n_train,
                       const TrainConfig& cfg);

struct TrainedModel {
  FunctionalModel model;
  TrainHistory history;
  std::uint64_t seed = 0;
};

/// Trains one model of cfg.method from scratch.
TrainedModel train_model(const DatasetBundle& data, const TrainConfig& cfg);

/// Seed of pool member k.
std::uint64_t pool_seed(std::uint64_t base_seed, std::size_t k);

/// Trains k_pool HNNs with distinct seeds. With `threads` > 1 the members
/// train concurrently; results do not depend on the schedule.
std::vector<TrainedModel> train_hnn_pool(const DatasetBundle& data, const TrainConfig& cfg,
                                         std::size_t k_pool, std::size_t threads = 1);

/// Uniform random subset of `k_members` pool entries, drawn from `subset_seed`.
Ensemble assemble_ensemble(const std::vector<TrainedModel>& pool, std::size_t k_members,
                           std::uint64_t subset_seed);

/// Pool training followed by assembly. Throws ConfigError if k_members > k_pool.
Ensemble train_ensemble(std::size_t k_pool, std::size_t k_members, const DatasetBundle& data,
                        const TrainConfig& cfg, std::uint64_t subset_seed, std::size_t threads = 1);

struct SweepTrial {
  TrainConfig config;
  double best_valid = 0.0;
};

/// Seeded random search over learning rate, batch size and the method's
/// scale hyperparameters; trials come back sorted by validation loss.
std::vector<SweepTrial> random_sweep(const DatasetBundle& data, const TrainConfig& base,
                                     std::size_t trials, std::uint64_t seed);

}  // namespace ruq
