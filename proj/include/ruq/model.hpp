#pragma once

// Multilayer perceptron with a shared ReLU trunk and two scalar heads:
// the mean head emits mu, the scale head emits rho_out, and the predicted
// variance is softplus(rho_out)^2.

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "ruq/autodiff.hpp"
#include "ruq/layers.hpp"
#include "ruq/rng.hpp"

namespace ruq {

enum class Method { hnn, mcd, de, bnn_naive, bnn_lrt, bnn_fo, bnn_rad };

const char* method_tag(Method m);
/// Throws ConfigError listing the valid tags.
Method parse_method(const std::string& tag);
const std::vector<Method>& all_methods();
bool is_bnn(Method m);
Sampler sampler_for(Method m);

enum class ModelKind { deterministic, dropout, variational };

const char* kind_name(ModelKind k);

struct ModelSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  ModelKind kind = ModelKind::deterministic;
  double dropout_p = 0.0;
  Sampler sampler = Sampler::lrt;
  double prior_scale = 1.0;
  double q_scale = 1e-3;
  /// Fixed output affine map: mu = shift + scale * head, sd = scale * softplus(rho_out).
  double target_shift = 0.0;
  double target_scale = 1.0;

  bool operator==(const ModelSpec&) const = default;
};

using LayerNoise = std::variant<std::monostate, WeightNoise, LocalNoise, FlipoutNoise, RadialNoise>;

/// Draws for every stochastic layer of one forward pass.
struct NoiseBundle {
  std::vector<LayerNoise> layers;   // variational models: one entry per dense layer
  std::vector<DropoutMask> masks;   // dropout models: one entry per hidden layer
  bool empty() const { return layers.empty() && masks.empty(); }
};

struct ModelOutput {
  ad::Tensor mu;   // [n, 1]
  ad::Tensor var;  // [n, 1], strictly positive
};

class FunctionalModel {
 public:
  FunctionalModel() = default;
  FunctionalModel(ModelSpec spec, Rng& rng);

  // Value semantics: copies own independent parameter buffers.
  FunctionalModel(const FunctionalModel& other);
  FunctionalModel& operator=(const FunctionalModel& other);
  FunctionalModel(FunctionalModel&&) noexcept = default;
  FunctionalModel& operator=(FunctionalModel&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  bool stochastic() const { return spec_.kind != ModelKind::deterministic; }

  /// Dense layers in order: hidden layers, then the mean head, then the scale head.
  std::size_t dense_count() const { return spec_.hidden.size() + 2; }
  std::size_t hidden_count() const { return spec_.hidden.size(); }

  std::vector<LinearLayer>& linear() { return linear_; }
  const std::vector<LinearLayer>& linear() const { return linear_; }
  std::vector<VariationalLinear>& variational() { return variational_; }
  const std::vector<VariationalLinear>& variational() const { return variational_; }
  std::vector<DropoutLayer>& dropouts() { return dropouts_; }
  const std::vector<DropoutLayer>& dropouts() const { return dropouts_; }

  /// Trainable tensors (handles aliasing the model's buffers).
  std::vector<ad::Tensor> parameters() const;
  /// Weight matrices only (the L2 penalty of the dropout objective).
  std::vector<ad::Tensor> weight_matrices() const;

  std::size_t parameter_count() const;

  /// Deterministic copy of this model with every weight at its mean.
  FunctionalModel mean_model() const;
  /// Copies the weights of a deterministic model of matching shape into the means.
  void load_means(const FunctionalModel& deterministic);

  /// Sets every rho of a variational model to `rho`.
  void set_rho(double rho);

  /// Sets the head biases so an untrained model predicts (mean, std) in target units.
  void init_output_heads(double mean, double std);

  bool same_values(const FunctionalModel& other) const;

 private:
  ModelSpec spec_;
  std::vector<LinearLayer> linear_;
  std::vector<VariationalLinear> variational_;
  std::vector<DropoutLayer> dropouts_;
};

/// One stochastic pass. Throws ConfigError if the bundle lacks draws that a
/// stochastic layer needs.
ModelOutput model_forward(const FunctionalModel& model, const ad::Tensor& x,
                          const NoiseBundle& noise = {});

/// Draws a noise bundle for a batch. Shared (per-batch) draws come from
/// `stream`; per-example draws come from a child stream keyed by the row
/// contents, so the draw for an example does not depend on its batch position.
NoiseBundle draw_noise(const FunctionalModel& model, const ad::Tensor& x, const Rng& stream);

/// Deep ensemble of deterministic members.
struct Ensemble {
  std::vector<FunctionalModel> members;
  std::vector<std::uint64_t> member_seeds;
};

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  Method method = Method::hnn;
  std::string dataset_fingerprint;
  std::vector<FunctionalModel> models;  // one model, or the ensemble members
  std::vector<std::uint64_t> seeds;     // training seed of each model
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);

}  // namespace ruq
