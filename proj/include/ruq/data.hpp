#pragma once

// Synthetic run-to-failure data: unit simulation, RUL labels, sliding
// windows, standardization, splits, and the on-disk dataset bundle.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ruq/autodiff.hpp"
#include "ruq/rng.hpp"

namespace ruq {

enum class Split { train, valid, test };

const char* split_name(Split s);
Split parse_split(const std::string& name);

/// Sliding-window samples in struct-of-arrays form. Row i of `features` holds
/// channel-major values: feature d * L + l is channel d at window step l.
struct WindowSet {
  std::size_t channels = 0;
  std::size_t window_length = 0;
  std::vector<double> features;
  std::vector<double> rul;
  std::vector<std::int64_t> unit_id;
  std::vector<std::int64_t> cycle;
  std::vector<double> lifetime_fraction;

  std::size_t size() const { return rul.size(); }
  std::size_t feature_dim() const { return channels * window_length; }
  bool empty() const { return rul.empty(); }

  /// Appends row `i` of `other` (same schema).
  void push_row(const WindowSet& other, std::size_t i);
  WindowSet subset(const std::vector<std::size_t>& rows) const;
  void append(const WindowSet& other);

  ad::Tensor x() const;  // [n, feature_dim]
  ad::Tensor y() const;  // [n, 1]
  ad::Tensor x_rows(const std::vector<std::size_t>& rows) const;
  ad::Tensor y_rows(const std::vector<std::size_t>& rows) const;

  bool operator==(const WindowSet&) const = default;
};

struct UnitSpec {
  std::int64_t unit_id = 0;
  int dataset_id = 1;
  int flight_class = 1;  // 1 short, 2 medium, 3 long haul
  double a = 1.0;        // degradation amplitude
  double b = 0.01;       // degradation rate
  std::int64_t h_s = 10; // fault-onset cycle
  std::int64_t total_cycles = 0;
  bool ood = false;
  Split split = Split::train;

  bool operator==(const UnitSpec&) const = default;
};

/// Generator settings. Envelopes bound the in-distribution degradation parameters.
struct ScenarioConfig {
  std::size_t dev_units = 12;
  std::size_t test_units = 6;
  std::size_t ood_units = 2;
  std::size_t datasets = 3;
  std::array<double, 3> flight_class_ratios = {0.10, 0.27, 0.62};
  std::array<double, 3> test_flight_class_ratios = {0.17, 0.34, 0.49};
  double a_min = 0.98, a_max = 1.02;
  double b_min = 0.0078, b_max = 0.0082;
  double ood_b_factor = 1.5;
  std::int64_t h_s_min = 10, h_s_max = 30;
  std::int64_t max_cycles = 2000;
  double sigma0 = 0.2;
  double noise_growth = 8.0;
  std::size_t steps_per_cycle = 100;  // raw steps before decimation
  std::size_t decimation = 10;
  std::size_t window_length = 30;
  std::size_t stride = 1;
  double valid_ratio = 0.1;
  std::size_t scenario_channels = 4;  // operating-condition descriptors W
  std::size_t sensor_channels = 14;   // measured sensors X_s

  std::size_t channels() const { return scenario_channels + sensor_channels; }
  /// Throws ConfigError naming the offending field.
  void validate() const;

  bool operator==(const ScenarioConfig&) const = default;
};

nlohmann::json to_json(const ScenarioConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
ScenarioConfig scenario_from_json(const nlohmann::json& j);

/// Fixed seeded sensor map X_s = tanh(A w + B_dataset theta + c) plus noise.
struct SensorModel {
  std::size_t scenario_channels = 4;
  std::size_t sensor_channels = 14;
  std::vector<double> A;                 // sensor_channels x scenario_channels
  std::vector<double> c;                 // sensor_channels
  std::vector<std::vector<double>> B;    // per dataset, sensor_channels
  double sigma0 = 0.2;
  double noise_growth = 8.0;

  static SensorModel create(const ScenarioConfig& cfg, std::uint64_t seed);
  /// Noise scale at `cycle`; zero growth before onset.
  double sigma_noise(const UnitSpec& unit, std::int64_t cycle) const;
};

/// Per raw step series of one unit; `steps_per_cycle` consecutive rows form a cycle.
struct UnitSeries {
  std::size_t steps_per_cycle = 0;
  std::size_t channels = 0;
  std::vector<double> values;          // steps x channels, W then X_s
  std::vector<double> theta;           // per step
  std::vector<double> sigma_noise;     // per cycle
  std::int64_t end_of_life = 0;        // T_end, cycle at which health crosses the threshold

  std::size_t steps() const { return theta.size(); }
};

/// End-of-life cycle of the exponential degradation law, or -1 if the
/// threshold is never crossed.
std::int64_t end_of_life_cycle(double a, double b, std::int64_t h_s);

/// Simulates cycles 0..T_end. Throws DataError if the health threshold is not
/// crossed within max_cycles.
UnitSeries simulate_unit(const UnitSpec& unit, const SensorModel& sm, std::size_t steps_per_cycle,
                         std::int64_t max_cycles, Rng& rng);

/// RUL per cycle 0..T_end: T_end - max(t, h_s).
std::vector<double> rul_labels(std::int64_t end_of_life, std::int64_t h_s);

/// Decimates by `decimation`, then emits windows of length L every `stride`
/// steps, each labeled by the RUL at its final step.
WindowSet make_windows(const UnitSeries& series, const UnitSpec& unit, std::size_t L,
                       std::size_t stride, std::size_t decimation);

struct StandardizationStats {
  std::vector<double> mean;  // per channel
  std::vector<double> std;   // per channel
  std::string source = "train";

  bool operator==(const StandardizationStats&) const = default;
};

/// Per-channel mean and (population) standard deviation pooled over all window positions.
StandardizationStats compute_stats(const WindowSet& windows);
/// (x - mean) / std per channel. Throws DataError for a channel with std <= 1e-12.
void standardize(WindowSet& windows, const StandardizationStats& stats);

/// Seeded uniform window-level split; round(ratio * n) rows go to the first part.
std::pair<WindowSet, WindowSet> split_dev(const WindowSet& windows, double ratio, std::uint64_t seed);

/// Largest-remainder allocation of `n` items over the given ratios.
std::vector<std::size_t> allocate_counts(const std::vector<double>& ratios, std::size_t n);

struct NoiseTruth {
  std::vector<std::int64_t> unit_id;
  std::vector<std::int64_t> cycle;
  std::vector<double> sigma_noise;

  bool operator==(const NoiseTruth&) const = default;
};

inline constexpr int kDatasetFormatVersion = 1;

/// Train/valid/test windows plus provenance. Split reads are counted so a
/// caller can prove which splits a procedure touched.
class DatasetBundle {
 public:
  DatasetBundle() = default;
  DatasetBundle(const DatasetBundle& other);
  DatasetBundle& operator=(const DatasetBundle& other);

  std::uint64_t seed = 0;
  ScenarioConfig config;
  std::vector<UnitSpec> units;
  StandardizationStats stats;
  NoiseTruth noise_truth;
  bool standardized = true;

  const WindowSet& split(Split s) const;
  WindowSet& mutable_split(Split s);
  std::size_t access_count(Split s) const;
  void reset_access_log() const;

  const UnitSpec& unit(std::int64_t id) const;
  std::size_t channels() const { return split_data(Split::train).channels; }
  std::size_t window_length() const { return split_data(Split::train).window_length; }

  /// Manifest document and its hash.
  nlohmann::json manifest() const;
  std::string fingerprint() const;

  /// Deep comparison of contents (the access log is ignored).
  bool same_contents(const DatasetBundle& other) const;

 private:
  const WindowSet& split_data(Split s) const { return splits_[static_cast<int>(s)]; }
  std::array<WindowSet, 3> splits_;
  mutable std::array<std::atomic<std::size_t>, 3> access_{};
};

DatasetBundle generate_scenario(const ScenarioConfig& cfg, std::uint64_t seed);

/// Writes manifest.json, train.csv, valid.csv, test.csv, stats.csv and noise_truth.csv.
void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_dataset(const std::filesystem::path& dir);

/// Rounds to 9 significant digits, the precision of the window files.
double quantize9(double x);

/// Wraps plain arrays as a bundle (external or toy data). Units are
/// synthesized from distinct unit ids; no standardization is applied.
DatasetBundle bundle_from_windows(WindowSet train, WindowSet valid, WindowSet test);

}  // namespace ruq
