#pragma once

// Batch entry point: generate, train, predict, evaluate and compare.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ruq/data.hpp"
#include "ruq/metrics.hpp"
#include "ruq/model.hpp"
#include "ruq/trainer.hpp"

namespace ruq::cli {

enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfigFailure = 2,
  kDataFailure = 3,
  kNumericFailure = 4,
  kIoFailure = 5,
};

struct EnsembleSettings {
  std::size_t pool = 10;
  std::size_t members = 5;
  std::size_t threads = 1;
};

struct EvaluateSection {
  std::size_t mc_samples = 100;
  Split split = Split::test;
  std::optional<std::uint64_t> seed;
  EvaluationSettings settings;
  bool svg = false;
};

/// Parsed configuration file. Sections are optional; unknown keys are rejected.
struct RunConfig {
  std::optional<ScenarioConfig> scenario;
  std::optional<std::uint64_t> scenario_seed;
  nlohmann::json train = nlohmann::json::object();  // validated on resolve
  EnsembleSettings ensemble;
  EvaluateSection evaluate;
  std::vector<std::filesystem::path> compare_reports;
};

/// Throws ConfigError on a malformed document, naming the offending key.
RunConfig parse_run_config(const nlohmann::json& doc);
/// Throws IoError if the file cannot be read, ConfigError if it is not valid JSON.
RunConfig load_run_config(const std::filesystem::path& path);

/// Method defaults, then the common and per-method keys of the train section,
/// then the flags (flag > config > default). An epoch budget rescales the
/// default patience unless patience is given explicitly.
TrainConfig resolve_train_config(const RunConfig& rc, Method method, std::optional<std::uint64_t> seed,
                                 std::optional<std::size_t> epochs);

/// Runs the command line; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ruq::cli
