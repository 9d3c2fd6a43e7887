#pragma once

// Acceptance criteria, one function per numbered criterion.

#include <filesystem>
#include <map>
#include <ostream>
#include <string>

namespace ruq::acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome gradient_correctness();
Outcome sampler_moments();
Outcome flipout_decorrelation();
Outcome radial_law();
Outcome decomposition_identity();
Outcome kl_correctness();
Outcome metric_oracles();
Outcome heteroscedastic_recovery();
Outcome epistemic_gap();

/// One end-to-end desk benchmark run driven through the command line.
struct DeskRun {
  std::filesystem::path dir;
  bool completed = false;
  std::string failure;
  double seconds = 0.0;
  std::map<std::string, double> confidence_spearman;  // per method tag
  std::map<std::string, double> aleatoric_pearson;
};

DeskRun run_desk_pipeline(const std::filesystem::path& dir, std::ostream& log);

Outcome desk_confidence(const DeskRun& run);
Outcome aleatoric_tracking(const DeskRun& run);
Outcome determinism(const DeskRun& first, const DeskRun& second);

}  // namespace ruq::acceptance
