#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ruq/data.hpp"
#include "ruq/error.hpp"

namespace ruq {
namespace {

namespace fs = std::filesystem;

ScenarioConfig small_config() {
  ScenarioConfig c;
  c.dev_units = 4;
  c.test_units = 3;
  c.ood_units = 1;
  c.steps_per_cycle = 20;
  c.decimation = 5;
  c.window_length = 10;
  return c;
}

UnitSpec unit_spec(double a, double b, std::int64_t h_s) {
  UnitSpec u;
  u.unit_id = 7;
  u.a = a;
  u.b = b;
  u.h_s = h_s;
  u.total_cycles = end_of_life_cycle(a, b, h_s);
  return u;
}

UnitSeries ramp_series(std::size_t steps, std::size_t channels) {
  UnitSeries s;
  s.steps_per_cycle = 1;
  s.channels = channels;
  s.end_of_life = static_cast<std::int64_t>(steps) - 1;
  s.theta.assign(steps, 0.0);
  s.sigma_noise.assign(steps, 0.1);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t d = 0; d < channels; ++d) s.values.push_back(static_cast<double>(t) + 1000.0 * d);
  }
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ruq_data_" + name);
  fs::remove_all(p);
  return p;
}

TEST(EndOfLife, CrossesThresholdExactlyOnce) {
  for (double a : {0.5, 1.0, 2.0}) {
    for (double b : {0.005, 0.01, 0.05}) {
      const std::int64_t h = 12;
      const std::int64_t t = end_of_life_cycle(a, b, h);
      ASSERT_GT(t, h);
      EXPECT_LE(-a * std::expm1(b * static_cast<double>(t - h)), -1.0);
      EXPECT_GT(-a * std::expm1(b * static_cast<double>(t - 1 - h)), -1.0);
    }
  }
}

TEST(SimulateUnit, ZeroAmplitudeNeverFails) {
  const ScenarioConfig cfg;
  const SensorModel sm = SensorModel::create(cfg, 1);
  UnitSpec u = unit_spec(1.0, 0.01, 10);
  u.a = 0.0;
  EXPECT_EQ(end_of_life_cycle(0.0, 0.01, 10), -1);
  Rng rng(3);
  EXPECT_THROW(simulate_unit(u, sm, 10, 2000, rng), DataError);
}

TEST(SimulateUnit, ThresholdBeyondMaxCyclesIsError) {
  const SensorModel sm = SensorModel::create(ScenarioConfig{}, 1);
  const UnitSpec u = unit_spec(1.0, 0.001, 10);
  Rng rng(3);
  EXPECT_THROW(simulate_unit(u, sm, 10, 100, rng), DataError);
}

TEST(SimulateUnit, NoiseFreeSensorsAreFunctionOfDescriptorsAndHealth) {
  ScenarioConfig cfg;
  cfg.sigma0 = 0.0;
  const SensorModel sm = SensorModel::create(cfg, 5);
  const UnitSpec u = unit_spec(1.0, 0.02, 10);
  Rng rng(9);
  const UnitSeries s = simulate_unit(u, sm, 10, 2000, rng);
  const std::size_t ws = cfg.scenario_channels;
  for (std::size_t step = 0; step < s.steps(); ++step) {
    const double* row = s.values.data() + step * s.channels;
    for (std::size_t j = 0; j < cfg.sensor_channels; ++j) {
      double z = sm.c[j] + sm.B[0][j] * s.theta[step];
      for (std::size_t i = 0; i < ws; ++i) z += sm.A[j * ws + i] * row[i];
      ASSERT_EQ(row[ws + j], std::tanh(z));
    }
  }
}

TEST(SimulateUnit, SameSeedIsBitIdentical) {
  const SensorModel sm = SensorModel::create(ScenarioConfig{}, 5);
  const UnitSpec u = unit_spec(1.0, 0.02, 10);
  Rng r1(11), r2(11), r3(12);
  const UnitSeries a = simulate_unit(u, sm, 10, 2000, r1);
  const UnitSeries b = simulate_unit(u, sm, 10, 2000, r2);
  const UnitSeries c = simulate_unit(u, sm, 10, 2000, r3);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_NE(a.values, c.values);
}

TEST(SimulateUnit, HealthIsFlatThenMonotoneDegrading) {
  const SensorModel sm = SensorModel::create(ScenarioConfig{}, 5);
  const UnitSpec u = unit_spec(1.0, 0.02, 15);
  Rng rng(2);
  const UnitSeries s = simulate_unit(u, sm, 10, 2000, rng);
  const std::size_t onset = 15 * 10;
  for (std::size_t i = 0; i < onset; ++i) EXPECT_LT(std::abs(s.theta[i]), 0.02);
  for (std::size_t i = onset + 1; i < s.steps(); ++i) ASSERT_LT(s.theta[i], s.theta[i - 1]);
  EXPECT_LE(s.theta.back(), -1.0 + 0.05);
  EXPECT_EQ(s.end_of_life, u.total_cycles);
}

TEST(SimulateUnit, NoiseScaleIsPositiveAndNonDecreasingAfterOnset) {
  const SensorModel sm = SensorModel::create(ScenarioConfig{}, 5);
  const UnitSpec u = unit_spec(1.0, 0.02, 15);
  Rng rng(2);
  const UnitSeries s = simulate_unit(u, sm, 10, 2000, rng);
  for (double v : s.sigma_noise) EXPECT_GT(v, 0.0);
  for (std::size_t c = 0; c <= 15; ++c) EXPECT_EQ(s.sigma_noise[c], s.sigma_noise[0]);
  for (std::size_t c = 16; c < s.sigma_noise.size(); ++c) EXPECT_GE(s.sigma_noise[c], s.sigma_noise[c - 1]);
  EXPECT_DOUBLE_EQ(s.sigma_noise.back(), sm.sigma0 * (1.0 + sm.noise_growth));
}

TEST(RulLabels, EndpointPlateauAndContinuity) {
  const auto rul = rul_labels(100, 20);
  ASSERT_EQ(rul.size(), 101u);
  EXPECT_EQ(rul[100], 0.0);
  EXPECT_EQ(rul[0], rul[20]);
  EXPECT_EQ(rul[20], 100.0 - 20.0);
  for (std::size_t t = 21; t <= 100; ++t) EXPECT_EQ(rul[t], 100.0 - static_cast<double>(t));
}

TEST(RulLabels, PiecewiseLinearWithSingleBreakpoint) {
  const auto rul = rul_labels(57, 9);
  std::size_t breaks = 0;
  for (std::size_t t = 1; t < rul.size(); ++t) {
    EXPECT_LE(rul[t], rul[t - 1]);
    if (t + 1 < rul.size()) {
      const double d1 = rul[t] - rul[t - 1], d2 = rul[t + 1] - rul[t];
      if (d1 != d2) ++breaks;
    }
  }
  EXPECT_EQ(breaks, 1u);
  EXPECT_THROW(rul_labels(10, 11), DataError);
}

TEST(MakeWindows, OneWindowPerStepForUnitLength) {
  const UnitSeries s = ramp_series(40, 2);
  UnitSpec u;
  u.h_s = 5;
  const WindowSet w = make_windows(s, u, 1, 1, 1);
  EXPECT_EQ(w.size(), 40u);
}

TEST(MakeWindows, CountFormulaAndLayout) {
  const UnitSeries s = ramp_series(100, 3);
  UnitSpec u;
  u.unit_id = 4;
  u.h_s = 10;
  const WindowSet w = make_windows(s, u, 30, 1, 1);
  ASSERT_EQ(w.size(), 71u);
  EXPECT_EQ(w.feature_dim(), 90u);
  // Window k covers steps k..k+29; channel-major layout.
  for (std::size_t k : {0u, 17u, 70u}) {
    for (std::size_t d = 0; d < 3; ++d) {
      for (std::size_t l = 0; l < 30; ++l) {
        ASSERT_EQ(w.features[k * 90 + d * 30 + l], static_cast<double>(k + l) + 1000.0 * d);
      }
    }
    EXPECT_EQ(w.cycle[k], static_cast<std::int64_t>(k + 29));
  }
  EXPECT_EQ(w.rul.back(), 0.0);
  EXPECT_EQ(make_windows(s, u, 30, 7, 1).size(), 11u);
}

TEST(MakeWindows, DecimationKeepsEveryKthStep) {
  UnitSeries s = ramp_series(100, 1);
  s.steps_per_cycle = 10;
  s.end_of_life = 9;
  s.sigma_noise.assign(10, 0.1);
  UnitSpec u;
  u.h_s = 2;
  const WindowSet w = make_windows(s, u, 3, 1, 10);
  ASSERT_EQ(w.size(), 8u);
  EXPECT_EQ(w.features[0], 0.0);
  EXPECT_EQ(w.features[1], 10.0);
  EXPECT_EQ(w.features[2], 20.0);
  EXPECT_EQ(w.cycle[0], 2);
  EXPECT_EQ(w.cycle.back(), 9);
  EXPECT_DOUBLE_EQ(w.lifetime_fraction.back(), 1.0);
  for (std::size_t i = 1; i < w.size(); ++i) EXPECT_GT(w.lifetime_fraction[i], w.lifetime_fraction[i - 1]);
}

TEST(MakeWindows, TooShortNamesUnit) {
  const UnitSeries s = ramp_series(20, 1);
  UnitSpec u;
  u.unit_id = 42;
  u.h_s = 2;
  try {
    make_windows(s, u, 30, 1, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unit 42"), std::string::npos);
  }
}

TEST(Standardize, TrainSplitHasUnitMoments) {
  const DatasetBundle b = generate_scenario(small_config(), 3);
  WindowSet train = b.split(Split::train);
  // Undo the stored standardization to recover raw values, then redo it.
  const std::size_t D = train.channels, L = train.window_length;
  for (std::size_t r = 0; r < train.size(); ++r) {
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t l = 0; l < L; ++l) {
        double& v = train.features[r * D * L + d * L + l];
        v = v * b.stats.std[d] + b.stats.mean[d];
      }
    }
  }
  const StandardizationStats st = compute_stats(train);
  standardize(train, st);
  const StandardizationStats after = compute_stats(train);
  for (std::size_t d = 0; d < D; ++d) {
    EXPECT_LT(std::abs(after.mean[d]), 1e-10);
    EXPECT_NEAR(after.std[d], 1.0, 1e-10);
  }
}

TEST(Standardize, IsAffineWithRecordedStats) {
  const UnitSeries s = ramp_series(60, 2);
  UnitSpec u;
  u.h_s = 3;
  const WindowSet raw = make_windows(s, u, 5, 1, 1);
  WindowSet once = raw;
  const StandardizationStats st = compute_stats(once);
  standardize(once, st);
  for (std::size_t r = 0; r < raw.size(); ++r) {
    for (std::size_t d = 0; d < 2; ++d) {
      for (std::size_t l = 0; l < 5; ++l) {
        const std::size_t i = r * 10 + d * 5 + l;
        ASSERT_DOUBLE_EQ(once.features[i], (raw.features[i] - st.mean[d]) / st.std[d]);
      }
    }
  }
  WindowSet twice = once;
  const StandardizationStats st2 = compute_stats(twice);
  standardize(twice, st2);
  EXPECT_NEAR(st2.mean[0], 0.0, 1e-10);
  EXPECT_NEAR(st2.std[0], 1.0, 1e-10);
  EXPECT_EQ(once.rul, raw.rul);
}

TEST(Standardize, ConstantChannelIsRejected) {
  UnitSeries s = ramp_series(40, 2);
  for (std::size_t t = 0; t < 40; ++t) s.values[t * 2 + 1] = 3.0;
  UnitSpec u;
  u.h_s = 3;
  WindowSet w = make_windows(s, u, 5, 1, 1);
  const StandardizationStats st = compute_stats(w);
  EXPECT_THROW(standardize(w, st), DataError);
}

TEST(SplitDev, CountsDisjointAndSeeded) {
  WindowSet w;
  w.channels = 1;
  w.window_length = 1;
  for (int i = 0; i < 1000; ++i) {
    w.features.push_back(i);
    w.rul.push_back(i);
    w.unit_id.push_back(1);
    w.cycle.push_back(i);
    w.lifetime_fraction.push_back(0.0);
  }
  const auto [a, b] = split_dev(w, 0.9, 17);
  EXPECT_EQ(a.size(), 900u);
  EXPECT_EQ(b.size(), 100u);
  std::set<double> sa(a.features.begin(), a.features.end());
  for (double v : b.features) EXPECT_FALSE(sa.count(v));
  EXPECT_EQ(sa.size() + b.size(), 1000u);
  const auto [a2, b2] = split_dev(w, 0.9, 17);
  EXPECT_EQ(a, a2);
  EXPECT_EQ(b, b2);
  const auto [a3, b3] = split_dev(w, 0.9, 18);
  EXPECT_NE(a.features, a3.features);
  EXPECT_THROW(split_dev(w, 1.0, 1), ConfigError);
  EXPECT_THROW(split_dev(w, 0.0001, 1), DataError);
}

TEST(AllocateCounts, LargestRemainder) {
  EXPECT_EQ(allocate_counts({0.10, 0.27, 0.62}, 100), (std::vector<std::size_t>{10, 27, 63}));
  EXPECT_EQ(allocate_counts({1, 1, 1}, 4), (std::vector<std::size_t>{2, 1, 1}));
  const auto c = allocate_counts({0.10, 0.27, 0.62}, 12);
  EXPECT_EQ(c[0] + c[1] + c[2], 12u);
  EXPECT_EQ(c, (std::vector<std::size_t>{1, 3, 8}));
}

TEST(GenerateScenario, FlightClassImbalanceFollowsRatios) {
  ScenarioConfig cfg = small_config();
  cfg.dev_units = 100;
  cfg.sigma0 = 0.1;
  cfg.test_units = 1;
  cfg.ood_units = 0;
  const DatasetBundle b = generate_scenario(cfg, 1);
  std::array<int, 3> count{};
  for (const auto& u : b.units) {
    if (u.split == Split::train) ++count[u.flight_class - 1];
  }
  EXPECT_EQ(count[0], 10);
  EXPECT_EQ(count[1], 27);
  EXPECT_EQ(count[2], 63);
}

TEST(GenerateScenario, OodUnitsLeaveTheEnvelope) {
  const ScenarioConfig cfg = small_config();
  const DatasetBundle b = generate_scenario(cfg, 4);
  double max_b = 0.0;
  int ood = 0;
  for (const auto& u : b.units) {
    if (!u.ood) {
      EXPECT_GE(u.b, cfg.b_min);
      EXPECT_LE(u.b, cfg.b_max);
      EXPECT_GE(u.a, cfg.a_min);
      EXPECT_LE(u.a, cfg.a_max);
      if (u.split != Split::test) max_b = std::max(max_b, u.b);
    } else {
      ++ood;
      EXPECT_EQ(u.split, Split::test);
    }
    EXPECT_GT(u.h_s, 0);
    EXPECT_LT(u.h_s, u.total_cycles);
  }
  EXPECT_EQ(ood, 1);
  for (const auto& m : b.manifest().at("units")) {
    if (m.at("ood_flag").get<bool>()) EXPECT_GT(m.at("b").get<double>(), max_b);
  }
}

TEST(GenerateScenario, ZeroOodKeepsAllTestUnitsInEnvelope) {
  ScenarioConfig cfg = small_config();
  cfg.ood_units = 0;
  const DatasetBundle b = generate_scenario(cfg, 4);
  for (const auto& u : b.units) {
    EXPECT_FALSE(u.ood);
    EXPECT_LE(u.b, cfg.b_max);
  }
}

TEST(GenerateScenario, InconsistentConfigIsRejected) {
  ScenarioConfig cfg = small_config();
  cfg.ood_units = 5;
  EXPECT_THROW(generate_scenario(cfg, 1), ConfigError);
  cfg = small_config();
  cfg.valid_ratio = 1.5;
  EXPECT_THROW(generate_scenario(cfg, 1), ConfigError);
  EXPECT_THROW(scenario_from_json(nlohmann::json{{"dev_unitz", 3}}), ConfigError);
}

TEST(GenerateScenario, PureFunctionOfConfigAndSeed) {
  const DatasetBundle a = generate_scenario(small_config(), 8);
  const DatasetBundle b = generate_scenario(small_config(), 8);
  const DatasetBundle c = generate_scenario(small_config(), 9);
  EXPECT_TRUE(a.same_contents(b));
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_FALSE(a.same_contents(c));
  EXPECT_NE(a.fingerprint(), c.fingerprint());
}

TEST(GenerateScenario, TestUnitsNeverEnterDevelopmentSplits) {
  const DatasetBundle b = generate_scenario(small_config(), 2);
  for (Split s : {Split::train, Split::valid}) {
    for (auto id : b.split(s).unit_id) EXPECT_NE(b.unit(id).split, Split::test);
  }
  for (auto id : b.split(Split::test).unit_id) EXPECT_EQ(b.unit(id).split, Split::test);
  EXPECT_EQ(b.stats.source, "train");
  for (double r : b.split(Split::test).rul) EXPECT_GE(r, 0.0);
}

TEST(GenerateScenario, StatsComeFromTrainOnly) {
  const DatasetBundle b = generate_scenario(small_config(), 2);
  WindowSet pooled = b.split(Split::train);
  const StandardizationStats on_train = compute_stats(pooled);
  pooled.append(b.split(Split::test));
  const StandardizationStats on_pool = compute_stats(pooled);
  // Stored train split is standardized by its own stats, so its moments are (0, 1) up to quantization.
  for (std::size_t d = 0; d < on_train.mean.size(); ++d) {
    EXPECT_NEAR(on_train.mean[d], 0.0, 1e-6);
    EXPECT_NEAR(on_train.std[d], 1.0, 1e-6);
  }
  bool differs = false;
  for (std::size_t d = 0; d < on_pool.mean.size(); ++d) differs |= std::abs(on_pool.mean[d]) > 1e-3;
  EXPECT_TRUE(differs);
}

TEST(GenerateScenario, AccessLogCountsSplitReads) {
  const DatasetBundle b = generate_scenario(small_config(), 2);
  b.reset_access_log();
  (void)b.split(Split::train);
  (void)b.split(Split::train);
  EXPECT_EQ(b.access_count(Split::train), 2u);
  EXPECT_EQ(b.access_count(Split::test), 0u);
  const DatasetBundle copy = b;
  EXPECT_EQ(copy.access_count(Split::train), 0u);
}

TEST(DatasetFiles, RoundTripIsBitExact) {
  const DatasetBundle b = generate_scenario(small_config(), 6);
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(b, dir);
  const DatasetBundle c = load_dataset(dir);
  EXPECT_TRUE(b.same_contents(c));
  EXPECT_EQ(b.fingerprint(), c.fingerprint());
  std::ifstream in(dir / "train.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header.rfind("unit_id,cycle,lifetime_fraction,f_000,f_001,", 0), 0u);
  EXPECT_NE(header.find(",f_179,rul"), std::string::npos);
  fs::remove_all(dir);
}

TEST(DatasetFiles, QuantizationIsIdempotent) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal() * std::pow(10.0, rng.normal() * 3);
    const double q = quantize9(x);
    EXPECT_EQ(quantize9(q), q);
    EXPECT_NEAR(q, x, std::abs(x) * 1e-8);
  }
}

TEST(DatasetFiles, WindowOfUnknownUnitFailsToLoad) {
  DatasetBundle b = generate_scenario(small_config(), 6);
  b.units.erase(b.units.begin());
  const fs::path dir = temp_dir("missing_unit");
  save_dataset(b, dir);
  try {
    load_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unit 1 is missing"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(DatasetFiles, TruncatedWindowsFileReportsRow) {
  const DatasetBundle b = generate_scenario(small_config(), 6);
  const fs::path dir = temp_dir("truncated");
  save_dataset(b, dir);
  const auto size = fs::file_size(dir / "valid.csv");
  fs::resize_file(dir / "valid.csv", size - 40);
  try {
    load_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string row = "valid.csv row " + std::to_string(b.split(Split::valid).size());
    EXPECT_NE(std::string(e.what()).find(row), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(DatasetFiles, WrongFormatVersionIsRejected) {
  const DatasetBundle b = generate_scenario(small_config(), 6);
  const fs::path dir = temp_dir("version");
  save_dataset(b, dir);
  nlohmann::json m = b.manifest();
  m["format_version"] = 99;
  std::ofstream(dir / "manifest.json") << m.dump();
  EXPECT_THROW(load_dataset(dir), DataError);
  EXPECT_THROW(load_dataset(dir / "nope"), IoError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace ruq
