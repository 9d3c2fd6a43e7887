#include "ruq/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "ruq/error.hpp"

namespace ruq {

using ad::Tensor;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSensorTag = 0x73656e736f72ULL;
constexpr std::uint64_t kUnitTag = 0x756e6974ULL;
constexpr std::uint64_t kSplitTag = 0x73706c6974ULL;
constexpr std::uint64_t kAssignTag = 0x61737369676eULL;
constexpr double kHealthThreshold = -1.0;

std::string format9(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 9);
  return std::string(buf, res.ptr);
}

std::string format_exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

}  // namespace

double quantize9(double x) {
  const std::string s = format9(x);
  double out = 0.0;
  parse_number(std::string_view(s), out);
  return out;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "valid") return Split::valid;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train, valid, test)");
}

// ---- WindowSet ----

void WindowSet::push_row(const WindowSet& other, std::size_t i) {
  const std::size_t f = other.feature_dim();
  features.insert(features.end(), other.features.begin() + i * f, other.features.begin() + (i + 1) * f);
  rul.push_back(other.rul[i]);
  unit_id.push_back(other.unit_id[i]);
  cycle.push_back(other.cycle[i]);
  lifetime_fraction.push_back(other.lifetime_fraction[i]);
}

WindowSet WindowSet::subset(const std::vector<std::size_t>& rows) const {
  WindowSet out;
  out.channels = channels;
  out.window_length = window_length;
  out.features.reserve(rows.size() * feature_dim());
  for (std::size_t r : rows) out.push_row(*this, r);
  return out;
}

void WindowSet::append(const WindowSet& other) {
  if (empty() && features.empty()) {
    channels = other.channels;
    window_length = other.window_length;
  }
  if (other.channels != channels || other.window_length != window_length) {
    throw ShapeError("cannot append windows with a different schema");
  }
  features.insert(features.end(), other.features.begin(), other.features.end());
  rul.insert(rul.end(), other.rul.begin(), other.rul.end());
  unit_id.insert(unit_id.end(), other.unit_id.begin(), other.unit_id.end());
  cycle.insert(cycle.end(), other.cycle.begin(), other.cycle.end());
  lifetime_fraction.insert(lifetime_fraction.end(), other.lifetime_fraction.begin(),
                           other.lifetime_fraction.end());
}

Tensor WindowSet::x() const { return Tensor({size(), feature_dim()}, features); }
Tensor WindowSet::y() const { return Tensor({size(), 1}, rul); }

Tensor WindowSet::x_rows(const std::vector<std::size_t>& rows) const {
  const std::size_t f = feature_dim();
  std::vector<double> v(rows.size() * f);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy_n(features.begin() + rows[k] * f, f, v.begin() + k * f);
  }
  return Tensor({rows.size(), f}, std::move(v));
}

Tensor WindowSet::y_rows(const std::vector<std::size_t>& rows) const {
  std::vector<double> v(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) v[k] = rul[rows[k]];
  return Tensor({rows.size(), 1}, std::move(v));
}

// ---- scenario config ----

void ScenarioConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("scenario." + key + ": " + why);
  };
  if (dev_units < 2) fail("dev_units", "at least 2 development units are required");
  if (test_units < 1) fail("test_units", "at least 1 test unit is required");
  if (ood_units > test_units) fail("ood_units", "cannot exceed test_units");
  if (datasets < 1) fail("datasets", "must be at least 1");
  for (const auto* r : {&flight_class_ratios, &test_flight_class_ratios}) {
    double s = 0.0;
    for (double x : *r) {
      if (!(x >= 0.0)) fail("flight_class_ratios", "ratios must be non-negative");
      s += x;
    }
    if (!(s > 0.0)) fail("flight_class_ratios", "ratios must not all be zero");
  }
  if (!(a_min > 0.0 && a_min <= a_max)) fail("a_min", "envelope must satisfy 0 < a_min <= a_max");
  if (!(b_min > 0.0 && b_min <= b_max)) fail("b_min", "envelope must satisfy 0 < b_min <= b_max");
  if (!(ood_b_factor > 1.0)) fail("ood_b_factor", "must exceed 1 so OOD rates leave the envelope");
  if (!(h_s_min >= 1 && h_s_min < h_s_max)) fail("h_s_min", "need 1 <= h_s_min < h_s_max");
  if (max_cycles <= h_s_max) fail("max_cycles", "must exceed h_s_max");
  if (!(sigma0 >= 0.0)) fail("sigma0", "must be non-negative");
  if (!(noise_growth >= 0.0)) fail("noise_growth", "must be non-negative");
  if (steps_per_cycle < 1) fail("steps_per_cycle", "must be at least 1");
  if (decimation < 1) fail("decimation", "must be at least 1");
  if (window_length < 1) fail("window_length", "must be at least 1");
  if (stride < 1) fail("stride", "must be at least 1");
  if (!(valid_ratio > 0.0 && valid_ratio < 1.0)) fail("valid_ratio", "must lie in (0, 1)");
  if (scenario_channels != 4) fail("scenario_channels", "the flight profile defines exactly 4 descriptors");
  if (sensor_channels < 1) fail("sensor_channels", "must be at least 1");
}

json to_json(const ScenarioConfig& c) {
  return {{"dev_units", c.dev_units},
          {"test_units", c.test_units},
          {"ood_units", c.ood_units},
          {"datasets", c.datasets},
          {"flight_class_ratios", c.flight_class_ratios},
          {"test_flight_class_ratios", c.test_flight_class_ratios},
          {"a_min", c.a_min},
          {"a_max", c.a_max},
          {"b_min", c.b_min},
          {"b_max", c.b_max},
          {"ood_b_factor", c.ood_b_factor},
          {"h_s_min", c.h_s_min},
          {"h_s_max", c.h_s_max},
          {"max_cycles", c.max_cycles},
          {"sigma0", c.sigma0},
          {"noise_growth", c.noise_growth},
          {"steps_per_cycle", c.steps_per_cycle},
          {"decimation", c.decimation},
          {"window_length", c.window_length},
          {"stride", c.stride},
          {"valid_ratio", c.valid_ratio},
          {"scenario_channels", c.scenario_channels},
          {"sensor_channels", c.sensor_channels}};
}

ScenarioConfig scenario_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("scenario section must be an object");
  ScenarioConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("scenario: unknown key '" + key + "'");
    (void)value;
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(std::string("scenario.") + key + ": wrong type");
    }
  };
  get("dev_units", c.dev_units);
  get("test_units", c.test_units);
  get("ood_units", c.ood_units);
  get("datasets", c.datasets);
  get("flight_class_ratios", c.flight_class_ratios);
  get("test_flight_class_ratios", c.test_flight_class_ratios);
  get("a_min", c.a_min);
  get("a_max", c.a_max);
  get("b_min", c.b_min);
  get("b_max", c.b_max);
  get("ood_b_factor", c.ood_b_factor);
  get("h_s_min", c.h_s_min);
  get("h_s_max", c.h_s_max);
  get("max_cycles", c.max_cycles);
  get("sigma0", c.sigma0);
  get("noise_growth", c.noise_growth);
  get("steps_per_cycle", c.steps_per_cycle);
  get("decimation", c.decimation);
  get("window_length", c.window_length);
  get("stride", c.stride);
  get("valid_ratio", c.valid_ratio);
  get("scenario_channels", c.scenario_channels);
  get("sensor_channels", c.sensor_channels);
  return c;
}

// ---- simulation ----

SensorModel SensorModel::create(const ScenarioConfig& cfg, std::uint64_t seed) {
  SensorModel sm;
  sm.scenario_channels = cfg.scenario_channels;
  sm.sensor_channels = cfg.sensor_channels;
  sm.sigma0 = cfg.sigma0;
  sm.noise_growth = cfg.noise_growth;
  Rng rng = Rng(seed).split(kSensorTag);
  sm.A.resize(sm.sensor_channels * sm.scenario_channels);
  for (double& v : sm.A) v = 0.5 * rng.normal();
  sm.c.resize(sm.sensor_channels);
  for (double& v : sm.c) v = 0.3 * rng.normal();
  // Datasets share a degradation signature up to a per-dataset perturbation.
  std::vector<double> base(sm.sensor_channels);
  for (double& v : base) v = rng.sign() * (0.5 + rng.uniform());
  sm.B.resize(cfg.datasets);
  for (auto& b : sm.B) {
    b = base;
    for (double& v : b) v += 0.25 * rng.normal();
  }
  return sm;
}

double SensorModel::sigma_noise(const UnitSpec& unit, std::int64_t cycle) const {
  const double span = static_cast<double>(unit.total_cycles - unit.h_s);
  const double progress = std::max<double>(0.0, static_cast<double>(cycle - unit.h_s)) / span;
  return sigma0 * (1.0 + noise_growth * std::min(progress, 1.0));
}

std::int64_t end_of_life_cycle(double a, double b, std::int64_t h_s) {
  if (!(a > 0.0) || !(b > 0.0)) return -1;
  auto theta = [&](double t) { return -a * std::expm1(b * (t - static_cast<double>(h_s))); };
  const double exact = static_cast<double>(h_s) + std::log1p(1.0 / a) / b;
  if (!std::isfinite(exact) || exact > 1e12) return -1;
  auto t = static_cast<std::int64_t>(std::ceil(exact));
  while (theta(static_cast<double>(t)) > kHealthThreshold) ++t;
  while (t - 1 > h_s && theta(static_cast<double>(t - 1)) <= kHealthThreshold) --t;
  return t;
}

namespace {

struct FlightProfile {
  double climb;     // fraction of the flight spent climbing
  double descent;   // fraction spent descending
  double altitude;  // cruise altitude (normalized)
};

FlightProfile profile_for(int flight_class) {
  switch (flight_class) {
    case 1: return {0.3, 0.3, 0.5};
    case 2: return {0.2, 0.2, 0.75};
    default: return {0.1, 0.1, 1.0};
  }
}

// Operating-condition descriptors (altitude, Mach, throttle, inlet temperature) at phase u.
void descriptors(const FlightProfile& p, double cruise_alt, double u, Rng& rng, double* w) {
  double alt;
  double throttle;
  if (u < p.climb) {
    alt = cruise_alt * u / p.climb;
    throttle = 0.9;
  } else if (u > 1.0 - p.descent) {
    alt = cruise_alt * (1.0 - u) / p.descent;
    throttle = 0.3;
  } else {
    alt = cruise_alt;
    throttle = 0.6;
  }
  w[0] = alt + 0.01 * rng.normal();
  w[1] = 0.3 + 0.5 * alt + 0.02 * rng.normal();
  w[2] = throttle + 0.03 * rng.normal();
  w[3] = 1.0 - 0.4 * alt + 0.02 * rng.normal();
}

}  // namespace

UnitSeries simulate_unit(const UnitSpec& unit, const SensorModel& sm, std::size_t steps_per_cycle,
                         std::int64_t max_cycles, Rng& rng) {
  const std::int64_t eol = end_of_life_cycle(unit.a, unit.b, unit.h_s);
  if (eol < 0 || eol > max_cycles) {
    throw DataError("unit " + std::to_string(unit.unit_id) +
                    ": health threshold not reached within " + std::to_string(max_cycles) + " cycles");
  }
  if (unit.dataset_id < 1 || static_cast<std::size_t>(unit.dataset_id) > sm.B.size()) {
    throw DataError("unit " + std::to_string(unit.unit_id) + ": unknown dataset id");
  }
  UnitSpec spec = unit;
  spec.total_cycles = eol;
  const std::size_t ws = sm.scenario_channels;
  const std::size_t xs = sm.sensor_channels;
  const std::size_t channels = ws + xs;
  const std::size_t cycles = static_cast<std::size_t>(eol) + 1;
  const FlightProfile profile = profile_for(unit.flight_class);
  const auto& B = sm.B[unit.dataset_id - 1];

  UnitSeries s;
  s.steps_per_cycle = steps_per_cycle;
  s.channels = channels;
  s.end_of_life = eol;
  s.values.resize(cycles * steps_per_cycle * channels);
  s.theta.resize(cycles * steps_per_cycle);
  s.sigma_noise.resize(cycles);
  std::vector<double> w(ws);
  for (std::size_t c = 0; c < cycles; ++c) {
    const auto cyc = static_cast<std::int64_t>(c);
    const double sigma = sm.sigma_noise(spec, cyc);
    s.sigma_noise[c] = sigma;
    const double cruise_alt = profile.altitude * (1.0 + 0.01 * rng.normal());
    const double jitter = 0.002 * rng.normal();
    for (std::size_t k = 0; k < steps_per_cycle; ++k) {
      const std::size_t step = c * steps_per_cycle + k;
      const double t = static_cast<double>(c) + static_cast<double>(k) / steps_per_cycle;
      const double theta =
          cyc < unit.h_s ? jitter : -unit.a * std::expm1(unit.b * (t - static_cast<double>(unit.h_s)));
      s.theta[step] = theta;
      const double u = steps_per_cycle == 1 ? 0.5 : static_cast<double>(k) / (steps_per_cycle - 1);
      descriptors(profile, cruise_alt, u, rng, w.data());
      double* row = s.values.data() + step * channels;
      std::copy(w.begin(), w.end(), row);
      for (std::size_t j = 0; j < xs; ++j) {
        double z = sm.c[j] + B[j] * theta;
        for (std::size_t i = 0; i < ws; ++i) z += sm.A[j * ws + i] * w[i];
        row[ws + j] = std::tanh(z) + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
      }
    }
  }
  return s;
}

std::vector<double> rul_labels(std::int64_t end_of_life, std::int64_t h_s) {
  if (h_s < 0 || h_s > end_of_life) throw DataError("fault onset lies outside the series");
  std::vector<double> rul(static_cast<std::size_t>(end_of_life) + 1);
  for (std::int64_t t = 0; t <= end_of_life; ++t) {
    rul[static_cast<std::size_t>(t)] = static_cast<double>(end_of_life - std::max(t, h_s));
  }
  return rul;
}

WindowSet make_windows(const UnitSeries& series, const UnitSpec& unit, std::size_t L,
                       std::size_t stride, std::size_t decimation) {
  if (L < 1 || stride < 1 || decimation < 1) throw ConfigError("window length, stride and decimation must be positive");
  const std::size_t raw = series.steps();
  const std::size_t n = (raw + decimation - 1) / decimation;
  if (n < L) {
    throw DataError("unit " + std::to_string(unit.unit_id) + ": " + std::to_string(n) +
                    " decimated steps, shorter than window length " + std::to_string(L));
  }
  const std::size_t D = series.channels;
  const auto rul = rul_labels(series.end_of_life, unit.h_s);
  WindowSet w;
  w.channels = D;
  w.window_length = L;
  const std::size_t count = (n - L) / stride + 1;
  w.features.resize(count * D * L);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t last = (L - 1) + k * stride;
    const std::size_t first = last + 1 - L;
    double* f = w.features.data() + k * D * L;
    for (std::size_t l = 0; l < L; ++l) {
      const double* row = series.values.data() + (first + l) * decimation * D;
      for (std::size_t d = 0; d < D; ++d) f[d * L + l] = row[d];
    }
    const auto cyc = static_cast<std::int64_t>(last * decimation / series.steps_per_cycle);
    w.rul.push_back(rul[static_cast<std::size_t>(cyc)]);
    w.unit_id.push_back(unit.unit_id);
    w.cycle.push_back(cyc);
    w.lifetime_fraction.push_back(static_cast<double>(cyc) / static_cast<double>(series.end_of_life));
  }
  return w;
}

// ---- standardization and splits ----

StandardizationStats compute_stats(const WindowSet& windows) {
  if (windows.empty()) throw DataError("cannot compute statistics of an empty split");
  const std::size_t D = windows.channels, L = windows.window_length, n = windows.size();
  StandardizationStats st;
  st.mean.assign(D, 0.0);
  st.std.assign(D, 0.0);
  const double count = static_cast<double>(n * L);
  for (std::size_t d = 0; d < D; ++d) {
    long double s = 0.0L;
    for (std::size_t r = 0; r < n; ++r) {
      const double* f = windows.features.data() + r * D * L + d * L;
      for (std::size_t l = 0; l < L; ++l) s += f[l];
    }
    const double m = static_cast<double>(s / count);
    long double ss = 0.0L;
    for (std::size_t r = 0; r < n; ++r) {
      const double* f = windows.features.data() + r * D * L + d * L;
      for (std::size_t l = 0; l < L; ++l) ss += (f[l] - m) * (f[l] - m);
    }
    st.mean[d] = m;
    st.std[d] = std::sqrt(static_cast<double>(ss / count));
  }
  return st;
}

void standardize(WindowSet& windows, const StandardizationStats& stats) {
  const std::size_t D = windows.channels, L = windows.window_length;
  if (stats.mean.size() != D || stats.std.size() != D) {
    throw ShapeError("standardization stats have " + std::to_string(stats.mean.size()) +
                     " channels, windows have " + std::to_string(D));
  }
  for (std::size_t d = 0; d < D; ++d) {
    if (!(stats.std[d] > 1e-12)) {
      throw DataError("channel " + std::to_string(d) + " is constant (std " +
                      format_exact(stats.std[d]) + ")");
    }
  }
  for (std::size_t r = 0; r < windows.size(); ++r) {
    for (std::size_t d = 0; d < D; ++d) {
      double* f = windows.features.data() + r * D * L + d * L;
      for (std::size_t l = 0; l < L; ++l) f[l] = (f[l] - stats.mean[d]) / stats.std[d];
    }
  }
}

std::pair<WindowSet, WindowSet> split_dev(const WindowSet& windows, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
  const std::size_t n = windows.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  const auto first = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (first == 0 || first == n) throw DataError("split leaves one side empty");
  std::vector<std::size_t> a(idx.begin(), idx.begin() + first), b(idx.begin() + first, idx.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {windows.subset(a), windows.subset(b)};
}

std::vector<std::size_t> allocate_counts(const std::vector<double>& ratios, std::size_t n) {
  const double total = std::accumulate(ratios.begin(), ratios.end(), 0.0);
  if (!(total > 0.0)) throw ConfigError("allocation ratios must not all be zero");
  std::vector<std::size_t> out(ratios.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t used = 0;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const double exact = ratios[i] / total * static_cast<double>(n);
    out[i] = static_cast<std::size_t>(std::floor(exact));
    used += out[i];
    rem.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < n; ++k, ++used) ++out[rem[k % rem.size()].second];
  return out;
}

// ---- bundle ----

DatasetBundle::DatasetBundle(const DatasetBundle& other)
    : seed(other.seed),
      config(other.config),
      units(other.units),
      stats(other.stats),
      noise_truth(other.noise_truth),
      standardized(other.standardized),
      splits_(other.splits_) {}

DatasetBundle& DatasetBundle::operator=(const DatasetBundle& other) {
  if (this != &other) {
    seed = other.seed;
    config = other.config;
    units = other.units;
    stats = other.stats;
    noise_truth = other.noise_truth;
    standardized = other.standardized;
    splits_ = other.splits_;
    reset_access_log();
  }
  return *this;
}

const WindowSet& DatasetBundle::split(Split s) const {
  access_[static_cast<int>(s)].fetch_add(1, std::memory_order_relaxed);
  return splits_[static_cast<int>(s)];
}

WindowSet& DatasetBundle::mutable_split(Split s) { return splits_[static_cast<int>(s)]; }

std::size_t DatasetBundle::access_count(Split s) const {
  return access_[static_cast<int>(s)].load(std::memory_order_relaxed);
}

void DatasetBundle::reset_access_log() const {
  for (auto& a : access_) a.store(0, std::memory_order_relaxed);
}

const UnitSpec& DatasetBundle::unit(std::int64_t id) const {
  for (const auto& u : units) {
    if (u.unit_id == id) return u;
  }
  throw DataError("unit " + std::to_string(id) + " is not in the manifest");
}

json DatasetBundle::manifest() const {
  json us = json::array();
  for (const auto& u : units) {
    us.push_back({{"unit_id", u.unit_id},
                  {"dataset_id", u.dataset_id},
                  {"flight_class", u.flight_class},
                  {"a", u.a},
                  {"b", u.b},
                  {"h_s", u.h_s},
                  {"total_cycles", u.total_cycles},
                  {"ood_flag", u.ood},
                  {"split", split_name(u.split)}});
  }
  return {{"format_version", kDatasetFormatVersion},
          {"seed", seed},
          {"standardized", standardized},
          {"channels", splits_[0].channels},
          {"window_length", splits_[0].window_length},
          {"scenario", to_json(config)},
          {"units", us}};
}

std::string DatasetBundle::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(hash_string(manifest().dump())));
  return buf;
}

bool DatasetBundle::same_contents(const DatasetBundle& o) const {
  return seed == o.seed && config == o.config && units == o.units && stats == o.stats &&
         noise_truth == o.noise_truth && standardized == o.standardized && splits_ == o.splits_;
}

namespace {

void quantize_all(WindowSet& w) {
  for (double& v : w.features) v = quantize9(v);
  for (double& v : w.lifetime_fraction) v = quantize9(v);
  for (double& v : w.rul) v = quantize9(v);
}

std::vector<int> shuffled_classes(const std::array<double, 3>& ratios, std::size_t n, Rng& rng) {
  const auto counts = allocate_counts({ratios.begin(), ratios.end()}, n);
  std::vector<int> classes;
  for (std::size_t c = 0; c < 3; ++c) classes.insert(classes.end(), counts[c], static_cast<int>(c + 1));
  for (std::size_t i = classes.size(); i > 1; --i) std::swap(classes[i - 1], classes[rng.below(i)]);
  return classes;
}

}  // namespace

DatasetBundle generate_scenario(const ScenarioConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const SensorModel sm = SensorModel::create(cfg, seed);
  Rng assign = Rng(seed).split(kAssignTag);
  const auto dev_classes = shuffled_classes(cfg.flight_class_ratios, cfg.dev_units, assign);
  const auto test_classes = shuffled_classes(cfg.test_flight_class_ratios, cfg.test_units, assign);

  auto in_envelope = [&](UnitSpec& u) {
    u.a = cfg.a_min + (cfg.a_max - cfg.a_min) * assign.uniform();
    u.b = cfg.b_min + (cfg.b_max - cfg.b_min) * assign.uniform();
  };

  std::vector<UnitSpec> units;
  const std::size_t total = cfg.dev_units + cfg.test_units;
  for (std::size_t i = 0; i < total; ++i) {
    UnitSpec u;
    u.unit_id = static_cast<std::int64_t>(i + 1);
    const bool dev = i < cfg.dev_units;
    const std::size_t k = dev ? i : i - cfg.dev_units;
    u.dataset_id = static_cast<int>(k % cfg.datasets) + 1;
    u.flight_class = dev ? dev_classes[k] : test_classes[k];
    u.split = dev ? Split::train : Split::test;
    u.h_s = cfg.h_s_min + static_cast<std::int64_t>(assign.below(static_cast<std::uint64_t>(cfg.h_s_max - cfg.h_s_min)));
    in_envelope(u);
    u.ood = !dev && k >= cfg.test_units - cfg.ood_units;
    if (u.ood) {
      // Extrapolated rate beyond the envelope, with the amplitude re-solved so
      // the degradation lasts as long as an in-envelope unit's.
      const double duration = std::log1p(1.0 / u.a) / u.b;
      u.b = cfg.b_max * cfg.ood_b_factor * (1.0 + 0.05 * assign.uniform());
      u.a = 1.0 / std::expm1(u.b * duration);
    }
    units.push_back(u);
  }

  WindowSet dev_windows, test_windows;
  NoiseTruth truth;
  const Rng unit_root = Rng(seed).split(kUnitTag);
  for (auto& u : units) {
    Rng rng = unit_root.split(static_cast<std::uint64_t>(u.unit_id));
    const UnitSeries series = simulate_unit(u, sm, cfg.steps_per_cycle, cfg.max_cycles, rng);
    u.total_cycles = series.end_of_life;
    for (std::size_t c = 0; c < series.sigma_noise.size(); ++c) {
      truth.unit_id.push_back(u.unit_id);
      truth.cycle.push_back(static_cast<std::int64_t>(c));
      truth.sigma_noise.push_back(quantize9(series.sigma_noise[c]));
    }
    const WindowSet w = make_windows(series, u, cfg.window_length, cfg.stride, cfg.decimation);
    (u.split == Split::test ? test_windows : dev_windows).append(w);
  }

  auto [train, valid] = split_dev(dev_windows, 1.0 - cfg.valid_ratio, Rng(seed).split(kSplitTag)());
  DatasetBundle bundle;
  bundle.seed = seed;
  bundle.config = cfg;
  bundle.units = std::move(units);
  bundle.stats = compute_stats(train);
  bundle.noise_truth = std::move(truth);
  bundle.standardized = true;
  standardize(train, bundle.stats);
  standardize(valid, bundle.stats);
  standardize(test_windows, bundle.stats);
  quantize_all(train);
  quantize_all(valid);
  quantize_all(test_windows);
  bundle.mutable_split(Split::train) = std::move(train);
  bundle.mutable_split(Split::valid) = std::move(valid);
  bundle.mutable_split(Split::test) = std::move(test_windows);
  return bundle;
}

DatasetBundle bundle_from_windows(WindowSet train, WindowSet valid, WindowSet test) {
  DatasetBundle b;
  b.standardized = false;
  std::map<std::int64_t, Split> seen;
  const std::array<std::pair<const WindowSet*, Split>, 3> parts{
      {{&train, Split::train}, {&valid, Split::valid}, {&test, Split::test}}};
  for (const auto& [ws, s] : parts) {
    for (auto id : ws->unit_id) seen.emplace(id, s);
  }
  for (const auto& [id, s] : seen) {
    UnitSpec u;
    u.unit_id = id;
    u.split = s;
    b.units.push_back(u);
  }
  b.config.window_length = train.window_length;
  b.mutable_split(Split::train) = std::move(train);
  b.mutable_split(Split::valid) = std::move(valid);
  b.mutable_split(Split::test) = std::move(test);
  return b;
}

// ---- files ----

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

void write_windows(const WindowSet& w, const std::filesystem::path& p) {
  auto out = open_out(p);
  std::string line = "unit_id,cycle,lifetime_fraction";
  char name[16];
  for (std::size_t f = 0; f < w.feature_dim(); ++f) {
    std::snprintf(name, sizeof name, ",f_%03zu", f);
    line += name;
  }
  line += ",rul\n";
  out << line;
  const std::size_t F = w.feature_dim();
  for (std::size_t r = 0; r < w.size(); ++r) {
    line.clear();
    line += std::to_string(w.unit_id[r]);
    line += ',';
    line += std::to_string(w.cycle[r]);
    line += ',';
    line += format9(w.lifetime_fraction[r]);
    for (std::size_t f = 0; f < F; ++f) {
      line += ',';
      line += format9(w.features[r * F + f]);
    }
    line += ',';
    line += format9(w.rul[r]);
    line += '\n';
    out << line;
  }
  if (!out) throw IoError("failed writing " + p.string());
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Iterates the lines of a CSV text; returns false when exhausted.
struct LineReader {
  std::string_view text;
  std::size_t pos = 0;
  bool next(std::string_view& line, bool& terminated) {
    if (pos >= text.size()) return false;
    const std::size_t nl = text.find('\n', pos);
    terminated = nl != std::string_view::npos;
    const std::size_t end = terminated ? nl : text.size();
    line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = terminated ? nl + 1 : text.size();
    return true;
  }
};

WindowSet read_windows(const std::filesystem::path& p, std::size_t channels, std::size_t L) {
  const std::string text = read_file(p);
  const std::string file = p.filename().string();
  LineReader reader{text};
  std::string_view line;
  bool terminated = false;
  if (!reader.next(line, terminated)) throw DataError(file + ": missing header");
  const std::size_t F = channels * L;
  const auto header = split_fields(line);
  if (header.size() != F + 4 || header[0] != "unit_id" || header[1] != "cycle" ||
      header[2] != "lifetime_fraction" || header.back() != "rul") {
    throw DataError(file + ": header does not match " + std::to_string(F) + " features");
  }
  WindowSet w;
  w.channels = channels;
  w.window_length = L;
  std::size_t row = 0;
  while (reader.next(line, terminated)) {
    ++row;
    if (line.empty() && !terminated) break;
    const auto fields = split_fields(line);
    const std::string where = file + " row " + std::to_string(row);
    if (!terminated) throw DataError(where + ": truncated (no line terminator at byte " + std::to_string(text.size()) + ")");
    if (fields.size() != F + 4) {
      throw DataError(where + ": expected " + std::to_string(F + 4) + " fields, found " +
                      std::to_string(fields.size()));
    }
    std::int64_t uid = 0, cyc = 0;
    double lf = 0.0, rul = 0.0;
    if (!parse_number(fields[0], uid) || !parse_number(fields[1], cyc) || !parse_number(fields[2], lf) ||
        !parse_number(fields.back(), rul)) {
      throw DataError(where + ": malformed label columns");
    }
    for (std::size_t f = 0; f < F; ++f) {
      double v = 0.0;
      if (!parse_number(fields[3 + f], v)) throw DataError(where + ": malformed feature f_" + std::to_string(f));
      w.features.push_back(v);
    }
    w.unit_id.push_back(uid);
    w.cycle.push_back(cyc);
    w.lifetime_fraction.push_back(lf);
    w.rul.push_back(rul);
  }
  return w;
}

}  // namespace

void save_dataset(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  {
    auto out = open_out(dir / "manifest.json");
    out << bundle.manifest().dump(2) << "\n";
  }
  for (Split s : {Split::train, Split::valid, Split::test}) {
    write_windows(bundle.split(s), dir / (std::string(split_name(s)) + ".csv"));
  }
  bundle.reset_access_log();
  {
    auto out = open_out(dir / "stats.csv");
    out << "feature_index,mean,std\n";
    for (std::size_t d = 0; d < bundle.stats.mean.size(); ++d) {
      out << d << ',' << format_exact(bundle.stats.mean[d]) << ',' << format_exact(bundle.stats.std[d]) << '\n';
    }
  }
  {
    auto out = open_out(dir / "noise_truth.csv");
    out << "unit_id,cycle,sigma_noise\n";
    const auto& t = bundle.noise_truth;
    for (std::size_t i = 0; i < t.unit_id.size(); ++i) {
      out << t.unit_id[i] << ',' << t.cycle[i] << ',' << format9(t.sigma_noise[i]) << '\n';
    }
  }
}

DatasetBundle load_dataset(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
  DatasetBundle b;
  std::size_t channels = 0, L = 0;
  try {
    const int version = m.at("format_version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw DataError("manifest.json: format_version " + std::to_string(version) + " is not supported");
    }
    b.seed = m.at("seed").get<std::uint64_t>();
    b.standardized = m.at("standardized").get<bool>();
    channels = m.at("channels").get<std::size_t>();
    L = m.at("window_length").get<std::size_t>();
    b.config = scenario_from_json(m.at("scenario"));
    for (const auto& uj : m.at("units")) {
      UnitSpec u;
      u.unit_id = uj.at("unit_id").get<std::int64_t>();
      u.dataset_id = uj.at("dataset_id").get<int>();
      u.flight_class = uj.at("flight_class").get<int>();
      u.a = uj.at("a").get<double>();
      u.b = uj.at("b").get<double>();
      u.h_s = uj.at("h_s").get<std::int64_t>();
      u.total_cycles = uj.at("total_cycles").get<std::int64_t>();
      u.ood = uj.at("ood_flag").get<bool>();
      u.split = parse_split(uj.at("split").get<std::string>());
      b.units.push_back(u);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
  std::set<std::int64_t> known;
  for (const auto& u : b.units) known.insert(u.unit_id);
  for (Split s : {Split::train, Split::valid, Split::test}) {
    const std::string file = std::string(split_name(s)) + ".csv";
    WindowSet w = read_windows(dir / file, channels, L);
    for (std::size_t r = 0; r < w.size(); ++r) {
      if (!known.count(w.unit_id[r])) {
        throw DataError(file + " row " + std::to_string(r + 1) + ": unit " +
                        std::to_string(w.unit_id[r]) + " is missing from the manifest");
      }
    }
    b.mutable_split(s) = std::move(w);
  }
  if (std::filesystem::exists(dir / "stats.csv")) {
    const std::string text = read_file(dir / "stats.csv");
    LineReader reader{text};
    std::string_view line;
    bool terminated = false;
    reader.next(line, terminated);
    std::size_t row = 0;
    while (reader.next(line, terminated)) {
      ++row;
      const auto f = split_fields(line);
      std::size_t idx = 0;
      double mean = 0.0, sd = 0.0;
      if (f.size() != 3 || !parse_number(f[0], idx) || !parse_number(f[1], mean) || !parse_number(f[2], sd) ||
          idx != b.stats.mean.size()) {
        throw DataError("stats.csv row " + std::to_string(row) + ": malformed");
      }
      b.stats.mean.push_back(mean);
      b.stats.std.push_back(sd);
    }
  }
  if (std::filesystem::exists(dir / "noise_truth.csv")) {
    const std::string text = read_file(dir / "noise_truth.csv");
    LineReader reader{text};
    std::string_view line;
    bool terminated = false;
    reader.next(line, terminated);
    std::size_t row = 0;
    while (reader.next(line, terminated)) {
      ++row;
      const auto f = split_fields(line);
      std::int64_t uid = 0, cyc = 0;
      double sigma = 0.0;
      if (f.size() != 3 || !parse_number(f[0], uid) || !parse_number(f[1], cyc) || !parse_number(f[2], sigma)) {
        throw DataError("noise_truth.csv row " + std::to_string(row) + ": malformed");
      }
      b.noise_truth.unit_id.push_back(uid);
      b.noise_truth.cycle.push_back(cyc);
      b.noise_truth.sigma_noise.push_back(sigma);
    }
  }
  return b;
}

}  // namespace ruq
