#include "ruq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ruq/error.hpp"

namespace ruq {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

void require_congruent(std::size_t a, std::size_t b, const char* what) {
  if (a == 0) throw DataError(std::string(what) + ": no rows");
  if (a != b) throw DataError(std::string(what) + ": inputs differ in length");
}

void require_positive(std::span<const double> var, const char* what) {
  for (double v : var) {
    if (!(v > 0.0)) throw DomainError(std::string(what) + ": variance must be positive");
  }
}

std::string fmt(double v, int digits = 10) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

// Field table shared by the JSON and CSV writers.
struct MetricField {
  const char* name;
  double Metrics::*member;
};

constexpr MetricField kMetricFields[] = {
    {"mae", &Metrics::mae},
    {"rmse", &Metrics::rmse},
    {"nll_moment", &Metrics::nll_moment},
    {"nll_mixture", &Metrics::nll_mixture},
    {"rmsce", &Metrics::rmsce},
    {"sharpness", &Metrics::sharpness},
    {"mean_entropy", &Metrics::mean_entropy},
    {"miscalibration_area", &Metrics::miscalibration_area},
    {"mean_epistemic", &Metrics::mean_epistemic},
    {"mean_aleatoric", &Metrics::mean_aleatoric},
};

double json_number(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

PointMetrics point_metrics(std::span<const double> y, std::span<const double> mu) {
  require_congruent(y.size(), mu.size(), "point_metrics");
  long double abs_sum = 0.0L, sq_sum = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - mu[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  const auto n = static_cast<long double>(y.size());
  return {static_cast<double>(abs_sum / n), static_cast<double>(std::sqrt(sq_sum / n))};
}

double nll_moment(std::span<const double> y, std::span<const double> mu, std::span<const double> var) {
  require_congruent(y.size(), mu.size(), "nll_moment");
  require_congruent(y.size(), var.size(), "nll_moment");
  require_positive(var, "nll_moment");
  long double s = 0.0L;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - mu[i];
    s += 0.5 * std::log(var[i]) + e * e / (2.0 * var[i]) + kHalfLog2Pi;
  }
  return static_cast<double>(s / static_cast<long double>(y.size()));
}

std::vector<double> nll_mixture_rows(std::span<const double> y, const PredictiveSampleSet& s) {
  require_congruent(y.size(), s.batch, "nll_mixture");
  if (s.passes < 1) throw DataError("nll_mixture: empty sample set");
  std::vector<double> out(s.batch);
  std::vector<double> logs(s.passes);
  for (std::size_t i = 0; i < s.batch; ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < s.passes; ++p) {
      const double v = s.var_at(p, i);
      if (!(v > 0.0)) throw DomainError("nll_mixture: variance must be positive");
      const double e = y[i] - s.mu_at(p, i);
      logs[p] = -0.5 * std::log(v) - e * e / (2.0 * v) - kHalfLog2Pi;
      top = std::max(top, logs[p]);
    }
    double acc = 0.0;
    for (double l : logs) acc += std::exp(l - top);
    out[i] = -(top + std::log(acc / static_cast<double>(s.passes)));
  }
  return out;
}

double nll_mixture(std::span<const double> y, const PredictiveSampleSet& s) {
  const auto rows = nll_mixture_rows(y, s);
  long double acc = 0.0L;
  for (double v : rows) acc += v;
  return static_cast<double>(acc / static_cast<long double>(rows.size()));
}

double gaussian_cdf(double y, double mu, double var) {
  if (!(var > 0.0)) throw DomainError("gaussian_cdf: variance must be positive");
  return 0.5 * std::erfc(-(y - mu) / (std::sqrt(var) * std::numbers::sqrt2));
}

CalibrationCurve calibration_curve(std::span<const double> F, std::size_t m) {
  if (F.empty()) throw DataError("calibration_curve: no values");
  if (m < 2) throw ConfigError("calibration_curve: at least two levels are required");
  std::vector<double> sorted(F.begin(), F.end());
  std::sort(sorted.begin(), sorted.end());
  CalibrationCurve c;
  for (std::size_t j = 0; j < m; ++j) {
    const double p = static_cast<double>(j) / static_cast<double>(m - 1);
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), p) - sorted.begin();
    c.levels.push_back(p);
    c.frequencies.push_back(static_cast<double>(count) / static_cast<double>(sorted.size()));
  }
  return c;
}

double rmsce(const CalibrationCurve& c) {
  double s = 0.0;
  for (std::size_t j = 0; j < c.levels.size(); ++j) {
    const double d = c.levels[j] - c.frequencies[j];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(c.levels.size()));
}

double miscalibration_area(const CalibrationCurve& c) {
  double area = 0.0;
  for (std::size_t j = 0; j + 1 < c.levels.size(); ++j) {
    const double d0 = std::abs(c.frequencies[j] - c.levels[j]);
    const double d1 = std::abs(c.frequencies[j + 1] - c.levels[j + 1]);
    area += 0.5 * (d0 + d1) * (c.levels[j + 1] - c.levels[j]);
  }
  return area;
}

double sharpness(std::span<const double> var) {
  if (var.empty()) throw DataError("sharpness: no values");
  require_positive(var, "sharpness");
  long double s = 0.0L;
  for (double v : var) s += v;
  return std::sqrt(static_cast<double>(s / static_cast<long double>(var.size())));
}

double gaussian_entropy(double var) {
  if (!(var > 0.0)) throw DomainError("entropy: variance must be positive");
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

std::vector<ConfidencePoint> rmse_vs_confidence(std::span<const double> y, std::span<const double> mu,
                                                std::span<const double> var, std::size_t levels) {
  require_congruent(y.size(), mu.size(), "rmse_vs_confidence");
  require_congruent(y.size(), var.size(), "rmse_vs_confidence");
  if (levels < 2) throw ConfigError("rmse_vs_confidence: at least two levels are required");
  const std::size_t n = y.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return var[a] < var[b]; });
  std::vector<long double> prefix(n + 1, 0.0L);
  for (std::size_t k = 0; k < n; ++k) {
    const double e = y[order[k]] - mu[order[k]];
    prefix[k + 1] = prefix[k] + static_cast<long double>(e) * e;
  }
  std::vector<ConfidencePoint> out;
  for (std::size_t k = 0; k < levels; ++k) {
    ConfidencePoint p;
    p.confidence = 1.0 - static_cast<double>(k) / static_cast<double>(levels - 1);
    const std::size_t target = (k * n + levels - 2) / (levels - 1);
    if (target > 0) {
      const double threshold = var[order[target - 1]];
      std::size_t kept = target;
      while (kept < n && var[order[kept]] <= threshold) ++kept;
      p.retained_fraction = static_cast<double>(kept) / static_cast<double>(n);
      p.rmse = static_cast<double>(std::sqrt(prefix[kept] / static_cast<long double>(kept)));
    }
    out.push_back(p);
  }
  return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) return kNaN;
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return kNaN;
  return sab / std::sqrt(saa * sbb);
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) return kNaN;
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

// ---- pooled and grouped metrics ----

Metrics compute_metrics(std::span<const EvalRow> rows, std::size_t levels) {
  if (rows.empty()) throw DataError("compute_metrics: no rows");
  std::vector<double> y, mu, total, F;
  long double mix = 0.0L, ent = 0.0L, ep = 0.0L, al = 0.0L;
  for (const auto& r : rows) {
    y.push_back(r.y);
    mu.push_back(r.mu);
    total.push_back(r.total);
    F.push_back(gaussian_cdf(r.y, r.mu, r.total));
    mix += r.nll_mixture;
    ent += gaussian_entropy(r.total);
    ep += r.epistemic;
    al += r.aleatoric;
  }
  const auto n = static_cast<long double>(rows.size());
  Metrics m;
  m.count = rows.size();
  const PointMetrics pm = point_metrics(y, mu);
  m.mae = pm.mae;
  m.rmse = pm.rmse;
  m.nll_moment = nll_moment(y, mu, total);
  m.nll_mixture = static_cast<double>(mix / n);
  const CalibrationCurve curve = calibration_curve(F, levels);
  m.rmsce = rmsce(curve);
  m.miscalibration_area = miscalibration_area(curve);
  m.sharpness = sharpness(total);
  m.mean_entropy = static_cast<double>(ent / n);
  m.mean_epistemic = static_cast<double>(ep / n);
  m.mean_aleatoric = static_cast<double>(al / n);
  return m;
}

const char* group_key_name(GroupKey k) {
  switch (k) {
    case GroupKey::unit: return "unit";
    case GroupKey::dataset: return "dataset";
    case GroupKey::flight_class: return "flight_class";
  }
  return "?";
}

GroupKey parse_group_key(const std::string& name) {
  if (name == "unit") return GroupKey::unit;
  if (name == "dataset") return GroupKey::dataset;
  if (name == "flight_class") return GroupKey::flight_class;
  throw ConfigError("unknown group key '" + name + "' (expected unit, dataset, flight_class)");
}

std::map<std::int64_t, Metrics> group_aggregate(std::span<const EvalRow> rows, GroupKey key) {
  std::map<std::int64_t, std::vector<EvalRow>> groups;
  for (const auto& r : rows) {
    const std::int64_t g = key == GroupKey::unit ? r.unit_id : key == GroupKey::dataset ? r.dataset_id : r.flight_class;
    groups[g].push_back(r);
  }
  std::map<std::int64_t, Metrics> out;
  for (const auto& [g, members] : groups) out[g] = compute_metrics(members);
  return out;
}

std::vector<LifetimeBin> lifetime_binned(std::span<const EvalRow> rows, std::size_t bins) {
  if (bins < 1) throw ConfigError("lifetime_binned: at least one bin is required");
  std::vector<std::vector<EvalRow>> parts(bins);
  for (const auto& r : rows) {
    if (!(r.lifetime_fraction >= 0.0 && r.lifetime_fraction <= 1.0)) {
      throw DataError("lifetime fraction outside [0, 1]");
    }
    const auto b = std::min(bins - 1, static_cast<std::size_t>(r.lifetime_fraction * static_cast<double>(bins)));
    parts[b].push_back(r);
  }
  std::vector<LifetimeBin> out;
  for (std::size_t b = 0; b < bins; ++b) {
    LifetimeBin bin;
    bin.lower = static_cast<double>(b) / static_cast<double>(bins);
    bin.upper = static_cast<double>(b + 1) / static_cast<double>(bins);
    if (!parts[b].empty()) {
      bin.metrics = compute_metrics(parts[b]);
      long double t = 0.0L;
      for (const auto& r : parts[b]) t += r.true_noise_var;
      bin.mean_true_noise_var = static_cast<double>(t / parts[b].size());
    } else {
      bin.mean_true_noise_var = kNaN;
    }
    out.push_back(bin);
  }
  return out;
}

std::vector<EvalRow> make_eval_rows(const DatasetBundle& data, const WindowSet& windows,
                                    const PredictionSet& predictions) {
  if (predictions.rows.size() != windows.size()) {
    throw DataError("predictions cover " + std::to_string(predictions.rows.size()) + " rows, windows hold " +
                    std::to_string(windows.size()));
  }
  std::map<std::pair<std::int64_t, std::int64_t>, double> truth;
  const auto& nt = data.noise_truth;
  for (std::size_t i = 0; i < nt.unit_id.size(); ++i) truth[{nt.unit_id[i], nt.cycle[i]}] = nt.sigma_noise[i];
  const auto mix = nll_mixture_rows(windows.rul, predictions.samples);
  std::vector<EvalRow> rows(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const UnitSpec& u = data.unit(windows.unit_id[i]);
    const Prediction& p = predictions.rows[i];
    EvalRow& r = rows[i];
    r.unit_id = u.unit_id;
    r.dataset_id = u.dataset_id;
    r.flight_class = u.flight_class;
    r.cycle = windows.cycle[i];
    r.lifetime_fraction = windows.lifetime_fraction[i];
    r.y = windows.rul[i];
    r.mu = p.mu;
    r.total = p.total;
    r.epistemic = p.epistemic;
    r.aleatoric = p.aleatoric;
    r.nll_mixture = mix[i];
    const auto it = truth.find({u.unit_id, r.cycle});
    r.true_noise_var = it == truth.end() ? kNaN : it->second * it->second;
  }
  return rows;
}

MetricsReport build_report(std::span<const EvalRow> rows, const EvaluationSettings& s) {
  MetricsReport r;
  r.overall = compute_metrics(rows, s.calibration_levels);
  r.per_unit = group_aggregate(rows, GroupKey::unit);
  r.per_dataset = group_aggregate(rows, GroupKey::dataset);
  r.per_flight_class = group_aggregate(rows, GroupKey::flight_class);
  std::vector<double> y, mu, total, F;
  for (const auto& row : rows) {
    y.push_back(row.y);
    mu.push_back(row.mu);
    total.push_back(row.total);
    F.push_back(gaussian_cdf(row.y, row.mu, row.total));
  }
  r.calibration = calibration_curve(F, s.calibration_levels);
  r.confidence_curve = rmse_vs_confidence(y, mu, total, s.confidence_levels);
  std::vector<double> conf, err;
  for (const auto& p : r.confidence_curve) {
    if (!p.rmse) continue;
    conf.push_back(p.confidence);
    err.push_back(*p.rmse);
  }
  r.confidence_rmse_spearman = spearman(conf, err);
  r.lifetime = lifetime_binned(rows, s.lifetime_bins);
  std::vector<double> al, truth;
  for (const auto& b : r.lifetime) {
    if (!b.metrics || !std::isfinite(b.mean_true_noise_var)) continue;
    al.push_back(b.metrics->mean_aleatoric);
    truth.push_back(b.mean_true_noise_var);
  }
  r.aleatoric_truth_pearson = pearson(al, truth);
  return r;
}

// ---- JSON ----

json to_json(const Metrics& m) {
  json j;
  j["count"] = m.count;
  for (const auto& f : kMetricFields) j[f.name] = m.*(f.member);
  return j;
}

Metrics metrics_from_json(const json& j) {
  Metrics m;
  m.count = j.at("count").get<std::size_t>();
  for (const auto& f : kMetricFields) m.*(f.member) = json_number(j.at(f.name));
  return m;
}

namespace {

json group_json(const std::map<std::int64_t, Metrics>& groups, const char* key) {
  json arr = json::array();
  for (const auto& [g, m] : groups) {
    json row = to_json(m);
    row[key] = g;
    arr.push_back(row);
  }
  return arr;
}

std::map<std::int64_t, Metrics> group_from_json(const json& arr, const char* key) {
  std::map<std::int64_t, Metrics> out;
  for (const auto& row : arr) out[row.at(key).get<std::int64_t>()] = metrics_from_json(row);
  return out;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

json to_json(const MetricsReport& r) {
  json curve = json::array();
  for (std::size_t j = 0; j < r.calibration.levels.size(); ++j) {
    curve.push_back({{"level", r.calibration.levels[j]}, {"frequency", r.calibration.frequencies[j]}});
  }
  json conf = json::array();
  for (const auto& p : r.confidence_curve) {
    conf.push_back({{"confidence", p.confidence},
                    {"retained_fraction", p.retained_fraction},
                    {"rmse", optional_number(p.rmse)}});
  }
  json life = json::array();
  for (const auto& b : r.lifetime) {
    life.push_back({{"lower", b.lower},
                    {"upper", b.upper},
                    {"metrics", b.metrics ? to_json(*b.metrics) : json(nullptr)},
                    {"mean_true_noise_var", b.mean_true_noise_var}});
  }
  return {{"format_version", kReportFormatVersion},
          {"method", r.method},
          {"seed", r.seed},
          {"dataset_fingerprint", r.dataset_fingerprint},
          {"split", r.split},
          {"mc_samples", r.mc_samples},
          {"nominal_decomposition", r.nominal_decomposition},
          {"overall", to_json(r.overall)},
          {"per_unit", group_json(r.per_unit, "unit_id")},
          {"per_dataset", group_json(r.per_dataset, "dataset_id")},
          {"per_flight_class", group_json(r.per_flight_class, "flight_class")},
          {"calibration_curve", curve},
          {"rmse_vs_confidence", conf},
          {"lifetime_bins", life},
          {"confidence_rmse_spearman", r.confidence_rmse_spearman},
          {"aleatoric_truth_pearson", r.aleatoric_truth_pearson}};
}

MetricsReport report_from_json(const json& j) {
  try {
    if (j.at("format_version").get<int>() != kReportFormatVersion) {
      throw DataError("report format_version is not supported");
    }
    MetricsReport r;
    r.method = j.at("method").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.mc_samples = j.at("mc_samples").get<std::size_t>();
    r.nominal_decomposition = j.at("nominal_decomposition").get<bool>();
    r.overall = metrics_from_json(j.at("overall"));
    r.per_unit = group_from_json(j.at("per_unit"), "unit_id");
    r.per_dataset = group_from_json(j.at("per_dataset"), "dataset_id");
    r.per_flight_class = group_from_json(j.at("per_flight_class"), "flight_class");
    r.confidence_rmse_spearman = json_number(j.at("confidence_rmse_spearman"));
    r.aleatoric_truth_pearson = json_number(j.at("aleatoric_truth_pearson"));
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

// ---- files ----

std::string predictions_csv(std::span<const EvalRow> rows) {
  std::string out = "unit_id,cycle,lifetime_fraction,y_true,mu,sigma_total,sigma_epistemic,sigma_aleatoric\n";
  for (const auto& r : rows) {
    out += std::to_string(r.unit_id) + ',' + std::to_string(r.cycle) + ',' + fmt(r.lifetime_fraction, 9) + ',' +
           fmt(r.y, 9) + ',' + fmt(r.mu, 9) + ',' + fmt(std::sqrt(r.total), 9) + ',' +
           fmt(std::sqrt(r.epistemic), 9) + ',' + fmt(std::sqrt(r.aleatoric), 9) + '\n';
  }
  return out;
}

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

std::string metrics_header() {
  std::string h = "count";
  for (const auto& f : kMetricFields) h += std::string(",") + f.name;
  return h;
}

std::string metrics_cells(const Metrics& m) {
  std::string s = std::to_string(m.count);
  for (const auto& f : kMetricFields) s += "," + fmt(m.*(f.member));
  return s;
}

}  // namespace

void write_report_files(const MetricsReport& report, std::span<const EvalRow> rows, const std::filesystem::path& dir,
                        bool svg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_text(dir / "report.json", to_json(report).dump(2) + "\n");
  write_text(dir / "predictions.csv", predictions_csv(rows));
  std::string cal = "level,frequency\n";
  for (std::size_t j = 0; j < report.calibration.levels.size(); ++j) {
    cal += fmt(report.calibration.levels[j]) + ',' + fmt(report.calibration.frequencies[j]) + '\n';
  }
  write_text(dir / "calibration.csv", cal);
  std::string conf = "confidence,retained_fraction,rmse\n";
  for (const auto& p : report.confidence_curve) {
    conf += fmt(p.confidence) + ',' + fmt(p.retained_fraction) + ',' + (p.rmse ? fmt(*p.rmse) : "") + '\n';
  }
  write_text(dir / "confidence.csv", conf);
  std::string life = "lower,upper," + metrics_header() + ",mean_true_noise_var\n";
  for (const auto& b : report.lifetime) {
    life += fmt(b.lower) + ',' + fmt(b.upper) + ',';
    if (b.metrics) {
      life += metrics_cells(*b.metrics);
    } else {
      life += "0" + std::string(std::size(kMetricFields), ',');
    }
    life += ',' + fmt(b.mean_true_noise_var) + '\n';
  }
  write_text(dir / "lifetime.csv", life);
  if (svg) {
    std::vector<std::pair<double, double>> ideal{{0.0, 0.0}, {1.0, 1.0}}, observed, rmse;
    for (std::size_t j = 0; j < report.calibration.levels.size(); ++j) {
      observed.emplace_back(report.calibration.levels[j], report.calibration.frequencies[j]);
    }
    for (const auto& p : report.confidence_curve) {
      if (p.rmse) rmse.emplace_back(p.confidence, *p.rmse);
    }
    write_text(dir / "calibration.svg",
               svg_line_chart("Calibration (" + report.method + ")", "expected", "observed",
                              {{"ideal", ideal}, {report.method, observed}}));
    write_text(dir / "confidence.svg", svg_line_chart("RMSE versus confidence (" + report.method + ")",
                                                      "confidence", "rmse", {{report.method, rmse}}));
  }
}

// ---- comparison ----

Comparison compare_reports(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw DataError("compare: no reports given");
  Comparison c;
  c.dataset_fingerprint = reports[0].dataset_fingerprint;
  std::map<std::string, std::vector<const MetricsReport*>> by_method;
  for (const auto& r : reports) {
    if (r.dataset_fingerprint != c.dataset_fingerprint) {
      throw DataError("compare: reports come from different datasets (" + c.dataset_fingerprint + " vs " +
                      r.dataset_fingerprint + ")");
    }
    by_method[r.method].push_back(&r);
  }
  for (const auto& [method, runs] : by_method) {
    ComparisonRow row;
    row.method = method;
    row.runs = runs.size();
    row.mean.count = runs[0]->overall.count;
    row.std.count = runs[0]->overall.count;
    const double n = static_cast<double>(runs.size());
    for (const auto& f : kMetricFields) {
      double mean = 0.0;
      for (const auto* r : runs) mean += r->overall.*(f.member);
      mean /= n;
      double ss = 0.0;
      for (const auto* r : runs) ss += (r->overall.*(f.member) - mean) * (r->overall.*(f.member) - mean);
      row.mean.*(f.member) = mean;
      row.std.*(f.member) = runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    }
    c.rows.push_back(row);
    auto average_groups = [&](auto member) {
      std::map<std::int64_t, Metrics> out;
      std::map<std::int64_t, std::size_t> seen;
      for (const auto* r : runs) {
        for (const auto& [g, m] : r->*member) {
          Metrics& acc = out[g];
          acc.count = m.count;
          for (const auto& f : kMetricFields) acc.*(f.member) += m.*(f.member);
          ++seen[g];
        }
      }
      for (auto& [g, m] : out) {
        for (const auto& f : kMetricFields) m.*(f.member) /= static_cast<double>(seen[g]);
      }
      return out;
    };
    c.per_flight_class[method] = average_groups(&MetricsReport::per_flight_class);
    c.per_unit[method] = average_groups(&MetricsReport::per_unit);
  }
  std::stable_sort(c.rows.begin(), c.rows.end(),
                   [](const auto& a, const auto& b) { return a.mean.nll_moment < b.mean.nll_moment; });
  return c;
}

json to_json(const Comparison& c) {
  json rows = json::array();
  for (const auto& r : c.rows) {
    rows.push_back({{"method", r.method}, {"runs", r.runs}, {"mean", to_json(r.mean)}, {"std", to_json(r.std)}});
  }
  auto tables = [](const auto& t, const char* key) {
    json out = json::object();
    for (const auto& [method, groups] : t) out[method] = group_json(groups, key);
    return out;
  };
  return {{"format_version", kReportFormatVersion},
          {"dataset_fingerprint", c.dataset_fingerprint},
          {"spread", "sample standard deviation across runs"},
          {"methods", rows},
          {"per_flight_class", tables(c.per_flight_class, "flight_class")},
          {"per_unit", tables(c.per_unit, "unit_id")}};
}

std::string comparison_csv(const Comparison& c) {
  std::string out = "method,runs";
  for (const auto& f : kMetricFields) out += std::string(",") + f.name + "_mean," + f.name + "_std";
  out += '\n';
  for (const auto& r : c.rows) {
    out += r.method + ',' + std::to_string(r.runs);
    for (const auto& f : kMetricFields) out += ',' + fmt(r.mean.*(f.member)) + ',' + fmt(r.std.*(f.member));
    out += '\n';
  }
  return out;
}

std::string group_table_csv(const std::map<std::string, std::map<std::int64_t, Metrics>>& table,
                            const std::string& group_column) {
  std::string out = "method," + group_column + ',' + metrics_header() + '\n';
  for (const auto& [method, groups] : table) {
    for (const auto& [g, m] : groups) out += method + ',' + std::to_string(g) + ',' + metrics_cells(m) + '\n';
  }
  return out;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
  constexpr double W = 480, H = 320, left = 56, right = 16, top = 32, bottom = 44;
  constexpr const char* kColors[] = {"#888888", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!(x1 > x0)) x1 = x0 + 1.0;
  if (!(y1 > y0)) y1 = y0 + 1.0;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label
    << "</text>\n";
  s << "<text x=\"14\" y=\"" << H / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
    << H / 2 << ")\">" << y_label << "</text>\n";
  s << "<text x=\"" << left << "\" y=\"" << H - bottom + 16 << "\" font-size=\"10\">" << x0 << "</text>\n";
  s << "<text x=\"" << W - right << "\" y=\"" << H - bottom + 16 << "\" text-anchor=\"end\" font-size=\"10\">" << x1
    << "</text>\n";
  s << "<text x=\"" << left - 4 << "\" y=\"" << H - bottom << "\" text-anchor=\"end\" font-size=\"10\">" << y0
    << "</text>\n";
  s << "<text x=\"" << left - 4 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\" font-size=\"10\">" << y1
    << "</text>\n";
  std::size_t k = 0;
  for (const auto& [name, pts] : series) {
    const char* color = kColors[k % std::size(kColors)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) s << px(x) << ',' << py(y) << ' ';
    s << "\"/>\n";
    s << "<text x=\"" << W - right - 4 << "\" y=\"" << top + 14 * (k + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
      << color << "\">" << name << "</text>\n";
    ++k;
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace ruq
