#pragma once

// Evaluation metrics, grouped and lifetime-binned views, and report files.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ruq/data.hpp"
#include "ruq/model.hpp"
#include "ruq/predictors.hpp"

namespace ruq {

struct PointMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

/// Throws DataError on empty or incongruent inputs.
PointMetrics point_metrics(std::span<const double> y, std::span<const double> mu);

/// Mean Gaussian NLL under (mu, var). Throws DomainError if a variance is not positive.
double nll_moment(std::span<const double> y, std::span<const double> mu, std::span<const double> var);
/// Per-row -log[(1/N) sum_s N(y; mu_s, var_s)], evaluated with log-sum-exp.
std::vector<double> nll_mixture_rows(std::span<const double> y, const PredictiveSampleSet& samples);
/// Mean of nll_mixture_rows.
double nll_mixture(std::span<const double> y, const PredictiveSampleSet& samples);

/// Phi((y - mu) / sqrt(var)).
double gaussian_cdf(double y, double mu, double var);

struct CalibrationCurve {
  std::vector<double> levels;       // p_j = j / (m - 1)
  std::vector<double> frequencies;  // share of F_t <= p_j
};

inline constexpr std::size_t kCalibrationLevels = 101;

/// Throws DataError if `F` is empty, ConfigError if m < 2.
CalibrationCurve calibration_curve(std::span<const double> F, std::size_t m = kCalibrationLevels);
double rmsce(const CalibrationCurve& curve);
/// Trapezoidal integral of |p_hat(p) - p| over the level grid.
double miscalibration_area(const CalibrationCurve& curve);

/// sqrt(mean var). Throws DomainError if a variance is not positive.
double sharpness(std::span<const double> var);
/// Differential entropy 0.5 log(2 pi e var) of a Gaussian.
double gaussian_entropy(double var);

struct ConfidencePoint {
  double confidence = 0.0;         // 1 - target retained fraction
  double retained_fraction = 0.0;  // actual share of retained rows
  std::optional<double> rmse;      // empty when no row is retained
};

/// For each level k = 0..levels-1 the target retained fraction is k/(levels-1);
/// rows whose total variance does not exceed the corresponding quantile of
/// the total variances are retained.
std::vector<ConfidencePoint> rmse_vs_confidence(std::span<const double> y, std::span<const double> mu,
                                                std::span<const double> var, std::size_t levels = 21);

/// Spearman rank correlation (average ranks for ties). NaN if either side is constant.
double spearman(std::span<const double> a, std::span<const double> b);
double pearson(std::span<const double> a, std::span<const double> b);

/// One test prediction joined with its manifest entry.
struct EvalRow {
  std::int64_t unit_id = 0;
  int dataset_id = 0;
  int flight_class = 0;
  std::int64_t cycle = 0;
  double lifetime_fraction = 0.0;
  double y = 0.0;
  double mu = 0.0;
  double total = 0.0;      // variances
  double epistemic = 0.0;
  double aleatoric = 0.0;
  double nll_mixture = 0.0;
  double true_noise_var = 0.0;  // generator ground truth; NaN when unknown
};

struct Metrics {
  std::size_t count = 0;
  double mae = 0.0;
  double rmse = 0.0;
  double nll_moment = 0.0;
  double nll_mixture = 0.0;
  double rmsce = 0.0;
  double sharpness = 0.0;
  double mean_entropy = 0.0;
  double miscalibration_area = 0.0;
  double mean_epistemic = 0.0;
  double mean_aleatoric = 0.0;
};

/// Pooled metrics of a set of rows. Throws DataError if empty.
Metrics compute_metrics(std::span<const EvalRow> rows, std::size_t levels = kCalibrationLevels);

enum class GroupKey { unit, dataset, flight_class };
const char* group_key_name(GroupKey k);
GroupKey parse_group_key(const std::string& name);

/// Metrics per group, each computed by pooling the group's rows.
std::map<std::int64_t, Metrics> group_aggregate(std::span<const EvalRow> rows, GroupKey key);

struct LifetimeBin {
  double lower = 0.0;
  double upper = 0.0;
  std::optional<Metrics> metrics;  // empty for a bin without rows
  double mean_true_noise_var = 0.0;
};

/// Equal-width bins over lifetime_fraction in [0, 1]; the last bin is closed.
std::vector<LifetimeBin> lifetime_binned(std::span<const EvalRow> rows, std::size_t bins);

/// Joins predictions with the manifest and the ground-truth noise of `data`.
std::vector<EvalRow> make_eval_rows(const DatasetBundle& data, const WindowSet& windows,
                                    const PredictionSet& predictions);

inline constexpr int kReportFormatVersion = 1;

struct EvaluationSettings {
  std::size_t calibration_levels = kCalibrationLevels;
  std::size_t confidence_levels = 21;
  std::size_t lifetime_bins = 10;
};

struct MetricsReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string dataset_fingerprint;
  std::string split;
  std::size_t mc_samples = 0;
  bool nominal_decomposition = false;
  Metrics overall;
  std::map<std::int64_t, Metrics> per_unit;
  std::map<std::int64_t, Metrics> per_dataset;
  std::map<std::int64_t, Metrics> per_flight_class;
  CalibrationCurve calibration;
  std::vector<ConfidencePoint> confidence_curve;
  std::vector<LifetimeBin> lifetime;
  /// Spearman correlation between confidence and retained-subset RMSE.
  double confidence_rmse_spearman = 0.0;
  /// Pearson correlation of per-bin mean aleatoric variance with the per-bin
  /// ground-truth noise variance (NaN without ground truth).
  double aleatoric_truth_pearson = 0.0;
};

MetricsReport build_report(std::span<const EvalRow> rows, const EvaluationSettings& settings);

nlohmann::json to_json(const Metrics& m);
Metrics metrics_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MetricsReport& r);
/// Reads the fields needed for comparisons (overall and group tables).
MetricsReport report_from_json(const nlohmann::json& j);

/// Writes report.json, predictions.csv, calibration.csv, confidence.csv and
/// lifetime.csv into `dir`; with `svg`, also calibration.svg and confidence.svg.
void write_report_files(const MetricsReport& report, std::span<const EvalRow> rows,
                        const std::filesystem::path& dir, bool svg = false);

/// Prediction dump with standard deviations (not variances) per component.
std::string predictions_csv(std::span<const EvalRow> rows);

struct ComparisonRow {
  std::string method;
  std::size_t runs = 0;
  Metrics mean;
  Metrics std;  // sample standard deviation across runs, 0 for a single run
};

struct Comparison {
  std::string dataset_fingerprint;
  std::vector<ComparisonRow> rows;  // sorted by mean moment NLL
  /// method -> flight class -> mean over runs of the class metrics
  std::map<std::string, std::map<std::int64_t, Metrics>> per_flight_class;
  std::map<std::string, std::map<std::int64_t, Metrics>> per_unit;
};

/// Throws DataError if the reports were computed on different datasets or
/// the list is empty.
Comparison compare_reports(std::span<const MetricsReport> reports);
nlohmann::json to_json(const Comparison& c);
std::string comparison_csv(const Comparison& c);
/// method,group,<metrics> table of the per-group means.
std::string group_table_csv(const std::map<std::string, std::map<std::int64_t, Metrics>>& table,
                            const std::string& group_column);

/// Minimal SVG line chart of (x, y) series, for quick inspection.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series);

}  // namespace ruq
