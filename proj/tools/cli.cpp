#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "ruq/error.hpp"
#include "ruq/predictors.hpp"

namespace ruq::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kPredictTag = 0x70726564ULL;

std::size_t get_count(const json& j, const std::string& where) {
  if (!j.is_number_integer() || j.get<std::int64_t>() < 0) {
    throw ConfigError(where + ": expected a non-negative integer");
  }
  return j.get<std::size_t>();
}

bool get_bool(const json& j, const std::string& where) {
  if (!j.is_boolean()) throw ConfigError(where + ": expected true or false");
  return j.get<bool>();
}

std::string get_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError(where + ": expected a string");
  return j.get<std::string>();
}

std::optional<Method> method_for_key(const std::string& key) {
  for (Method m : all_methods()) {
    if (key == method_tag(m)) return m;
  }
  return std::nullopt;
}

EnsembleSettings parse_ensemble(const json& j) {
  if (!j.is_object()) throw ConfigError("train.ensemble: expected an object");
  EnsembleSettings e;
  for (const auto& [key, value] : j.items()) {
    const std::string where = "train.ensemble." + key;
    if (key == "pool") {
      e.pool = get_count(value, where);
    } else if (key == "members") {
      e.members = get_count(value, where);
    } else if (key == "threads") {
      e.threads = get_count(value, where);
    } else {
      throw ConfigError("train.ensemble: unknown key '" + key + "'");
    }
  }
  if (e.pool < 1 || e.members < 1) throw ConfigError("train.ensemble: pool and members must be at least 1");
  if (e.members > e.pool) throw ConfigError("train.ensemble.members: exceeds the pool size");
  if (e.threads < 1) throw ConfigError("train.ensemble.threads: must be at least 1");
  return e;
}

EvaluateSection parse_evaluate(const json& j) {
  if (!j.is_object()) throw ConfigError("evaluate: expected an object");
  EvaluateSection e;
  for (const auto& [key, value] : j.items()) {
    const std::string where = "evaluate." + key;
    if (key == "mc_samples") {
      e.mc_samples = get_count(value, where);
    } else if (key == "split") {
      e.split = parse_split(get_string(value, where));
    } else if (key == "seed") {
      e.seed = get_count(value, where);
    } else if (key == "calibration_levels") {
      e.settings.calibration_levels = get_count(value, where);
    } else if (key == "confidence_levels") {
      e.settings.confidence_levels = get_count(value, where);
    } else if (key == "lifetime_bins") {
      e.settings.lifetime_bins = get_count(value, where);
    } else if (key == "svg") {
      e.svg = get_bool(value, where);
    } else {
      throw ConfigError("evaluate: unknown key '" + key + "'");
    }
  }
  if (e.mc_samples < 1) throw ConfigError("evaluate.mc_samples: must be at least 1");
  if (e.settings.calibration_levels < 2) throw ConfigError("evaluate.calibration_levels: must be at least 2");
  if (e.settings.confidence_levels < 2) throw ConfigError("evaluate.confidence_levels: must be at least 2");
  if (e.settings.lifetime_bins < 1) throw ConfigError("evaluate.lifetime_bins: must be at least 1");
  return e;
}

void check_train_section(const json& j) {
  if (!j.is_object()) throw ConfigError("train: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (key == "ensemble") continue;
    if (key == "method") throw ConfigError("train.method: select the method with --method");
    if (method_for_key(key)) {
      if (!value.is_object()) throw ConfigError("train." + key + ": expected an object");
      if (value.contains("method")) throw ConfigError("train." + key + ".method: not allowed here");
      train_config_from_json(value, TrainConfig{});
    } else {
      train_config_from_json(json{{key, value}}, TrainConfig{});
    }
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

fs::path checkpoint_path(const fs::path& p) { return fs::is_directory(p) ? p / "checkpoint.json" : p; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

RunConfig config_of(const Common& c) { return c.config.empty() ? RunConfig{} : load_run_config(c.config); }

// ---- commands ----

int cmd_generate(const Common& c, std::ostream& out) {
  ScenarioConfig scenario;
  std::uint64_t seed = 0;
  if (!c.config.empty()) {
    const RunConfig rc = load_run_config(c.config);
    if (!rc.scenario) throw ConfigError("config: missing section 'scenario'");
    scenario = *rc.scenario;
    seed = rc.scenario_seed.value_or(0);
  }
  if (c.seed) seed = *c.seed;
  const auto t0 = std::chrono::steady_clock::now();
  const DatasetBundle bundle = generate_scenario(scenario, seed);
  make_dir(c.out);
  save_dataset(bundle, c.out);
  out << "generated " << bundle.units.size() << " units: train " << bundle.split(Split::train).size()
      << ", valid " << bundle.split(Split::valid).size() << ", test " << bundle.split(Split::test).size()
      << " windows; fingerprint " << bundle.fingerprint() << '\n';
  out << "elapsed " << std::fixed << std::setprecision(2) << seconds_since(t0) << " s\n";
  return kOk;
}

struct TrainOptions {
  std::string method;
  std::string data;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> pool;
  std::optional<std::size_t> members;
  std::optional<std::size_t> threads;
};

int cmd_train(const Common& c, const TrainOptions& o, std::ostream& out) {
  if (o.method.empty()) throw ConfigError("--method is required (valid: hnn, mcd, de, bnn-naive, bnn-lrt, bnn-fo, bnn-rad)");
  const Method method = parse_method(o.method);
  const RunConfig rc = config_of(c);
  const TrainConfig cfg = resolve_train_config(rc, method, c.seed, o.epochs);
  EnsembleSettings ens = rc.ensemble;
  if (o.pool) ens.pool = *o.pool;
  if (o.members) ens.members = *o.members;
  if (o.threads) ens.threads = *o.threads;

  const DatasetBundle data = load_dataset(o.data);
  make_dir(c.out);
  const fs::path dir(c.out);
  const auto t0 = std::chrono::steady_clock::now();
  Checkpoint ckpt;
  ckpt.method = method;
  ckpt.dataset_fingerprint = data.fingerprint();
  json resolved = to_json(cfg);
  if (method == Method::de) {
    if (ens.members > ens.pool) {
      throw ConfigError("members (" + std::to_string(ens.members) + ") exceeds pool (" + std::to_string(ens.pool) +
                        ")");
    }
    const auto pool = train_hnn_pool(data, cfg, ens.pool, ens.threads);
    for (std::size_t k = 0; k < pool.size(); ++k) {
      write_text(dir / ("history_pool" + std::to_string(k) + ".csv"), pool[k].history.to_csv());
      out << "pool member " << k << ": " << pool[k].history.stop_epoch << " epochs, best "
          << pool[k].history.best_epoch << ", valid " << pool[k].history.best_valid << '\n';
    }
    Ensemble e = assemble_ensemble(pool, ens.members, cfg.seed);
    ckpt.models = std::move(e.members);
    ckpt.seeds = std::move(e.member_seeds);
    resolved["ensemble"] = {{"pool", ens.pool}, {"members", ens.members}};
  } else {
    TrainedModel r = train_model(data, cfg);
    write_text(dir / "history.csv", r.history.to_csv());
    out << method_tag(method) << ": " << r.history.stop_epoch << " epochs, best " << r.history.best_epoch
        << ", valid " << r.history.best_valid << '\n';
    ckpt.models.push_back(std::move(r.model));
    ckpt.seeds.push_back(r.seed);
  }
  save_checkpoint(dir / "checkpoint.json", ckpt);
  write_text(dir / "train_config.json", resolved.dump(2) + "\n");
  out << "elapsed " << std::fixed << std::setprecision(2) << seconds_since(t0) << " s\n";
  return kOk;
}

struct PredictOptions {
  std::string model;
  std::string data;
  std::string split;
  std::optional<std::size_t> mc_samples;
  bool svg = false;
};

struct Evaluated {
  MetricsReport report;
  std::vector<EvalRow> rows;
};

Evaluated evaluate_checkpoint(const Common& c, const PredictOptions& o, std::ostream& err) {
  const RunConfig rc = config_of(c);
  EvaluateSection ev = rc.evaluate;
  if (!o.split.empty()) ev.split = parse_split(o.split);
  if (o.mc_samples) ev.mc_samples = *o.mc_samples;
  if (ev.mc_samples < 1) throw ConfigError("--mc-samples: must be at least 1");

  const Checkpoint ckpt = load_checkpoint(checkpoint_path(o.model));
  const DatasetBundle data = load_dataset(o.data);
  const WindowSet& windows = data.split(ev.split);
  if (windows.empty()) throw DataError(std::string("split '") + split_name(ev.split) + "' is empty");
  const std::size_t expected = ckpt.models.front().spec().input_dim;
  if (expected != windows.feature_dim()) {
    throw DataError("checkpoint expects " + std::to_string(expected) + " features, dataset has " +
                    std::to_string(windows.feature_dim()) + " (" + std::to_string(windows.channels) +
                    " channels x window " + std::to_string(windows.window_length) + ")");
  }
  if (ckpt.dataset_fingerprint != data.fingerprint()) {
    err << "warning: checkpoint was trained on dataset " << ckpt.dataset_fingerprint << ", evaluating on "
        << data.fingerprint() << '\n';
  }
  const std::uint64_t seed = c.seed ? *c.seed : ev.seed.value_or(ckpt.seeds.empty() ? 0 : ckpt.seeds.front());
  const PredictionSet pred = predict(ckpt.method, ckpt.models, windows.x(), ev.mc_samples, Rng(seed).split(kPredictTag));
  if (pred.passes_forced) {
    err << "warning: " << method_tag(ckpt.method) << " is deterministic; using 1 pass instead of "
        << ev.mc_samples << '\n';
  }
  Evaluated out;
  out.rows = make_eval_rows(data, windows, pred);
  out.report = build_report(out.rows, ev.settings);
  out.report.method = method_tag(ckpt.method);
  out.report.seed = seed;
  out.report.dataset_fingerprint = data.fingerprint();
  out.report.split = split_name(ev.split);
  out.report.mc_samples = pred.samples.passes;
  out.report.nominal_decomposition = pred.nominal_decomposition;
  return out;
}

int cmd_predict(const Common& c, const PredictOptions& o, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  const Evaluated e = evaluate_checkpoint(c, o, err);
  make_dir(c.out);
  write_text(fs::path(c.out) / "predictions.csv", predictions_csv(e.rows));
  out << "predicted " << e.rows.size() << " rows with " << e.report.mc_samples << " passes\n";
  out << "elapsed " << std::fixed << std::setprecision(2) << seconds_since(t0) << " s\n";
  return kOk;
}

int cmd_evaluate(const Common& c, const PredictOptions& o, std::ostream& out, std::ostream& err) {
  const auto t0 = std::chrono::steady_clock::now();
  const Evaluated e = evaluate_checkpoint(c, o, err);
  const bool svg = o.svg || config_of(c).evaluate.svg;
  make_dir(c.out);
  write_report_files(e.report, e.rows, c.out, svg);
  const Metrics& m = e.report.overall;
  out << e.report.method << " on " << e.report.split << ": rmse " << m.rmse << ", nll " << m.nll_moment
      << ", rmsce " << m.rmsce << ", sharpness " << m.sharpness << '\n';
  out << "elapsed " << std::fixed << std::setprecision(2) << seconds_since(t0) << " s\n";
  return kOk;
}

int cmd_compare(const Common& c, const std::vector<std::string>& positional, std::ostream& out) {
  const RunConfig rc = config_of(c);
  std::vector<fs::path> paths(rc.compare_reports);
  for (const auto& p : positional) paths.emplace_back(p);
  if (paths.empty()) throw ConfigError("compare: no reports given");
  std::vector<MetricsReport> reports;
  for (const auto& p : paths) {
    const fs::path file = fs::is_directory(p) ? p / "report.json" : p;
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot read report " + file.string());
    try {
      reports.push_back(report_from_json(json::parse(in)));
    } catch (const json::exception& e) {
      throw DataError("report " + file.string() + ": " + e.what());
    }
  }
  const Comparison cmp = compare_reports(reports);
  make_dir(c.out);
  const fs::path dir(c.out);
  write_text(dir / "comparison.json", to_json(cmp).dump(2) + "\n");
  const std::string table = comparison_csv(cmp);
  write_text(dir / "comparison.csv", table);
  write_text(dir / "per_flight_class.csv", group_table_csv(cmp.per_flight_class, "flight_class"));
  write_text(dir / "per_unit.csv", group_table_csv(cmp.per_unit, "unit"));
  out << table;
  return kOk;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config: return kConfigFailure;
    case ErrorKind::data: return kDataFailure;
    case ErrorKind::numeric: return kNumericFailure;
    case ErrorKind::io: return kIoFailure;
  }
  return kUnexpected;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig rc;
  for (const auto& [key, value] : doc.items()) {
    if (key == "scenario") {
      if (!value.is_object()) throw ConfigError("scenario: expected an object");
      json s = value;
      if (s.contains("seed")) {
        rc.scenario_seed = get_count(s["seed"], "scenario.seed");
        s.erase("seed");
      }
      rc.scenario = scenario_from_json(s);
    } else if (key == "train") {
      check_train_section(value);
      rc.train = value;
      if (value.contains("ensemble")) rc.ensemble = parse_ensemble(value.at("ensemble"));
    } else if (key == "evaluate") {
      rc.evaluate = parse_evaluate(value);
    } else if (key == "compare") {
      if (!value.is_object()) throw ConfigError("compare: expected an object");
      for (const auto& [k, v] : value.items()) {
        if (k != "reports") throw ConfigError("compare: unknown key '" + k + "'");
        if (!v.is_array()) throw ConfigError("compare.reports: expected a list of paths");
        for (std::size_t i = 0; i < v.size(); ++i) {
          const std::string where = "compare.reports[" + std::to_string(i) + "]";
          const fs::path p = get_string(v[i], where);
          if (!fs::exists(p)) throw ConfigError(where + ": '" + p.string() + "' does not exist");
          rc.compare_reports.push_back(p);
        }
      }
    } else {
      throw ConfigError("config: unknown section '" + key + "'");
    }
  }
  return rc;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(doc);
}

TrainConfig resolve_train_config(const RunConfig& rc, Method method, std::optional<std::uint64_t> seed,
                                 std::optional<std::size_t> epochs) {
  json merged = json::object();
  for (const auto& [key, value] : rc.train.items()) {
    if (key != "ensemble" && !method_for_key(key)) merged[key] = value;
  }
  if (rc.train.contains(method_tag(method))) {
    for (const auto& [key, value] : rc.train.at(method_tag(method)).items()) merged[key] = value;
  }
  TrainConfig c = TrainConfig::defaults(method);
  std::optional<std::size_t> budget = epochs;
  if (!budget && merged.contains("max_epochs")) budget = get_count(merged["max_epochs"], "train.max_epochs");
  if (budget) c = with_epoch_budget(c, *budget);
  merged.erase("max_epochs");
  c = train_config_from_json(merged, c);
  c.method = method;
  if (seed) c.seed = *seed;
  c.validate();
  return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Remaining-useful-life regression with uncertainty quantification"};
  app.require_subcommand(1);
  Common common;
  TrainOptions train;
  PredictOptions pred;
  std::vector<std::string> reports;

  const auto add_common = [&](CLI::App* sub, bool needs_out) {
    sub->add_option("--config", common.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Seed (overrides the configuration)");
    auto* o = sub->add_option("--out", common.out, "Output directory");
    if (needs_out) o->required();
  };
  auto* gen = app.add_subcommand("generate", "Generate a synthetic run-to-failure dataset");
  add_common(gen, true);

  auto* tr = app.add_subcommand("train", "Train one model, or an HNN pool assembled into a deep ensemble");
  add_common(tr, true);
  tr->add_option("--method", train.method, "hnn, mcd, de, bnn-naive, bnn-lrt, bnn-fo or bnn-rad");
  tr->add_option("--data", train.data, "Dataset directory")->required();
  tr->add_option("--epochs", train.epochs, "Epoch budget; rescales the default patience");
  tr->add_option("--pool", train.pool, "Deep ensemble: number of trained networks");
  tr->add_option("--members", train.members, "Deep ensemble: number of networks kept");
  tr->add_option("--threads", train.threads, "Deep ensemble: concurrent trainings");

  auto* pr = app.add_subcommand("predict", "Write the predictive distribution of a split");
  auto* ev = app.add_subcommand("evaluate", "Predict and compute the metrics report of a split");
  for (auto* sub : {pr, ev}) {
    add_common(sub, true);
    sub->add_option("--model", pred.model, "Checkpoint file or training output directory")->required();
    sub->add_option("--data", pred.data, "Dataset directory")->required();
    sub->add_option("--split", pred.split, "train, valid or test (default test)");
    sub->add_option("--mc-samples", pred.mc_samples, "Stochastic forward passes");
  }
  ev->add_flag("--svg", pred.svg, "Also write SVG charts");

  auto* cmp = app.add_subcommand("compare", "Aggregate reports across methods and seeds");
  add_common(cmp, true);
  cmp->add_option("reports", reports, "Report files or evaluation output directories");

  std::vector<const char*> argv{"ruq"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigFailure;
  }

  try {
    if (gen->parsed()) return cmd_generate(common, out);
    if (tr->parsed()) return cmd_train(common, train, out);
    if (pr->parsed()) return cmd_predict(common, pred, out, err);
    if (ev->parsed()) return cmd_evaluate(common, pred, out, err);
    if (cmp->parsed()) return cmd_compare(common, reports, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUnexpected;
  }
  return kConfigFailure;
}

}  // namespace ruq::cli
