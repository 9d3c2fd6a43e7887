#include "ruq/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

#include "ruq/error.hpp"

namespace ruq {

using ad::Tensor;
using nlohmann::json;

namespace {

constexpr std::uint64_t kInitTag = 0x696e6974ULL;
constexpr std::uint64_t kShuffleTag = 0x73687566ULL;
constexpr std::uint64_t kNoiseTag = 0x6e6f6973ULL;
constexpr std::uint64_t kValidTag = 0x76616c69ULL;
constexpr std::uint64_t kPretrainTag = 0x70726574ULL;
constexpr std::uint64_t kPoolTag = 0x706f6f6cULL;
constexpr std::size_t kReferenceEpochs = 500;

std::size_t base_patience(Method m) { return is_bnn(m) ? 20 : 50; }

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace

// ---- configuration ----

TrainConfig TrainConfig::defaults(Method m) {
  TrainConfig c;
  c.method = m;
  c.patience = base_patience(m);
  switch (m) {
    case Method::hnn:
    case Method::de:
      c.learning_rate = 0.001574;
      c.batch_size = 250;
      break;
    case Method::mcd:
      c.learning_rate = 0.000772;
      c.batch_size = 100;
      c.dropout_p = 0.241437;
      break;
    case Method::bnn_naive:
    case Method::bnn_lrt:
      c.learning_rate = 0.000857;
      c.batch_size = 100;
      c.prior_scale = 0.138793;
      c.q_scale = 0.001351;
      c.pretrain_epochs = 5;
      c.n_mc_train = 1;
      break;
    case Method::bnn_fo:
      c.learning_rate = 0.000948;
      c.batch_size = 100;
      c.prior_scale = 0.198768;
      c.q_scale = 0.000214;
      c.pretrain_epochs = 5;
      c.n_mc_train = 2;
      break;
    case Method::bnn_rad:
      c.learning_rate = 0.000956;
      c.batch_size = 100;
      c.prior_scale = 0.092516;
      c.q_scale = 0.001241;
      c.pretrain_epochs = 5;
      c.n_mc_train = 1;
      break;
  }
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("train." + key + ": " + why);
  };
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate", "must be positive");
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (max_epochs < 1) fail("max_epochs", "must be at least 1");
  if (n_mc_train < 1) fail("n_mc_train", "must be at least 1");
  if (n_mc_valid < 1) fail("n_mc_valid", "must be at least 1");
  if (hidden.empty()) fail("hidden", "at least one hidden layer is required");
  for (auto h : hidden) {
    if (h < 1) fail("hidden", "layer widths must be positive");
  }
  if (!(lambda >= 0.0)) fail("lambda", "must be non-negative");
  if (method == Method::mcd && !(dropout_p > 0.0 && dropout_p < 1.0)) fail("dropout_p", "must lie in (0, 1)");
  if (is_bnn(method)) {
    if (!(prior_scale > 0.0)) fail("prior_scale", "must be positive");
    if (!(q_scale > 0.0)) fail("q_scale", "must be positive");
    if (sampled_kl && method == Method::bnn_lrt) {
      fail("sampled_kl", "the local reparametrization sampler never draws weights");
    }
  }
}

TrainConfig with_epoch_budget(TrainConfig cfg, std::size_t max_epochs) {
  cfg.max_epochs = max_epochs;
  const double scaled = static_cast<double>(base_patience(cfg.method)) * static_cast<double>(max_epochs) /
                        static_cast<double>(kReferenceEpochs);
  cfg.patience = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(scaled)));
  return cfg;
}

json to_json(const TrainConfig& c) {
  return {{"method", method_tag(c.method)},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"pretrain_epochs", c.pretrain_epochs},
          {"n_mc_train", c.n_mc_train},
          {"n_mc_valid", c.n_mc_valid},
          {"seed", c.seed},
          {"prior_scale", c.prior_scale},
          {"q_scale", c.q_scale},
          {"dropout_p", c.dropout_p},
          {"lambda", c.lambda},
          {"hidden", c.hidden},
          {"kl_weighting", c.weighting == KlWeighting::geometric ? "geometric" : "uniform"},
          {"sampled_kl", c.sampled_kl},
          {"init_heads", c.init_heads}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("train section must be an object");
  const json known = to_json(c);
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) throw ConfigError("train: unknown key '" + item.key() + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const json::exception&) {
      throw ConfigError(std::string("train.") + key + ": wrong type");
    }
  };
  if (j.contains("method")) {
    std::string tag;
    get("method", tag);
    c.method = parse_method(tag);
  }
  get("learning_rate", c.learning_rate);
  get("batch_size", c.batch_size);
  get("max_epochs", c.max_epochs);
  get("patience", c.patience);
  get("pretrain_epochs", c.pretrain_epochs);
  get("n_mc_train", c.n_mc_train);
  get("n_mc_valid", c.n_mc_valid);
  get("seed", c.seed);
  get("prior_scale", c.prior_scale);
  get("q_scale", c.q_scale);
  get("dropout_p", c.dropout_p);
  get("lambda", c.lambda);
  get("hidden", c.hidden);
  get("sampled_kl", c.sampled_kl);
  get("init_heads", c.init_heads);
  if (j.contains("kl_weighting")) {
    std::string w;
    get("kl_weighting", w);
    if (w == "geometric") {
      c.weighting = KlWeighting::geometric;
    } else if (w == "uniform") {
      c.weighting = KlWeighting::uniform;
    } else {
      throw ConfigError("train.kl_weighting: expected geometric or uniform, got '" + w + "'");
    }
  }
  return c;
}

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,valid_loss\n";
  for (std::size_t e = 0; e < train_loss.size(); ++e) {
    out << e + 1 << ',' << train_loss[e] << ',' << valid_loss[e] << '\n';
  }
  return out.str();
}

// ---- Adam ----

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.size(), 0.0);
    s.v.emplace_back(p.size(), 0.0);
  }
  return s;
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.m[k].size() != params[k].size()) throw ShapeError("adam_step: state shape mismatch");
    for (double g : params[k].grad()) {
      if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient");
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].mutable_data();
    const auto grad = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
      value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

// ---- models ----

ModelSpec model_spec_for(const TrainConfig& cfg, std::size_t input_dim) {
  ModelSpec s;
  s.input_dim = input_dim;
  s.hidden = cfg.hidden;
  if (cfg.method == Method::mcd) {
    s.kind = ModelKind::dropout;
    s.dropout_p = cfg.dropout_p;
  } else if (is_bnn(cfg.method)) {
    s.kind = ModelKind::variational;
    s.sampler = sampler_for(cfg.method);
    s.prior_scale = cfg.prior_scale;
    s.q_scale = cfg.q_scale;
  }
  return s;
}

FunctionalModel make_model(const TrainConfig& cfg, std::size_t input_dim, std::span<const double> targets) {
  cfg.validate();
  ModelSpec spec = model_spec_for(cfg, input_dim);
  double mean = 0.0, sd = 1.0;
  if (cfg.init_heads && !targets.empty()) {
    long double s = 0.0L;
    for (double y : targets) s += y;
    mean = static_cast<double>(s / targets.size());
    long double ss = 0.0L;
    for (double y : targets) ss += (y - mean) * (y - mean);
    sd = std::sqrt(static_cast<double>(ss / targets.size()));
    if (!(sd > 0.0)) sd = 1.0;
    spec.target_shift = mean;
    spec.target_scale = sd;
  }
  Rng rng = Rng(cfg.seed).split(kInitTag);
  FunctionalModel model(spec, rng);
  if (cfg.init_heads && !targets.empty()) model.init_output_heads(mean, sd);
  return model;
}

void pretrain_functional(FunctionalModel& model, const WindowSet& train, const TrainConfig& cfg,
                         std::size_t epochs) {
  if (epochs == 0) return;
  if (train.empty()) throw DataError("pretraining needs a non-empty train split");
  FunctionalModel det = model.mean_model();
  auto params = det.parameters();
  AdamState state = AdamState::for_params(params);
  const Rng root = Rng(cfg.seed).split(kPretrainTag);
  const std::size_t n = train.size();
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = shuffled(n, root.split(e));
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::vector<std::size_t> rows(order.begin() + begin,
                                          order.begin() + std::min(n, begin + cfg.batch_size));
      const Tensor xb = train.x_rows(rows);
      const Tensor yb = train.y_rows(rows);
      ad::Tape tape;
      ad::TapeScope scope(tape);
      zero_grads(params);
      const Tensor loss = ad::sqrt(ad::mean(ad::square(yb - model_forward(det, xb).mu)));
      if (!std::isfinite(loss.item())) {
        throw NumericError("pretraining epoch " + std::to_string(e + 1) + ": non-finite loss");
      }
      tape.backward(loss);
      adam_step(params, state, cfg.learning_rate);
    }
  }
  model.load_means(det);
}

double validation_loss(const FunctionalModel& model, const WindowSet& valid, std::size_t n_train,
                       const TrainConfig& cfg) {
  if (valid.empty()) throw DataError("validation split is empty");
  const Tensor x = valid.x();
  const Tensor y = valid.y();
  if (!model.stochastic()) {
    const ModelOutput out = model_forward(model, x);
    return gaussian_nll(y, out.mu, out.var).item();
  }
  const Rng stream = Rng(cfg.seed).split(kValidTag);
  std::vector<NoiseBundle> draws;
  double nll = 0.0;
  for (std::size_t s = 0; s < cfg.n_mc_valid; ++s) {
    draws.push_back(draw_noise(model, x, stream.split(s)));
    const ModelOutput out = model_forward(model, x, draws.back());
    nll += gaussian_nll(y, out.mu, out.var).item();
  }
  nll /= static_cast<double>(cfg.n_mc_valid);
  if (model.spec().kind != ModelKind::variational) return nll;
  const double kl = model_kl(model, draws, cfg.sampled_kl).item();
  return kl / static_cast<double>(n_train) + nll;
}

TrainHistory train(FunctionalModel& model, const DatasetBundle& data, const TrainConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const WindowSet& train_set = data.split(Split::train);
  const WindowSet& valid_set = data.split(Split::valid);
  if (train_set.empty()) throw DataError("train split is empty");
  if (valid_set.empty()) throw DataError("validation split is empty");
  if (train_set.feature_dim() != model.spec().input_dim) {
    throw DataError("model expects " + std::to_string(model.spec().input_dim) + " features, data has " +
                    std::to_string(train_set.feature_dim()));
  }
  if (model.spec().kind == ModelKind::variational) pretrain_functional(model, train_set, cfg, cfg.pretrain_epochs);

  auto params = model.parameters();
  AdamState state = AdamState::for_params(params);
  const std::size_t n = train_set.size();
  const std::size_t M = (n + cfg.batch_size - 1) / cfg.batch_size;
  ElboConfig elbo{cfg.n_mc_train, M, cfg.weighting, cfg.sampled_kl};
  const Rng root(cfg.seed);
  const Rng shuffle_root = root.split(kShuffleTag);
  const Rng noise_root = root.split(kNoiseTag);

  TrainHistory h;
  FunctionalModel best = model;
  double best_valid = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto order = shuffled(n, shuffle_root.split(epoch));
    const Rng epoch_noise = noise_root.split(epoch);
    double total = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      const std::size_t begin = i * cfg.batch_size;
      const std::vector<std::size_t> rows(order.begin() + begin,
                                          order.begin() + std::min(n, begin + cfg.batch_size));
      const Tensor xb = train_set.x_rows(rows);
      const Tensor yb = train_set.y_rows(rows);
      const Rng batch_noise = epoch_noise.split(i);
      ad::Tape tape;
      ad::TapeScope scope(tape);
      zero_grads(params);
      Tensor loss;
      double contribution = 0.0;
      switch (model.spec().kind) {
        case ModelKind::deterministic: {
          const ModelOutput out = model_forward(model, xb);
          loss = gaussian_nll(yb, out.mu, out.var);
          contribution = loss.item() * static_cast<double>(rows.size());
          break;
        }
        case ModelKind::dropout: {
          loss = mcd_objective(model, xb, yb, cfg.lambda, draw_noise(model, xb, batch_noise));
          contribution = loss.item() * static_cast<double>(rows.size());
          break;
        }
        case ModelKind::variational: {
          std::vector<NoiseBundle> draws;
          for (std::size_t s = 0; s < cfg.n_mc_train; ++s) draws.push_back(draw_noise(model, xb, batch_noise.split(s)));
          loss = elbo_estimate(model, xb, yb, i, elbo, draws).loss;
          contribution = loss.item();
          break;
        }
      }
      if (!std::isfinite(loss.item())) {
        throw NumericError("epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(i + 1) +
                           ": non-finite training loss");
      }
      tape.backward(loss);
      try {
        adam_step(params, state, cfg.learning_rate);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch + 1) + ", batch " + std::to_string(i + 1) + ": " +
                           e.what());
      }
      total += contribution;
    }
    const double valid = validation_loss(model, valid_set, n, cfg);
    if (!std::isfinite(valid)) {
      throw NumericError("epoch " + std::to_string(epoch + 1) + ": non-finite validation loss");
    }
    h.train_loss.push_back(total / static_cast<double>(n));
    h.valid_loss.push_back(valid);
    if (valid < best_valid) {
      best_valid = valid;
      best = model;
      h.best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best > cfg.patience) {
      break;
    }
  }
  h.stop_epoch = h.train_loss.size();
  h.best_valid = best_valid;
  model = best;
  h.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return h;
}

TrainedModel train_model(const DatasetBundle& data, const TrainConfig& cfg) {
  const WindowSet& tr = data.split(Split::train);
  TrainedModel out{make_model(cfg, tr.feature_dim(), tr.rul), {}, cfg.seed};
  out.history = train(out.model, data, cfg);
  return out;
}

// ---- ensembles ----

std::uint64_t pool_seed(std::uint64_t base_seed, std::size_t k) {
  return hash_combine(hash_combine(base_seed, kPoolTag), k);
}

std::vector<TrainedModel> train_hnn_pool(const DatasetBundle& data, const TrainConfig& cfg, std::size_t k_pool,
                                         std::size_t threads) {
  if (k_pool < 1) throw ConfigError("the ensemble pool needs at least one model");
  TrainConfig member_cfg = cfg;
  member_cfg.method = Method::hnn;
  std::vector<TrainedModel> pool(k_pool);
  auto run = [&](std::size_t k) {
    TrainConfig c = member_cfg;
    c.seed = pool_seed(cfg.seed, k);
    pool[k] = train_model(data, c);
  };
  if (threads <= 1) {
    for (std::size_t k = 0; k < k_pool; ++k) run(k);
    return pool;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(k_pool);
  std::vector<std::thread> workers;
  for (std::size_t t = 0; t < std::min(threads, k_pool); ++t) {
    workers.emplace_back([&] {
      for (std::size_t k = next++; k < k_pool; k = next++) {
        try {
          run(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return pool;
}

Ensemble assemble_ensemble(const std::vector<TrainedModel>& pool, std::size_t k_members, std::uint64_t subset_seed) {
  if (k_members < 1) throw ConfigError("an ensemble needs at least one member");
  if (k_members > pool.size()) {
    throw ConfigError("cannot pick " + std::to_string(k_members) + " members from a pool of " +
                      std::to_string(pool.size()));
  }
  auto idx = shuffled(pool.size(), Rng(subset_seed));
  idx.resize(k_members);
  std::sort(idx.begin(), idx.end());
  Ensemble e;
  for (auto k : idx) {
    e.members.push_back(pool[k].model);
    e.member_seeds.push_back(pool[k].seed);
  }
  return e;
}

Ensemble train_ensemble(std::size_t k_pool, std::size_t k_members, const DatasetBundle& data, const TrainConfig& cfg,
                        std::uint64_t subset_seed, std::size_t threads) {
  if (k_members > k_pool) {
    throw ConfigError("k_members (" + std::to_string(k_members) + ") exceeds k_pool (" + std::to_string(k_pool) + ")");
  }
  return assemble_ensemble(train_hnn_pool(data, cfg, k_pool, threads), k_members, subset_seed);
}

// ---- sweep ----

std::vector<SweepTrial> random_sweep(const DatasetBundle& data, const TrainConfig& base, std::size_t trials,
                                     std::uint64_t seed) {
  Rng rng(seed);
  auto log_uniform = [&](double lo, double hi) { return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * rng.uniform()); };
  constexpr std::size_t kBatches[] = {64, 100, 128, 250};
  std::vector<SweepTrial> out;
  for (std::size_t t = 0; t < trials; ++t) {
    TrainConfig c = base;
    c.seed = hash_combine(seed, t);
    c.learning_rate = log_uniform(1e-4, 1e-2);
    c.batch_size = kBatches[rng.below(4)];
    if (c.method == Method::mcd) c.dropout_p = 0.05 + 0.45 * rng.uniform();
    if (is_bnn(c.method)) {
      c.prior_scale = log_uniform(0.01, 1.0);
      c.q_scale = log_uniform(1e-4, 1e-2);
    }
    const Method m = c.method == Method::de ? Method::hnn : c.method;
    TrainConfig run = c;
    run.method = m;
    const TrainedModel r = train_model(data, run);
    out.push_back({c, r.history.best_valid});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.best_valid < b.best_valid; });
  return out;
}

}  // namespace ruq
