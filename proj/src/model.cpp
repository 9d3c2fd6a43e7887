#include "ruq/model.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ruq/error.hpp"

namespace ruq {

using ad::Tensor;
using nlohmann::json;

namespace {

constexpr std::uint64_t kRowStreamTag = 0x726f772d6e6f6973ULL;

const std::vector<Method> kMethods = {Method::hnn,       Method::mcd,     Method::de,
                                      Method::bnn_naive, Method::bnn_lrt, Method::bnn_fo,
                                      Method::bnn_rad};

bool same_tensor(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

void copy_values(const Tensor& from, Tensor& to) {
  if (from.shape() != to.shape()) {
    throw ShapeError("cannot copy " + ad::to_string(from.shape()) + " into " +
                     ad::to_string(to.shape()));
  }
  std::copy(from.data().begin(), from.data().end(), to.mutable_data().begin());
}

std::size_t layer_input(const ModelSpec& spec, std::size_t l) {
  const std::size_t h = spec.hidden.size();
  if (l < h) return l == 0 ? spec.input_dim : spec.hidden[l - 1];
  return h == 0 ? spec.input_dim : spec.hidden.back();
}

std::size_t layer_output(const ModelSpec& spec, std::size_t l) {
  return l < spec.hidden.size() ? spec.hidden[l] : 1;
}

}  // namespace

const char* method_tag(Method m) {
  switch (m) {
    case Method::hnn: return "hnn";
    case Method::mcd: return "mcd";
    case Method::de: return "de";
    case Method::bnn_naive: return "bnn-naive";
    case Method::bnn_lrt: return "bnn-lrt";
    case Method::bnn_fo: return "bnn-fo";
    case Method::bnn_rad: return "bnn-rad";
  }
  return "?";
}

Method parse_method(const std::string& tag) {
  for (Method m : kMethods) {
    if (tag == method_tag(m)) return m;
  }
  throw ConfigError("unknown method '" + tag +
                    "' (valid: hnn, mcd, de, bnn-naive, bnn-lrt, bnn-fo, bnn-rad)");
}

const std::vector<Method>& all_methods() { return kMethods; }

bool is_bnn(Method m) {
  return m == Method::bnn_naive || m == Method::bnn_lrt || m == Method::bnn_fo ||
         m == Method::bnn_rad;
}

Sampler sampler_for(Method m) {
  switch (m) {
    case Method::bnn_naive: return Sampler::naive;
    case Method::bnn_lrt: return Sampler::lrt;
    case Method::bnn_fo: return Sampler::flipout;
    case Method::bnn_rad: return Sampler::radial;
    default: throw ConfigError(std::string("method ") + method_tag(m) + " has no variational sampler");
  }
}

const char* kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::deterministic: return "deterministic";
    case ModelKind::dropout: return "dropout";
    case ModelKind::variational: return "variational";
  }
  return "?";
}

ModelKind parse_kind(const std::string& name) {
  if (name == "deterministic") return ModelKind::deterministic;
  if (name == "dropout") return ModelKind::dropout;
  if (name == "variational") return ModelKind::variational;
  throw DataError("unknown model kind '" + name + "'");
}

FunctionalModel::FunctionalModel(ModelSpec spec, Rng& rng) : spec_(std::move(spec)) {
  if (spec_.input_dim == 0) throw ConfigError("model input dimension must be positive");
  for (std::size_t w : spec_.hidden) {
    if (w == 0) throw ConfigError("hidden layer widths must be positive");
  }
  if (spec_.kind == ModelKind::dropout) validate_dropout_p(spec_.dropout_p);
  if (!(spec_.target_scale > 0.0) || !std::isfinite(spec_.target_shift)) {
    throw ConfigError("target scale must be positive and the shift finite");
  }
  for (std::size_t l = 0; l < dense_count(); ++l) {
    const std::size_t in = layer_input(spec_, l);
    const std::size_t out = layer_output(spec_, l);
    if (spec_.kind == ModelKind::variational) {
      variational_.push_back(
          VariationalLinear::init(in, out, spec_.prior_scale, spec_.q_scale, spec_.sampler, rng));
    } else {
      linear_.push_back(LinearLayer::init(in, out, rng));
    }
  }
  if (spec_.kind == ModelKind::dropout) {
    for (std::size_t w : spec_.hidden) dropouts_.push_back({spec_.dropout_p, w});
  }
}

FunctionalModel::FunctionalModel(const FunctionalModel& other)
    : spec_(other.spec_), dropouts_(other.dropouts_) {
  for (const auto& l : other.linear_) linear_.push_back({l.W.clone(), l.b.clone()});
  for (const auto& v : other.variational_) {
    VariationalLinear c = v;
    c.mu_W = v.mu_W.clone();
    c.rho_W = v.rho_W.clone();
    c.mu_b = v.mu_b.clone();
    c.rho_b = v.rho_b.clone();
    variational_.push_back(std::move(c));
  }
}

FunctionalModel& FunctionalModel::operator=(const FunctionalModel& other) {
  if (this != &other) {
    FunctionalModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::vector<Tensor> FunctionalModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : linear_) {
    out.push_back(l.W);
    out.push_back(l.b);
  }
  for (const auto& v : variational_) {
    out.push_back(v.mu_W);
    out.push_back(v.rho_W);
    out.push_back(v.mu_b);
    out.push_back(v.rho_b);
  }
  return out;
}

std::vector<Tensor> FunctionalModel::weight_matrices() const {
  std::vector<Tensor> out;
  for (const auto& l : linear_) out.push_back(l.W);
  for (const auto& v : variational_) out.push_back(v.mu_W);
  return out;
}

std::size_t FunctionalModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.size();
  return n;
}

FunctionalModel FunctionalModel::mean_model() const {
  FunctionalModel m;
  m.spec_ = spec_;
  m.spec_.kind = ModelKind::deterministic;
  for (const auto& l : linear_) m.linear_.push_back({l.W.clone(), l.b.clone()});
  for (const auto& v : variational_) m.linear_.push_back({v.mu_W.clone(), v.mu_b.clone()});
  return m;
}

void FunctionalModel::load_means(const FunctionalModel& det) {
  if (det.linear_.size() != dense_count()) {
    throw ShapeError("mean transfer needs a deterministic model with matching layers");
  }
  for (std::size_t l = 0; l < dense_count(); ++l) {
    if (spec_.kind == ModelKind::variational) {
      copy_values(det.linear_[l].W, variational_[l].mu_W);
      copy_values(det.linear_[l].b, variational_[l].mu_b);
    } else {
      copy_values(det.linear_[l].W, linear_[l].W);
      copy_values(det.linear_[l].b, linear_[l].b);
    }
  }
}

void FunctionalModel::set_rho(double rho) {
  for (auto& v : variational_) {
    for (double& r : v.rho_W.mutable_data()) r = rho;
    for (double& r : v.rho_b.mutable_data()) r = rho;
  }
}

void FunctionalModel::init_output_heads(double mean, double std) {
  if (!(std > 0.0)) throw ConfigError("head initialization needs a positive scale");
  const std::size_t h = hidden_count();
  Tensor mean_bias = spec_.kind == ModelKind::variational ? variational_[h].mu_b : linear_[h].b;
  Tensor scale_bias =
      spec_.kind == ModelKind::variational ? variational_[h + 1].mu_b : linear_[h + 1].b;
  mean_bias.mutable_data()[0] = (mean - spec_.target_shift) / spec_.target_scale;
  scale_bias.mutable_data()[0] = ad::softplus_inverse(std / spec_.target_scale);
}

bool FunctionalModel::same_values(const FunctionalModel& other) const {
  if (!(spec_ == other.spec_)) return false;
  const auto a = parameters();
  const auto b = other.parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_tensor(a[i], b[i])) return false;
  }
  return true;
}

namespace {

Tensor dense_forward(const FunctionalModel& model, std::size_t l, const Tensor& x,
                     const NoiseBundle& noise) {
  if (model.spec().kind != ModelKind::variational) return model.linear()[l].forward(x);
  const VariationalLinear& layer = model.variational()[l];
  if (noise.layers.size() != model.dense_count()) {
    throw ConfigError("noise bundle lacks draws for variational layer " + std::to_string(l));
  }
  const LayerNoise& n = noise.layers[l];
  switch (layer.sampler) {
    case Sampler::naive:
      if (const auto* w = std::get_if<WeightNoise>(&n)) return forward_naive(layer, x, *w);
      break;
    case Sampler::lrt:
      if (const auto* w = std::get_if<LocalNoise>(&n)) return forward_lrt(layer, x, *w);
      break;
    case Sampler::flipout:
      if (const auto* w = std::get_if<FlipoutNoise>(&n)) return forward_flipout(layer, x, *w);
      break;
    case Sampler::radial:
      if (const auto* w = std::get_if<RadialNoise>(&n)) return forward_radial(layer, x, *w);
      break;
  }
  throw ConfigError(std::string("missing ") + sampler_name(layer.sampler) +
                    " noise for variational layer " + std::to_string(l));
}

}  // namespace

ModelOutput model_forward(const FunctionalModel& model, const Tensor& x, const NoiseBundle& noise) {
  const ModelSpec& spec = model.spec();
  if (x.rank() != 2 || x.cols() != spec.input_dim) {
    throw ShapeError("model input: expected [n," + std::to_string(spec.input_dim) + "], got " +
                     ad::to_string(x.shape()));
  }
  if (spec.kind == ModelKind::dropout && noise.masks.size() != model.hidden_count()) {
    throw ConfigError("noise bundle lacks dropout masks");
  }
  Tensor h = x;
  for (std::size_t l = 0; l < model.hidden_count(); ++l) {
    h = ad::relu(dense_forward(model, l, h, noise));
    if (spec.kind == ModelKind::dropout) h = forward_dropout(model.dropouts()[l], h, noise.masks[l]);
  }
  const std::size_t head = model.hidden_count();
  ModelOutput out;
  out.mu = dense_forward(model, head, h, noise);
  out.var = ad::square(softplus_scale(dense_forward(model, head + 1, h, noise)));
  if (spec.target_scale != 1.0) {
    out.mu = out.mu * spec.target_scale;
    out.var = out.var * (spec.target_scale * spec.target_scale);
  }
  if (spec.target_shift != 0.0) out.mu = out.mu + spec.target_shift;
  return out;
}

NoiseBundle draw_noise(const FunctionalModel& model, const Tensor& x, const Rng& stream) {
  NoiseBundle bundle;
  const ModelSpec& spec = model.spec();
  if (spec.kind == ModelKind::deterministic) return bundle;
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();

  // Per-example buffers, filled row by row from the row-keyed stream.
  struct RowBuffers {
    std::vector<double> a, b, c;
  };
  std::vector<RowBuffers> rowbuf;

  if (spec.kind == ModelKind::dropout) {
    rowbuf.resize(model.hidden_count());
    for (std::size_t l = 0; l < model.hidden_count(); ++l) rowbuf[l].a.resize(n * spec.hidden[l]);
  } else {
    rowbuf.resize(model.dense_count());
    for (std::size_t l = 0; l < model.dense_count(); ++l) {
      const auto& layer = model.variational()[l];
      if (layer.sampler == Sampler::lrt) {
        rowbuf[l].a.resize(n * layer.out());
      } else if (layer.sampler == Sampler::flipout) {
        rowbuf[l].a.resize(n * layer.out());
        rowbuf[l].b.resize(n * layer.in());
        rowbuf[l].c.resize(n * layer.out());
      }
    }
  }

  const Rng rows = stream.split(kRowStreamTag);
  const auto xs = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    Rng rr = rows.split(hash_row(xs.subspan(r * d, d)));
    if (spec.kind == ModelKind::dropout) {
      const double keep = 1.0 - spec.dropout_p;
      for (std::size_t l = 0; l < model.hidden_count(); ++l) {
        const std::size_t w = spec.hidden[l];
        for (std::size_t j = 0; j < w; ++j) rowbuf[l].a[r * w + j] = rr.uniform() < keep ? 1.0 : 0.0;
      }
      continue;
    }
    for (std::size_t l = 0; l < model.dense_count(); ++l) {
      const auto& layer = model.variational()[l];
      const std::size_t in = layer.in();
      const std::size_t out = layer.out();
      if (layer.sampler == Sampler::lrt) {
        for (std::size_t j = 0; j < out; ++j) rowbuf[l].a[r * out + j] = rr.normal();
      } else if (layer.sampler == Sampler::flipout) {
        for (std::size_t j = 0; j < out; ++j) rowbuf[l].a[r * out + j] = rr.sign();
        for (std::size_t j = 0; j < in; ++j) rowbuf[l].b[r * in + j] = rr.sign();
        for (std::size_t j = 0; j < out; ++j) rowbuf[l].c[r * out + j] = rr.normal();
      }
    }
  }

  if (spec.kind == ModelKind::dropout) {
    for (std::size_t l = 0; l < model.hidden_count(); ++l) {
      bundle.masks.push_back({Tensor({n, spec.hidden[l]}, std::move(rowbuf[l].a))});
    }
    return bundle;
  }
  for (std::size_t l = 0; l < model.dense_count(); ++l) {
    const auto& layer = model.variational()[l];
    Rng shared = stream.split(l);
    switch (layer.sampler) {
      case Sampler::naive:
        bundle.layers.emplace_back(draw_weight_noise(layer.in(), layer.out(), shared));
        break;
      case Sampler::radial:
        bundle.layers.emplace_back(draw_radial_noise(layer.in(), layer.out(), shared));
        break;
      case Sampler::lrt:
        bundle.layers.emplace_back(LocalNoise{Tensor({n, layer.out()}, std::move(rowbuf[l].a))});
        break;
      case Sampler::flipout: {
        FlipoutNoise f;
        f.eps_W = draw_weight_noise(layer.in(), layer.out(), shared).eps_W;
        f.sign_out = Tensor({n, layer.out()}, std::move(rowbuf[l].a));
        f.sign_in = Tensor({n, layer.in()}, std::move(rowbuf[l].b));
        f.eps_b = Tensor({n, layer.out()}, std::move(rowbuf[l].c));
        bundle.layers.emplace_back(std::move(f));
        break;
      }
    }
  }
  return bundle;
}

// ---- checkpoints ----

namespace {

json tensor_json(const Tensor& t) { return json(std::vector<double>(t.data().begin(), t.data().end())); }

Tensor tensor_from(const json& j, const ad::Shape& shape, const char* what) {
  if (!j.is_array()) throw DataError(std::string("checkpoint field ") + what + " is not an array");
  std::vector<double> v = j.get<std::vector<double>>();
  if (v.size() != ad::element_count(shape)) {
    throw DataError(std::string("checkpoint field ") + what + " has " + std::to_string(v.size()) +
                    " values, expected " + std::to_string(ad::element_count(shape)));
  }
  return Tensor(shape, std::move(v), true);
}

json spec_json(const ModelSpec& s) {
  return {{"input_dim", s.input_dim},     {"hidden", s.hidden},
          {"kind", kind_name(s.kind)},    {"dropout_p", s.dropout_p},
          {"sampler", sampler_name(s.sampler)}, {"prior_scale", s.prior_scale},
          {"q_scale", s.q_scale},         {"target_shift", s.target_shift},
          {"target_scale", s.target_scale}};
}

ModelSpec spec_from(const json& j) {
  ModelSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  s.kind = parse_kind(j.at("kind").get<std::string>());
  s.dropout_p = j.at("dropout_p").get<double>();
  s.sampler = parse_sampler(j.at("sampler").get<std::string>());
  s.prior_scale = j.at("prior_scale").get<double>();
  s.q_scale = j.at("q_scale").get<double>();
  s.target_shift = j.at("target_shift").get<double>();
  s.target_scale = j.at("target_scale").get<double>();
  if (!(s.target_scale > 0.0)) throw DataError("checkpoint target_scale must be positive");
  return s;
}

json model_json(const FunctionalModel& m) {
  json layers = json::array();
  for (const auto& l : m.linear()) layers.push_back({{"W", tensor_json(l.W)}, {"b", tensor_json(l.b)}});
  for (const auto& v : m.variational()) {
    layers.push_back({{"mu_W", tensor_json(v.mu_W)},
                      {"rho_W", tensor_json(v.rho_W)},
                      {"mu_b", tensor_json(v.mu_b)},
                      {"rho_b", tensor_json(v.rho_b)}});
  }
  return {{"spec", spec_json(m.spec())}, {"layers", layers}};
}

FunctionalModel model_from(const json& j) {
  Rng scratch(0);
  ModelSpec spec = spec_from(j.at("spec"));
  FunctionalModel m(spec, scratch);
  const json& layers = j.at("layers");
  if (!layers.is_array() || layers.size() != m.dense_count()) {
    throw DataError("checkpoint layer count does not match its spec");
  }
  for (std::size_t l = 0; l < m.dense_count(); ++l) {
    const json& lj = layers[l];
    if (spec.kind == ModelKind::variational) {
      auto& v = m.variational()[l];
      v.mu_W = tensor_from(lj.at("mu_W"), v.mu_W.shape(), "mu_W");
      v.rho_W = tensor_from(lj.at("rho_W"), v.rho_W.shape(), "rho_W");
      v.mu_b = tensor_from(lj.at("mu_b"), v.mu_b.shape(), "mu_b");
      v.rho_b = tensor_from(lj.at("rho_b"), v.rho_b.shape(), "rho_b");
    } else {
      auto& d = m.linear()[l];
      d.W = tensor_from(lj.at("W"), d.W.shape(), "W");
      d.b = tensor_from(lj.at("b"), d.b.shape(), "b");
    }
  }
  return m;
}

}  // namespace

std::string checkpoint_to_string(const Checkpoint& ckpt) {
  json models = json::array();
  for (const auto& m : ckpt.models) models.push_back(model_json(m));
  const json j = {{"format_version", kCheckpointFormatVersion},
                  {"method", method_tag(ckpt.method)},
                  {"dataset_fingerprint", ckpt.dataset_fingerprint},
                  {"seeds", ckpt.seeds},
                  {"models", models}};
  return j.dump() + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw DataError("checkpoint format_version " + std::to_string(version) + " is not supported");
    }
    Checkpoint c;
    c.method = parse_method(j.at("method").get<std::string>());
    c.dataset_fingerprint = j.at("dataset_fingerprint").get<std::string>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& mj : j.at("models")) c.models.push_back(model_from(mj));
    if (c.models.empty()) throw DataError("checkpoint holds no models");
    if (c.seeds.size() != c.models.size()) throw DataError("checkpoint seed list does not match models");
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << checkpoint_to_string(ckpt);
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace ruq
