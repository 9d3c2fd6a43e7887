#include "ruq/predictors.hpp"

#include <algorithm>
#include <cmath>

#include "ruq/error.hpp"

namespace ruq {

using ad::Tensor;

namespace {

constexpr std::size_t kChunkRows = 1024;

Tensor row_slice(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t d = x.cols();
  const auto data = x.data();
  return Tensor({end - begin, d},
                std::vector<double>(data.begin() + begin * d, data.begin() + end * d));
}

}  // namespace

PredictiveSampleSet sample_predictive(const FunctionalModel& model, const Tensor& x, std::size_t N,
                                      const Rng& stream) {
  if (N < 1) throw ConfigError("sample_predictive: at least one pass is required");
  if (x.rank() != 2) throw ShapeError("sample_predictive: expected a [n, d] batch");
  if (!model.stochastic()) N = 1;
  PredictiveSampleSet s;
  s.passes = N;
  s.batch = x.rows();
  s.mu.resize(N * s.batch);
  s.var.resize(N * s.batch);
  for (std::size_t begin = 0; begin < s.batch; begin += kChunkRows) {
    const std::size_t end = std::min(s.batch, begin + kChunkRows);
    const Tensor chunk = (begin == 0 && end == s.batch) ? x : row_slice(x, begin, end);
    for (std::size_t p = 0; p < N; ++p) {
      const NoiseBundle noise = draw_noise(model, chunk, stream.split(p));
      const ModelOutput out = model_forward(model, chunk, noise);
      std::copy(out.mu.data().begin(), out.mu.data().end(), s.mu.begin() + p * s.batch + begin);
      std::copy(out.var.data().begin(), out.var.data().end(), s.var.begin() + p * s.batch + begin);
    }
  }
  for (double v : s.var) {
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericError("predicted variance is not positive and finite");
  }
  for (double m : s.mu) {
    if (!std::isfinite(m)) throw NumericError("predicted mean is not finite");
  }
  return s;
}

std::vector<Prediction> decompose(const PredictiveSampleSet& s) {
  if (s.passes < 1) throw ConfigError("decompose: empty sample set");
  std::vector<Prediction> out(s.batch);
  const double inv = 1.0 / static_cast<double>(s.passes);
  for (std::size_t i = 0; i < s.batch; ++i) {
    const double first = s.mu_at(0, i);
    bool constant = true;
    double mu = 0.0, al = 0.0;
    for (std::size_t p = 0; p < s.passes; ++p) {
      mu += s.mu_at(p, i);
      al += s.var_at(p, i);
      constant = constant && s.mu_at(p, i) == first;
    }
    mu = constant ? first : mu * inv;
    double ep = 0.0;
    if (!constant) {
      for (std::size_t p = 0; p < s.passes; ++p) {
        const double d = s.mu_at(p, i) - mu;
        ep += d * d;
      }
      ep *= inv;
    }
    Prediction& pr = out[i];
    pr.mu = mu;
    pr.epistemic = ep;
    pr.aleatoric = al * inv;
    pr.total = pr.epistemic + pr.aleatoric;
  }
  return out;
}

std::pair<double, double> ensemble_mixture(std::span<const double> mu, std::span<const double> var) {
  if (mu.empty()) throw ConfigError("ensemble_mixture: no members");
  if (mu.size() != var.size()) throw ShapeError("ensemble_mixture: mean and variance lists differ in length");
  long double m = 0.0L, second = 0.0L;
  for (std::size_t k = 0; k < mu.size(); ++k) {
    if (!(var[k] > 0.0)) throw DomainError("ensemble_mixture: member variance must be positive");
    m += mu[k];
    second += static_cast<long double>(var[k]) + static_cast<long double>(mu[k]) * mu[k];
  }
  const long double n = static_cast<long double>(mu.size());
  m /= n;
  second /= n;
  return {static_cast<double>(m), static_cast<double>(second - m * m)};
}

void check_models_match(Method method, std::span<const FunctionalModel> models) {
  auto fail = [&](const std::string& why) {
    throw ConfigError(std::string("method ") + method_tag(method) + ": " + why);
  };
  if (models.empty()) fail("no model given");
  if (method != Method::de && models.size() != 1) fail("expects exactly one model");
  for (const auto& m : models) {
    const ModelKind kind = m.spec().kind;
    switch (method) {
      case Method::hnn:
      case Method::de:
        if (kind != ModelKind::deterministic) fail("expects deterministic networks");
        break;
      case Method::mcd:
        if (kind != ModelKind::dropout) fail("expects a dropout network");
        break;
      default:
        if (kind != ModelKind::variational) fail("expects a variational network");
        if (m.spec().sampler != sampler_for(method)) {
          fail(std::string("model uses the ") + sampler_name(m.spec().sampler) + " sampler");
        }
    }
  }
  for (const auto& m : models) {
    if (!(m.spec() == models[0].spec())) fail("ensemble members differ in architecture");
  }
}

PredictionSet predict(Method method, std::span<const FunctionalModel> models, const Tensor& x,
                      std::size_t N, const Rng& stream) {
  check_models_match(method, models);
  if (N < 1) throw ConfigError("predict: at least one pass is required");
  PredictionSet out;
  if (method == Method::de) {
    PredictiveSampleSet s;
    s.passes = models.size();
    s.batch = x.rows();
    for (std::size_t k = 0; k < models.size(); ++k) {
      const PredictiveSampleSet member = sample_predictive(models[k], x, 1, stream.split(k));
      s.mu.insert(s.mu.end(), member.mu.begin(), member.mu.end());
      s.var.insert(s.var.end(), member.var.begin(), member.var.end());
    }
    out.rows = decompose(s);
    out.samples = std::move(s);
    out.nominal_decomposition = true;
    return out;
  }
  if (method == Method::hnn && N != 1) out.passes_forced = true;
  out.samples = sample_predictive(models[0], x, N, stream);
  out.rows = decompose(out.samples);
  return out;
}

}  // namespace ruq
