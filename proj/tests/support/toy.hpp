#pragma once

// One-dimensional regression problems wrapped as dataset bundles.

#include <cmath>
#include <functional>
#include <vector>

#include "ruq/data.hpp"
#include "ruq/rng.hpp"

namespace ruq::testing {

struct ToySample {
  std::vector<double> x;
  std::vector<double> y;
};

/// Scalar inputs as windows with one channel of length one.
inline WindowSet toy_windows(const ToySample& s) {
  WindowSet w;
  w.channels = 1;
  w.window_length = 1;
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    w.features.push_back(s.x[i]);
    w.rul.push_back(s.y[i]);
    w.unit_id.push_back(1);
    w.cycle.push_back(static_cast<std::int64_t>(i));
    w.lifetime_fraction.push_back(0.0);
  }
  return w;
}

inline DatasetBundle toy_bundle(const ToySample& train, const ToySample& valid, const ToySample& test = {}) {
  return bundle_from_windows(toy_windows(train), toy_windows(valid), toy_windows(test));
}

/// y = f(x) + sigma(x) * eps with x drawn by `draw_x`.
inline ToySample toy_sample(std::size_t n, Rng& rng, const std::function<double(Rng&)>& draw_x,
                            const std::function<double(double)>& f, const std::function<double(double)>& sigma) {
  ToySample s;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = draw_x(rng);
    s.x.push_back(x);
    s.y.push_back(f(x) + sigma(x) * rng.normal());
  }
  return s;
}

inline double hetero_sigma(double x) { return 0.1 + 0.2 * std::abs(x); }

/// sin(x) + (0.1 + 0.2|x|) eps with x uniform on [-3, 3].
inline ToySample hetero_sample(std::size_t n, Rng& rng) {
  return toy_sample(
      n, rng, [](Rng& r) { return -3.0 + 6.0 * r.uniform(); }, [](double x) { return std::sin(x); }, hetero_sigma);
}

}  // namespace ruq::testing
