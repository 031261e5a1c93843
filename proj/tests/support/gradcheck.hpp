#pragma once

// Central finite-difference helpers for 64-bit gradient checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "pkmlab/rng.hpp"
#include "pkmlab/tensor.hpp"

namespace pkmlab::testing {

// ||a - n|| / max(||a||, ||n||), with 0 when both vanish.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::sqrt(std::max(na, nn));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

// Numerical gradient of `loss` with respect to every entry of `t`.
inline std::vector<double> numeric_grad(Tensor<double>& t, const std::function<double()>& loss,
                                        double h = 1e-5) {
  std::vector<double> g(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = loss();
    t[i] = saved - h;
    const double down = loss();
    t[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline std::vector<double> as_vector(const Tensor<double>& t) { return {t.data(), t.data() + t.size()}; }

inline void fill_normal(Tensor<double>& t, Rng& rng, double sigma = 1.0) {
  for (auto& v : t.vec()) v = rng.normal(0.0, sigma);
}

// Scalar probe loss sum(r * y) for a fixed random r, so dL/dy = r.
inline double probe(const Tensor<double>& y, const Tensor<double>& r) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

}  // namespace pkmlab::testing
