#include "pkmlab/adam.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pkmlab {
namespace {

template <typename T>
void adam_kernel(T* p, const T* g, T* m, T* v, std::size_t n, std::int64_t step,
                 const AdamConfig& cfg, double lr) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(cfg.beta1);
  const T b2 = static_cast<T>(cfg.beta2);
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const double m_hat = static_cast<double>(m[i]) / bc1;
    const double v_hat = static_cast<double>(v[i]) / bc2;
    p[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

template <typename T>
void require_finite_span(std::span<const T> g) {
  for (const T x : g) {
    if (!std::isfinite(x)) throw std::runtime_error("optimizer: non-finite gradient");
  }
}

}  // namespace

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state, double lr) {
  if (param.size() != grad.size() || state.m.size() != param.size() ||
      state.v.size() != param.size()) {
    throw std::invalid_argument("adam_step: size mismatch");
  }
  require_finite_span(grad);
  ++state.step;
  adam_kernel(param.data(), grad.data(), state.m.data(), state.v.data(), param.size(), state.step,
              state.config, lr);
}

template <typename T>
SparseRowOptimizer<T>::SparseRowOptimizer(std::size_t rows, std::size_t cols, AdamConfig cfg,
                                          SparseRule rule)
    : rows_(rows), cols_(cols), config_(cfg), rule_(rule), steps_(rows, 0) {
  if (rule_ == SparseRule::kAdam) {
    m_.assign(rows * cols, T(0));
    v_.assign(rows * cols, T(0));
  }
}

template <typename T>
void SparseRowOptimizer<T>::update(Tensor<T>& table, const SparseRowGrad<T>& grad, double lr) {
  if (table.rows() != rows_ || table.cols() != cols_) {
    throw std::invalid_argument("sparse update: table shape " + shape_str(table.shape()));
  }
  if (grad.values.rows() != grad.rows.size() ||
      (!grad.rows.empty() && grad.values.cols() != cols_)) {
    throw std::invalid_argument("sparse update: gradient shape mismatch");
  }
  for (const auto r : grad.rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= rows_) {
      throw std::out_of_range("sparse update: row " + std::to_string(r) + " out of range");
    }
  }
  require_finite_span(grad.values.span());
  for (std::size_t i = 0; i < grad.rows.size(); ++i) {
    const auto r = static_cast<std::size_t>(grad.rows[i]);
    T* p = table.data() + r * cols_;
    const T* g = grad.values.data() + i * cols_;
    ++steps_[r];
    if (rule_ == SparseRule::kSgd) {
      for (std::size_t c = 0; c < cols_; ++c) p[c] -= static_cast<T>(lr) * g[c];
    } else {
      adam_kernel(p, g, m_.data() + r * cols_, v_.data() + r * cols_, cols_, steps_[r], config_,
                  lr);
    }
  }
}

template void adam_step(std::span<float>, std::span<const float>, AdamState<float>&, double);
template void adam_step(std::span<double>, std::span<const double>, AdamState<double>&, double);
template class SparseRowOptimizer<float>;
template class SparseRowOptimizer<double>;

}  // namespace pkmlab
