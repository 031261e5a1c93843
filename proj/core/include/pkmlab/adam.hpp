#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pkmlab/param.hpp"
#include "pkmlab/tensor.hpp"

namespace pkmlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, AdamConfig cfg) : config(cfg), m(n, T(0)), v(n, T(0)) {}
};

// One bias-corrected Adam step at learning rate `lr`. Throws on a non-finite
// gradient or a size mismatch; the parameter is untouched in that case.
template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state, double lr);

template <typename T>
void adam_step(std::span<T> param, std::span<const T> grad, AdamState<T>& state) {
  adam_step(param, grad, state, state.config.lr);
}

enum class SparseRule { kAdam, kSgd };

// Row-wise optimizer for a [rows x cols] table. Each row keeps its own moments
// and step counter, so a row's trajectory only depends on the gradients it has
// received. Rows outside the update set are not read or written.
template <typename T>
class SparseRowOptimizer {
 public:
  SparseRowOptimizer() = default;
  SparseRowOptimizer(std::size_t rows, std::size_t cols, AdamConfig cfg,
                     SparseRule rule = SparseRule::kAdam);

  void update(Tensor<T>& table, const SparseRowGrad<T>& grad, double lr);

  const AdamConfig& config() const { return config_; }
  SparseRule rule() const { return rule_; }
  std::int64_t row_steps(std::size_t row) const { return steps_.at(row); }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  AdamConfig config_;
  SparseRule rule_ = SparseRule::kAdam;
  std::vector<T> m_;
  std::vector<T> v_;
  std::vector<std::int64_t> steps_;
};

}  // namespace pkmlab
