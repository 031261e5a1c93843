#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pkmlab/tensor.hpp"

namespace pkmlab {

inline constexpr double kLayerNormEps = 1e-5;

// Plain 2-D product a[m x n] * b[n x p].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// y = x * w + bias over the rows of x. w is [in x out].
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// Accumulates into dw/dbias; overwrites dx. Any output may be null.
template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* dbias);

template <typename T>
struct LayerNormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};

// Normalizes each row over the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = kLayerNormEps, LayerNormCache<T>* cache = nullptr);

// dx is overwritten; dgain/dbias accumulate.
template <typename T>
void layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gain,
                         const LayerNormCache<T>& cache, Tensor<T>& dx, Tensor<T>* dgain,
                         Tensor<T>* dbias);

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy);

// Row-wise max-subtracted softmax, in place.
template <typename T>
void softmax_rows(Tensor<T>& x);

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;  // mean over active rows
  std::size_t count = 0;
  Tensor<T> dlogits;  // d(mean loss)/d(logits); zero on inactive rows
};

// Mean negative log-likelihood over rows with mask[i] != 0 (all rows when the
// mask is empty). Throws if no row is active or a target is out of range.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            std::span<const std::int32_t> targets,
                                            std::span<const std::uint8_t> mask = {});

}  // namespace pkmlab
