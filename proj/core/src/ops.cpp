#include "pkmlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <unsupported/Eigen/SpecialFunctions>

namespace pkmlab {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " * " +
                                shape_str(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  if (out.size() == 0) return out;
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  return out;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || x.cols() != w.dim(0) || bias.size() != w.dim(1)) {
    throw std::invalid_argument("linear: shape mismatch x" + shape_str(x.shape()) + " w" +
                                shape_str(w.shape()) + " b" + shape_str(bias.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor<T> y(out_shape);
  if (x.rows() == 0) return y;
  auto ym = as_matrix(y);
  ym.noalias() = as_matrix(x) * as_matrix(w);
  ym.rowwise() += ConstRowVecMap<T>(bias.data(), static_cast<Eigen::Index>(bias.size()));
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, Tensor<T>* dx,
                     Tensor<T>* dw, Tensor<T>* dbias) {
  if (x.rows() != dy.rows() || dy.cols() != w.dim(1)) {
    throw std::invalid_argument("linear_backward: shape mismatch");
  }
  const auto dym = as_matrix(dy);
  if (dw != nullptr && x.rows() > 0) as_matrix(*dw).noalias() += as_matrix(x).transpose() * dym;
  if (dbias != nullptr && x.rows() > 0) {
    RowVecMap<T>(dbias->data(), static_cast<Eigen::Index>(dbias->size())) += dym.colwise().sum();
  }
  if (dx != nullptr) {
    *dx = Tensor<T>(x.shape());
    if (x.rows() > 0) as_matrix(*dx).noalias() = dym * as_matrix(w).transpose();
  }
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps,
                     LayerNormCache<T>* cache) {
  const std::size_t d = x.cols();
  if (d == 0) throw std::invalid_argument("layer_norm: zero-width rows");
  if (gain.size() != d || bias.size() != d) throw std::invalid_argument("layer_norm: affine size");
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t n = x.rows();
  Tensor<T> y(x.shape());
  if (cache != nullptr) {
    cache->mean.assign(n, T(0));
    cache->rstd.assign(n, T(0));
  }
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = x.row(r);
    T mean = 0;
    for (const T v : xr) mean += v;
    mean /= static_cast<T>(d);
    T var = 0;
    for (const T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
    auto yr = y.row(r);
    for (std::size_t c = 0; c < d; ++c) yr[c] = (xr[c] - mean) * rstd * gain[c] + bias[c];
    if (cache != nullptr) {
      cache->mean[r] = mean;
      cache->rstd[r] = rstd;
    }
  }
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gain,
                         const LayerNormCache<T>& cache, Tensor<T>& dx, Tensor<T>* dgain,
                         Tensor<T>* dbias) {
  const std::size_t d = x.cols();
  const std::size_t n = x.rows();
  if (cache.mean.size() != n) throw std::logic_error("layer_norm_backward: stale cache");
  dx = Tensor<T>(x.shape());
  std::vector<T> xhat(d), dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto xr = x.row(r);
    const auto dyr = dy.row(r);
    const T mean = cache.mean[r];
    const T rstd = cache.rstd[r];
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (std::size_t c = 0; c < d; ++c) {
      xhat[c] = (xr[c] - mean) * rstd;
      dxhat[c] = dyr[c] * gain[c];
      sum_dxhat += dxhat[c];
      sum_dxhat_xhat += dxhat[c] * xhat[c];
      if (dgain != nullptr) (*dgain)[c] += dyr[c] * xhat[c];
      if (dbias != nullptr) (*dbias)[c] += dyr[c];
    }
    const T inv_d = T(1) / static_cast<T>(d);
    auto dxr = dx.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      dxr[c] = rstd * (dxhat[c] - sum_dxhat * inv_d - xhat[c] * sum_dxhat_xhat * inv_d);
    }
  }
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xa(x.data(), n);
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(y.data(), n) =
      T(0.5) * xa * (T(1) + (xa * static_cast<T>(1.0 / std::numbers::sqrt2)).erf());
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
  const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> xa(x.data(), n);
  const Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> ga(dy.data(), n);
  const auto cdf = T(0.5) * (T(1) + (xa * static_cast<T>(1.0 / std::numbers::sqrt2)).erf());
  const auto pdf = (T(-0.5) * xa.square()).exp() * inv_sqrt2pi;
  Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>(dx.data(), n) = ga * (cdf + xa * pdf);
  return dx;
}

template <typename T>
void softmax_rows(Tensor<T>& x) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    const T mx = *std::max_element(xr.begin(), xr.end());
    T sum = 0;
    for (T& v : xr) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (T& v : xr) v /= sum;
  }
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            std::span<const std::int32_t> targets,
                                            std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != n) throw std::invalid_argument("cross_entropy: target count mismatch");
  if (!mask.empty() && mask.size() != n) throw std::invalid_argument("cross_entropy: mask size");
  CrossEntropyResult<T> out;
  out.dlogits = Tensor<T>(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    if (mask.empty() || mask[r] != 0) ++out.count;
  }
  if (out.count == 0) throw std::invalid_argument("cross_entropy: no active targets");
  const double scale = 1.0 / static_cast<double>(out.count);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (!mask.empty() && mask[r] == 0) continue;
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab");
    }
    const auto lr = logits.row(r);
    const T mx = *std::max_element(lr.begin(), lr.end());
    double sum = 0.0;
    for (const T z : lr) sum += std::exp(static_cast<double>(z - mx));
    const double log_z = std::log(sum) + static_cast<double>(mx);
    total += log_z - static_cast<double>(lr[t]);
    auto dr = out.dlogits.row(r);
    for (std::size_t c = 0; c < v; ++c) {
      dr[c] = static_cast<T>(std::exp(static_cast<double>(lr[c]) - log_z) * scale);
    }
    dr[t] -= static_cast<T>(scale);
  }
  out.loss = total * scale;
  return out;
}

#define PKMLAB_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> linear_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                Tensor<T>*, Tensor<T>*, Tensor<T>*);                           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,  \
                                LayerNormCache<T>*);                                           \
  template void layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    const LayerNormCache<T>&, Tensor<T>&, Tensor<T>*,          \
                                    Tensor<T>*);                                               \
  template Tensor<T> gelu(const Tensor<T>&);                                                   \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                        \
  template void softmax_rows(Tensor<T>&);                                                      \
  template CrossEntropyResult<T> softmax_cross_entropy(                                        \
      const Tensor<T>&, std::span<const std::int32_t>, std::span<const std::uint8_t>);

PKMLAB_INSTANTIATE_OPS(float)
PKMLAB_INSTANTIATE_OPS(double)

}  // namespace pkmlab
