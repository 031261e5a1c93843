#include "pkmlab/pkm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pkmlab {

const char* to_string(ValueInit init) {
  return init == ValueInit::kZeros ? "zeros" : "gaussian";
}

ValueInit value_init_from_string(const std::string& s) {
  if (s == "gaussian") return ValueInit::kGaussian;
  if (s == "zeros") return ValueInit::kZeros;
  throw std::invalid_argument("unknown value_init '" + s + "' (expected gaussian|zeros)");
}

void MemoryConfig::validate() const {
  if (subkeys < 2) throw std::invalid_argument("memory: subkeys must be >= 2");
  if (heads < 1) throw std::invalid_argument("memory: heads must be >= 1");
  if (topk < 1 || topk > subkeys) throw std::invalid_argument("memory: topk must be in [1, subkeys]");
  if (key_dim < 2 || key_dim % 2 != 0) throw std::invalid_argument("memory: key_dim must be even");
  if (value_dim < 1) throw std::invalid_argument("memory: value_dim must be >= 1");
}

namespace {

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Orders (score desc, index asc) and keeps the first k.
template <typename T>
void take_best(std::vector<std::int64_t>& idx, const std::vector<T>& score_of_pos,
               const std::vector<std::int64_t>& id_of_pos, int k, TopK<T>& out) {
  const auto better = [&](std::int64_t a, std::int64_t b) {
    if (score_of_pos[a] != score_of_pos[b]) return score_of_pos[a] > score_of_pos[b];
    return id_of_pos[a] < id_of_pos[b];
  };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
  out.indices.resize(k);
  out.scores.resize(k);
  for (int i = 0; i < k; ++i) {
    out.indices[i] = id_of_pos[idx[i]];
    out.scores[i] = score_of_pos[idx[i]];
  }
}

template <typename T>
void check_k(int k, std::size_t c) {
  if (k < 1 || static_cast<std::size_t>(k) > c) {
    throw std::invalid_argument("top-k: k=" + std::to_string(k) + " outside [1, " +
                                std::to_string(c) + "]");
  }
}

template <typename T>
void check_product_args(std::span<const T> q1, std::span<const T> q2, MatrixView<T> keys1,
                        MatrixView<T> keys2) {
  if (keys1.rows != keys2.rows) throw std::invalid_argument("product keys: codebook sizes differ");
  if (q1.size() != keys1.cols || q2.size() != keys2.cols) {
    throw std::invalid_argument("product keys: sub-query width mismatch");
  }
}

}  // namespace

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_query(std::span<const T> query) {
  if (query.size() % 2 != 0) {
    throw std::invalid_argument("split_query: odd query width " + std::to_string(query.size()));
  }
  const std::size_t h = query.size() / 2;
  return {std::vector<T>(query.begin(), query.begin() + h),
          std::vector<T>(query.begin() + h, query.end())};
}

template <typename T>
TopK<T> subkey_topk(std::span<const T> sub_query, MatrixView<T> codebook, int k,
                    SearchStats* stats) {
  check_k<T>(k, codebook.rows);
  if (sub_query.size() != codebook.cols) throw std::invalid_argument("subkey_topk: width mismatch");
  std::vector<T> scores(codebook.rows);
  for (std::size_t i = 0; i < codebook.rows; ++i) {
    scores[i] = dot(sub_query.data(), codebook.data + i * codebook.cols, codebook.cols);
  }
  if (stats != nullptr) stats->dot_products += codebook.rows;
  std::vector<std::int64_t> ids(codebook.rows);
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<std::int64_t> order = ids;
  TopK<T> out;
  take_best(order, scores, ids, k, out);
  return out;
}

template <typename T>
TopK<T> product_topk(std::span<const T> q1, std::span<const T> q2, MatrixView<T> keys1,
                     MatrixView<T> keys2, int k, SearchStats* stats) {
  check_product_args(q1, q2, keys1, keys2);
  const auto c = static_cast<std::int64_t>(keys1.rows);
  check_k<T>(k, keys1.rows * keys1.rows);
  // Beyond k = C every sub-key is a candidate, so the grid stays exact.
  const int side = static_cast<int>(std::min<std::int64_t>(k, c));
  const TopK<T> a = subkey_topk(q1, keys1, side, stats);
  const TopK<T> b = subkey_topk(q2, keys2, side, stats);
  const std::size_t kk = static_cast<std::size_t>(side) * side;
  std::vector<T> scores(kk);
  std::vector<std::int64_t> flat(kk);
  for (int i = 0; i < side; ++i) {
    for (int j = 0; j < side; ++j) {
      scores[i * side + j] = a.scores[i] + b.scores[j];
      flat[i * side + j] = a.indices[i] * c + b.indices[j];
    }
  }
  if (stats != nullptr) stats->candidates += kk;
  std::vector<std::int64_t> order(kk);
  std::iota(order.begin(), order.end(), 0);
  TopK<T> out;
  take_best(order, scores, flat, k, out);
  return out;
}

template <typename T>
TopK<T> exhaustive_topk(std::span<const T> q1, std::span<const T> q2, MatrixView<T> keys1,
                        MatrixView<T> keys2, int k, SearchStats* stats) {
  check_product_args(q1, q2, keys1, keys2);
  const std::size_t c = keys1.rows;
  check_k<T>(k, c * c);
  std::vector<T> scores(c * c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      scores[i * c + j] = dot(q1.data(), keys1.data + i * keys1.cols, keys1.cols) +
                          dot(q2.data(), keys2.data + j * keys2.cols, keys2.cols);
    }
  }
  if (stats != nullptr) {
    stats->dot_products += 2 * c * c;
    stats->candidates += c * c;
  }
  std::vector<std::int64_t> ids(c * c);
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<std::int64_t> order = ids;
  TopK<T> out;
  take_best(order, scores, ids, k, out);
  return out;
}

std::vector<std::pair<std::int64_t, double>> MemoryAccess::aggregated(std::size_t pos) const {
  std::vector<std::pair<std::int64_t, double>> out;
  out.reserve(stride());
  const std::size_t base = pos * stride();
  for (std::size_t i = 0; i < stride(); ++i) out.emplace_back(indices[base + i], weights[base + i]);
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::size_t w = 0;
  for (std::size_t r = 0; r < out.size(); ++r) {
    if (w > 0 && out[w - 1].first == out[r].first) {
      out[w - 1].second += out[r].second;
    } else {
      out[w++] = out[r];
    }
  }
  out.resize(w);
  return out;
}

MemoryAccess MemoryAccess::select(std::span<const std::uint8_t> keep) const {
  if (keep.size() != positions) throw std::invalid_argument("MemoryAccess::select: mask size");
  MemoryAccess out;
  out.slots = slots;
  out.heads = heads;
  out.topk = topk;
  const std::size_t s = stride();
  for (std::size_t p = 0; p < positions; ++p) {
    if (keep[p] == 0) continue;
    out.indices.insert(out.indices.end(), indices.begin() + p * s, indices.begin() + (p + 1) * s);
    out.weights.insert(out.weights.end(), weights.begin() + p * s, weights.begin() + (p + 1) * s);
    ++out.positions;
  }
  return out;
}

template <typename T>
ProductKeyMemory<T>::ProductKeyMemory(std::string prefix, std::size_t input_dim, MemoryConfig cfg,
                                      Rng& rng)
    : cfg_(cfg), input_dim_(input_dim) {
  cfg_.validate();
  const std::size_t q = static_cast<std::size_t>(cfg_.heads) * cfg_.key_dim;
  query_weight.init(prefix + ".query.weight", {input_dim, q});
  query_bias.init(prefix + ".query.bias", {q});
  bn_gain.init(prefix + ".query_bn.weight", {q});
  bn_bias.init(prefix + ".query_bn.bias", {q});
  running_mean.init(prefix + ".query_bn.running_mean", {q}, ParamKind::kBuffer);
  running_var.init(prefix + ".query_bn.running_var", {q}, ParamKind::kBuffer);
  keys.init(prefix + ".keys",
            {static_cast<std::size_t>(cfg_.heads), 2, static_cast<std::size_t>(cfg_.subkeys),
             cfg_.half_dim()});
  values.init(prefix + ".values", {cfg_.slots(), static_cast<std::size_t>(cfg_.value_dim)},
              ParamKind::kSparseRows);
  for (Param<T>* p : {&query_weight, &query_bias, &bn_gain, &bn_bias, &running_mean, &running_var,
                      &keys, &values}) {
    p->memory = true;
  }
  value_grad.clear(static_cast<std::size_t>(cfg_.value_dim));
  init_parameters(rng);
}

template <typename T>
void ProductKeyMemory<T>::init_parameters(Rng& rng) {
  const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg_.half_dim()));
  for (auto& v : query_weight.value.vec()) v = static_cast<T>(rng.normal(0.0, sigma));
  query_bias.value.zero();
  bn_gain.value.fill(T(1));
  bn_bias.value.zero();
  running_mean.value.zero();
  running_var.value.fill(T(1));
  for (auto& v : keys.value.vec()) v = static_cast<T>(rng.normal(0.0, sigma));
  init_values(rng);
}

template <typename T>
void ProductKeyMemory<T>::init_values(Rng& rng) {
  if (cfg_.value_init == ValueInit::kZeros) {
    values.value.zero();
    return;
  }
  const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg_.value_dim));
  for (auto& v : values.value.vec()) v = static_cast<T>(rng.normal(0.0, sigma));
}

template <typename T>
MatrixView<T> ProductKeyMemory<T>::codebook(int head, int half) const {
  const std::size_t c = static_cast<std::size_t>(cfg_.subkeys);
  const std::size_t h = cfg_.half_dim();
  return MatrixView<T>(keys.value.data() + (static_cast<std::size_t>(head) * 2 + half) * c * h, c, h);
}

template <typename T>
void ProductKeyMemory<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&query_weight, &query_bias, &bn_gain, &bn_bias, &running_mean, &running_var,
                      &keys, &values}) {
    out.push_back(p);
  }
}

template <typename T>
Tensor<T> ProductKeyMemory<T>::forward(const Tensor<T>& x, bool train, MemoryAccess* access) {
  if (x.cols() != input_dim_) {
    throw std::invalid_argument("memory forward: input width " + std::to_string(x.cols()) +
                                " != " + std::to_string(input_dim_));
  }
  const std::size_t n = x.rows();
  const int heads = cfg_.heads;
  const int k = cfg_.topk;
  const std::size_t dk = static_cast<std::size_t>(cfg_.key_dim);
  const std::size_t half = cfg_.half_dim();
  const std::size_t qw = static_cast<std::size_t>(heads) * dk;
  const std::size_t dv = static_cast<std::size_t>(cfg_.value_dim);

  Cache& c = cache_;
  c.valid = true;
  c.x = x;
  c.x.reshape({n, input_dim_});
  Tensor<T> raw = linear_forward(c.x, query_weight.value, query_bias.value);

  c.batch_stats = train && !frozen_ && use_batch_stats_ && cfg_.query_batchnorm && n > 0;
  c.xhat = Tensor<T>({n, qw});
  c.query = Tensor<T>({n, qw});
  c.rstd.assign(qw, T(1));
  if (!cfg_.query_batchnorm) {
    c.query = raw;
  } else {
    std::vector<T> mean(qw, T(0));
    if (c.batch_stats) {
      std::vector<T> var(qw, T(0));
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < qw; ++j) mean[j] += raw(r, j);
      }
      for (auto& m : mean) m /= static_cast<T>(n);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < qw; ++j) {
          const T d = raw(r, j) - mean[j];
          var[j] += d * d;
        }
      }
      const T mom = static_cast<T>(kBatchNormMomentum);
      for (std::size_t j = 0; j < qw; ++j) {
        const T biased = var[j] / static_cast<T>(n);
        const T unbiased = n > 1 ? var[j] / static_cast<T>(n - 1) : biased;
        c.rstd[j] = T(1) / std::sqrt(biased + static_cast<T>(kBatchNormEps));
        running_mean.value[j] = (T(1) - mom) * running_mean.value[j] + mom * mean[j];
        running_var.value[j] = (T(1) - mom) * running_var.value[j] + mom * unbiased;
      }
    } else {
      for (std::size_t j = 0; j < qw; ++j) {
        mean[j] = running_mean.value[j];
        c.rstd[j] = T(1) / std::sqrt(running_var.value[j] + static_cast<T>(kBatchNormEps));
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < qw; ++j) {
        const T xh = (raw(r, j) - mean[j]) * c.rstd[j];
        c.xhat(r, j) = xh;
        c.query(r, j) = bn_gain.value[j] * xh + bn_bias.value[j];
      }
    }
  }

  Shape out_shape = x.shape();
  out_shape.back() = dv;
  Tensor<T> y(out_shape);
  const std::size_t stride = static_cast<std::size_t>(heads) * k;
  c.indices.assign(n * stride, 0);
  c.weights.assign(n * stride, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y.data() + r * dv;
    for (int h = 0; h < heads; ++h) {
      const T* q = c.query.data() + r * qw + static_cast<std::size_t>(h) * dk;
      const TopK<T> best = product_topk(std::span<const T>(q, half), std::span<const T>(q + half, half),
                                        codebook(h, 0), codebook(h, 1), k);
      const T mx = best.scores[0];
      T sum = 0;
      std::size_t base = r * stride + static_cast<std::size_t>(h) * k;
      for (int j = 0; j < k; ++j) {
        const T e = std::exp(best.scores[j] - mx);
        c.weights[base + j] = e;
        sum += e;
      }
      for (int j = 0; j < k; ++j) {
        c.weights[base + j] /= sum;
        c.indices[base + j] = best.indices[j];
        const T w = c.weights[base + j];
        const T* v = values.value.data() + static_cast<std::size_t>(best.indices[j]) * dv;
        for (std::size_t d = 0; d < dv; ++d) yr[d] += w * v[d];
      }
    }
  }

  if (access != nullptr) {
    access->slots = cfg_.slots();
    access->heads = heads;
    access->topk = k;
    access->positions = n;
    access->indices = c.indices;
    access->weights.assign(c.weights.begin(), c.weights.end());
  }
  return y;
}

template <typename T>
Tensor<T> ProductKeyMemory<T>::backward(const Tensor<T>& dy_in) {
  Cache& c = cache_;
  if (!c.valid) throw std::logic_error("memory backward: no cached forward pass");
  const std::size_t n = c.x.rows();
  if (dy_in.rows() != n || dy_in.cols() != static_cast<std::size_t>(cfg_.value_dim)) {
    throw std::invalid_argument("memory backward: upstream shape " + shape_str(dy_in.shape()));
  }
  const int heads = cfg_.heads;
  const int k = cfg_.topk;
  const std::size_t dk = static_cast<std::size_t>(cfg_.key_dim);
  const std::size_t half = cfg_.half_dim();
  const std::size_t qw = static_cast<std::size_t>(heads) * dk;
  const std::size_t dv = static_cast<std::size_t>(cfg_.value_dim);
  const std::size_t csz = static_cast<std::size_t>(cfg_.subkeys);
  const std::size_t stride = static_cast<std::size_t>(heads) * k;
  const bool learn = !frozen_;

  // Row gradients accumulate in first-touch order, then get sorted by row.
  std::vector<std::int32_t> slot_of_row(learn ? cfg_.slots() : 0, -1);
  std::vector<std::int64_t> touched;
  std::vector<T> row_grads;

  Tensor<T> dquery({n, qw});
  std::vector<T> dw(static_cast<std::size_t>(k)), ds(static_cast<std::size_t>(k));
  for (std::size_t r = 0; r < n; ++r) {
    const T* g = dy_in.data() + r * dv;
    for (int h = 0; h < heads; ++h) {
      const std::size_t base = r * stride + static_cast<std::size_t>(h) * k;
      T wdw = 0;
      for (int j = 0; j < k; ++j) {
        const std::int64_t slot = c.indices[base + j];
        const T w = c.weights[base + j];
        dw[j] = dot(g, values.value.data() + static_cast<std::size_t>(slot) * dv, dv);
        wdw += w * dw[j];
        if (learn) {
          std::int32_t s = slot_of_row[slot];
          if (s < 0) {
            s = static_cast<std::int32_t>(touched.size());
            slot_of_row[slot] = s;
            touched.push_back(slot);
            row_grads.resize(row_grads.size() + dv, T(0));
          }
          T* acc = row_grads.data() + static_cast<std::size_t>(s) * dv;
          for (std::size_t d = 0; d < dv; ++d) acc[d] += w * g[d];
        }
      }
      for (int j = 0; j < k; ++j) ds[j] = c.weights[base + j] * (dw[j] - wdw);

      const T* q = c.query.data() + r * qw + static_cast<std::size_t>(h) * dk;
      T* dq = dquery.data() + r * qw + static_cast<std::size_t>(h) * dk;
      T* dkeys1 = keys.grad.data() + (static_cast<std::size_t>(h) * 2) * csz * half;
      T* dkeys2 = dkeys1 + csz * half;
      const MatrixView<T> k1 = codebook(h, 0);
      const MatrixView<T> k2 = codebook(h, 1);
      for (int j = 0; j < k; ++j) {
        const auto slot = static_cast<std::size_t>(c.indices[base + j]);
        const std::size_t i1 = slot / csz;
        const std::size_t i2 = slot % csz;
        const T s = ds[j];
        for (std::size_t d = 0; d < half; ++d) {
          dq[d] += s * k1.data[i1 * half + d];
          dq[half + d] += s * k2.data[i2 * half + d];
          if (learn) {
            dkeys1[i1 * half + d] += s * q[d];
            dkeys2[i2 * half + d] += s * q[half + d];
          }
        }
      }
    }
  }

  if (learn) {
    std::vector<std::size_t> order(touched.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return touched[a] < touched[b]; });
    value_grad.rows.resize(touched.size());
    value_grad.values = Tensor<T>({touched.size(), dv});
    for (std::size_t i = 0; i < order.size(); ++i) {
      value_grad.rows[i] = touched[order[i]];
      std::copy_n(row_grads.data() + order[i] * dv, dv, value_grad.values.data() + i * dv);
    }
  } else {
    value_grad.clear(dv);
  }

  // Undo the query normalization.
  Tensor<T> draw({n, qw});
  if (!cfg_.query_batchnorm) {
    draw = dquery;
  } else if (c.batch_stats) {
    std::vector<T> sum_dxh(qw, T(0)), sum_dxh_xh(qw, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < qw; ++j) {
        const T dout = dquery(r, j);
        const T dxh = dout * bn_gain.value[j];
        sum_dxh[j] += dxh;
        sum_dxh_xh[j] += dxh * c.xhat(r, j);
        if (learn) {
          bn_gain.grad[j] += dout * c.xhat(r, j);
          bn_bias.grad[j] += dout;
        }
      }
    }
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < qw; ++j) {
        const T dxh = dquery(r, j) * bn_gain.value[j];
        draw(r, j) = c.rstd[j] * (dxh - sum_dxh[j] * inv_n - c.xhat(r, j) * sum_dxh_xh[j] * inv_n);
      }
    }
  } else {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < qw; ++j) {
        const T dout = dquery(r, j);
        if (learn) {
          bn_gain.grad[j] += dout * c.xhat(r, j);
          bn_bias.grad[j] += dout;
        }
        draw(r, j) = dout * bn_gain.value[j] * c.rstd[j];
      }
    }
  }

  Tensor<T> dx;
  linear_backward(c.x, query_weight.value, draw, &dx, learn ? &query_weight.grad : nullptr,
                  learn ? &query_bias.grad : nullptr);
  Shape in_shape = dy_in.shape();
  in_shape.back() = input_dim_;
  dx.reshape(in_shape);
  return dx;
}

template std::pair<std::vector<float>, std::vector<float>> split_query(std::span<const float>);
template std::pair<std::vector<double>, std::vector<double>> split_query(std::span<const double>);
template TopK<float> subkey_topk(std::span<const float>, MatrixView<float>, int, SearchStats*);
template TopK<double> subkey_topk(std::span<const double>, MatrixView<double>, int, SearchStats*);
template TopK<float> product_topk(std::span<const float>, std::span<const float>, MatrixView<float>,
                                  MatrixView<float>, int, SearchStats*);
template TopK<double> product_topk(std::span<const double>, std::span<const double>,
                                   MatrixView<double>, MatrixView<double>, int, SearchStats*);
template TopK<float> exhaustive_topk(std::span<const float>, std::span<const float>,
                                     MatrixView<float>, MatrixView<float>, int, SearchStats*);
template TopK<double> exhaustive_topk(std::span<const double>, std::span<const double>,
                                      MatrixView<double>, MatrixView<double>, int, SearchStats*);
template class ProductKeyMemory<float>;
template class ProductKeyMemory<double>;

}  // namespace pkmlab
