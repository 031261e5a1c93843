#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pkmlab/ops.hpp"
#include "pkmlab/param.hpp"
#include "pkmlab/rng.hpp"
#include "pkmlab/tensor.hpp"

namespace pkmlab {

enum class ValueInit { kGaussian, kZeros };

const char* to_string(ValueInit init);
ValueInit value_init_from_string(const std::string& s);

struct MemoryConfig {
  int subkeys = 32;   // codebook size C per half; the memory has C*C slots
  int heads = 2;
  int topk = 8;       // keys selected per head
  int key_dim = 32;   // query/key width, split into two halves
  int value_dim = 128;
  bool query_batchnorm = true;
  ValueInit value_init = ValueInit::kGaussian;

  std::size_t slots() const { return static_cast<std::size_t>(subkeys) * subkeys; }
  std::size_t half_dim() const { return static_cast<std::size_t>(key_dim) / 2; }
  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

// Row-major view over a [rows x cols] block of contiguous values.
template <typename T>
struct MatrixView {
  const T* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  MatrixView() = default;
  MatrixView(const T* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {}
  MatrixView(const Tensor<T>& t) : data(t.data()), rows(t.rows()), cols(t.cols()) {}  // NOLINT
  std::span<const T> row(std::size_t r) const { return {data + r * cols, cols}; }
};

template <typename T>
struct TopK {
  std::vector<std::int64_t> indices;  // best first
  std::vector<T> scores;
};

struct SearchStats {
  std::size_t dot_products = 0;
  std::size_t candidates = 0;
};

template <typename T>
std::pair<std::vector<T>, std::vector<T>> split_query(std::span<const T> query);

// Top-k rows of `codebook` by dot product with `sub_query`, sorted by
// descending score, ties to the lower index.
template <typename T>
TopK<T> subkey_topk(std::span<const T> sub_query, MatrixView<T> codebook, int k,
                    SearchStats* stats = nullptr);

// Exact top-k over all C*C product keys (i, j) with score
// q1.keys1[i] + q2.keys2[j], found from the k x k candidate grid of the two
// sub-searches (min(k, C) per side). Flat index is i*C + j; ties go to the
// lower flat index. Requires 1 <= k <= C*C.
template <typename T>
TopK<T> product_topk(std::span<const T> q1, std::span<const T> q2, MatrixView<T> keys1,
                     MatrixView<T> keys2, int k, SearchStats* stats = nullptr);

// Scores every product key from scratch (one full-width dot product per key).
// Reference path for benchmarks; same ordering rule as product_topk.
template <typename T>
TopK<T> exhaustive_topk(std::span<const T> q1, std::span<const T> q2, MatrixView<T> keys1,
                        MatrixView<T> keys2, int k, SearchStats* stats = nullptr);

// Which slots each query position read, and with what weight.
struct MemoryAccess {
  std::size_t slots = 0;
  int heads = 0;
  int topk = 0;
  std::size_t positions = 0;
  std::vector<std::int64_t> indices;  // [positions][heads][topk]
  std::vector<double> weights;        // same layout; each head's weights sum to 1

  std::size_t stride() const { return static_cast<std::size_t>(heads) * topk; }
  std::span<const std::int64_t> indices_at(std::size_t pos, int head) const {
    return {indices.data() + pos * stride() + static_cast<std::size_t>(head) * topk,
            static_cast<std::size_t>(topk)};
  }
  std::span<const double> weights_at(std::size_t pos, int head) const {
    return {weights.data() + pos * stride() + static_cast<std::size_t>(head) * topk,
            static_cast<std::size_t>(topk)};
  }
  // Per-slot weight w(x)_i at one position, summed over heads, ascending slot.
  std::vector<std::pair<std::int64_t, double>> aggregated(std::size_t pos) const;
  // Keep only positions where keep[pos] != 0.
  MemoryAccess select(std::span<const std::uint8_t> keep) const;
};

// Product-key memory layer: per-head query projection with optional batch
// norm, per-head sub-key codebooks, and one value table shared by all heads.
// Head outputs are summed.
template <typename T>
class ProductKeyMemory {
 public:
  ProductKeyMemory() = default;
  ProductKeyMemory(std::string prefix, std::size_t input_dim, MemoryConfig cfg, Rng& rng);

  const MemoryConfig& config() const { return cfg_; }
  std::size_t input_dim() const { return input_dim_; }

  // x: [..., input_dim] -> [..., value_dim]. Train mode normalizes queries
  // with batch statistics and updates running statistics; eval mode (and a
  // frozen layer) uses the running statistics.
  Tensor<T> forward(const Tensor<T>& x, bool train, MemoryAccess* access = nullptr);

  // Returns dx. Accumulates dense gradients and replaces `value_grad` with the
  // gradient over the rows read by the last forward. A frozen layer only
  // propagates dx.
  Tensor<T> backward(const Tensor<T>& dy);

  void collect(ParamList<T>& out);
  void init_parameters(Rng& rng);
  void init_values(Rng& rng);

  void set_frozen(bool frozen) { frozen_ = frozen; }
  bool frozen() const { return frozen_; }

  // When off, train mode also normalizes with (and keeps) the running
  // statistics.
  void set_batch_stats(bool on) { use_batch_stats_ = on; }

  MatrixView<T> codebook(int head, int half) const;

  Param<T> query_weight;  // [input_dim x heads*key_dim]
  Param<T> query_bias;    // [heads*key_dim]
  Param<T> bn_gain;       // [heads*key_dim]
  Param<T> bn_bias;       // [heads*key_dim]
  Param<T> running_mean;  // [heads*key_dim], buffer
  Param<T> running_var;   // [heads*key_dim], buffer
  Param<T> keys;          // [heads x 2 x subkeys x key_dim/2]
  Param<T> values;        // [subkeys^2 x value_dim], sparse rows
  SparseRowGrad<T> value_grad;

  static constexpr double kBatchNormMomentum = 0.1;
  static constexpr double kBatchNormEps = 1e-5;

 private:
  struct Cache {
    bool valid = false;
    bool batch_stats = false;
    Tensor<T> x;       // [N x input_dim]
    Tensor<T> xhat;    // normalized queries before the affine, [N x H*dk]
    Tensor<T> query;   // queries used for scoring, [N x H*dk]
    std::vector<T> rstd;
    std::vector<std::int64_t> indices;  // [N][H][k]
    std::vector<T> weights;
  };

  MemoryConfig cfg_;
  std::size_t input_dim_ = 0;
  bool frozen_ = false;
  bool use_batch_stats_ = true;
  Cache cache_;
};

}  // namespace pkmlab
