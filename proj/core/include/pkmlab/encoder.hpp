#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pkmlab/ops.hpp"
#include "pkmlab/param.hpp"
#include "pkmlab/pkm.hpp"
#include "pkmlab/rng.hpp"
#include "pkmlab/tensor.hpp"

namespace pkmlab {

// Reserved vocabulary ids.
inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kMaskId = 1;
inline constexpr std::int32_t kUnkId = 2;
inline constexpr std::int32_t kClsId = 3;
inline constexpr std::int32_t kNumReserved = 4;

// x' = LN(x + alpha * FFN(x) + beta * PKM(x)).
struct BlockVariant {
  int alpha = 1;
  int beta = 0;

  static constexpr BlockVariant ffn() { return {1, 0}; }
  static constexpr BlockVariant pkm() { return {0, 1}; }
  static constexpr BlockVariant resm() { return {1, 1}; }

  bool has_ffn() const { return alpha != 0; }
  bool has_memory() const { return beta != 0; }
  void validate() const;
  friend bool operator==(const BlockVariant&, const BlockVariant&) = default;
};

struct EncoderConfig {
  int layers = 4;
  int d_model = 128;
  int attention_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_len = 64;
  double dropout = 0.1;
  std::vector<int> memory_positions = {2, 4};  // 1-based layer indices
  BlockVariant memory_variant = BlockVariant::resm();
  MemoryConfig memory;
  int num_classes = 0;  // 0: no classification head

  BlockVariant variant_at(int layer) const;  // 1-based
  bool is_memory_layer(int layer) const;
  void validate() const;
};

// Evenly spaced memory layers, e.g. {2,4} for 4 or 6 layers, {4,8} for 12.
std::vector<int> regular_memory_positions(int layers, int count = 2);

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;  // [batch x seq]

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
};

template <typename T>
class Dropout {
 public:
  Tensor<T> forward(const Tensor<T>& x, double p, bool train, Rng* rng);
  Tensor<T> backward(const Tensor<T>& dy) const;

 private:
  bool active_ = false;
  std::vector<T> mask_;
};

template <typename T>
class Embeddings {
 public:
  Embeddings() = default;
  Embeddings(const EncoderConfig& cfg, Rng& rng);
  Tensor<T> forward(const TokenBatch& tokens, bool train, Rng* rng, double dropout);
  void backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);

  Param<T> token, position, ln_gain, ln_bias;

 private:
  std::vector<std::int32_t> ids_;
  std::size_t seq_ = 0;
  Tensor<T> sum_;
  LayerNormCache<T> ln_cache_;
  Dropout<T> drop_;
};

// Multi-head self-attention followed by add & post-layer-norm.
template <typename T>
class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(const std::string& prefix, const EncoderConfig& cfg, Rng& rng);
  // x: [B x T x d]; pad_mask[b*T + t] != 0 marks padding keys.
  Tensor<T> forward(const Tensor<T>& x, std::span<const std::uint8_t> pad_mask, bool train,
                    Rng* rng, double dropout);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);

  Param<T> qkv_weight, qkv_bias, out_weight, out_bias, ln_gain, ln_bias;

 private:
  int heads_ = 1;
  std::size_t batch_ = 0, seq_ = 0, d_ = 0;
  Tensor<T> x_, qkv_, probs_, context_, sum_;
  LayerNormCache<T> ln_cache_;
  Dropout<T> drop_;
};

template <typename T>
struct FeedForward {
  Param<T> in_weight, in_bias, out_weight, out_bias;
  Tensor<T> x, pre, act;

  void init(const std::string& prefix, int d_model, int d_ff, Rng& rng);
  void reinit(Rng& rng);
  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);
};

// The memory block: x' = LN(x + alpha*FFN(x) + beta*PKM(x)).
template <typename T>
class MemoryBlock {
 public:
  MemoryBlock() = default;
  MemoryBlock(const std::string& prefix, const EncoderConfig& cfg, BlockVariant variant, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x, bool train, Rng* rng, double dropout,
                    MemoryAccess* access = nullptr);
  Tensor<T> backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out);

  BlockVariant variant() const { return variant_; }
  std::optional<FeedForward<T>>& ffn() { return ffn_; }
  std::optional<ProductKeyMemory<T>>& memory() { return memory_; }
  const std::optional<ProductKeyMemory<T>>& memory() const { return memory_; }

  Param<T> ln_gain, ln_bias;

 private:
  BlockVariant variant_;
  std::optional<FeedForward<T>> ffn_;
  std::optional<ProductKeyMemory<T>> memory_;
  Tensor<T> sum_;
  LayerNormCache<T> ln_cache_;
  Dropout<T> ffn_drop_, mem_drop_;
};

// Dense + GELU + LN transform followed by the vocabulary projection.
template <typename T>
class MlmHead {
 public:
  MlmHead() = default;
  MlmHead(const EncoderConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& h);  // [N x d] -> [N x V]
  Tensor<T> backward(const Tensor<T>& dlogits);
  void collect(ParamList<T>& out);

  Param<T> transform_weight, transform_bias, ln_gain, ln_bias, decoder_weight, decoder_bias;

 private:
  Tensor<T> h_, pre_, act_, normed_;
  LayerNormCache<T> ln_cache_;
};

// First-position pooling with a tanh projection, then a linear classifier.
template <typename T>
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(const EncoderConfig& cfg, Rng& rng);
  Tensor<T> forward(const Tensor<T>& hidden);  // [B x T x d] -> [B x classes]
  Tensor<T> backward(const Tensor<T>& dlogits);
  void collect(ParamList<T>& out);

  Param<T> pooler_weight, pooler_bias, out_weight, out_bias;

 private:
  Shape hidden_shape_;
  Tensor<T> first_, pooled_;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> hidden;                    // [B x T x d]
  std::vector<MemoryAccess> accesses;  // one per memory layer, ascending layer
  std::vector<int> access_layers;      // 1-based layer of each access record
};

template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderConfig cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }

  EncoderOutput<T> forward(const TokenBatch& tokens, bool train, Rng* dropout_rng = nullptr);
  void backward(const Tensor<T>& dhidden);

  // Logits for hidden rows at flat positions (b*T + t).
  Tensor<T> mlm_logits(const Tensor<T>& hidden, std::span<const std::size_t> positions);
  // Returns the gradient w.r.t. the full hidden tensor.
  Tensor<T> mlm_backward(const Tensor<T>& dlogits);

  bool has_classifier() const { return classifier_.has_value(); }
  void attach_classifier(int num_classes, std::uint64_t seed);
  Tensor<T> classify_logits(const Tensor<T>& hidden);
  Tensor<T> classify_backward(const Tensor<T>& dlogits);

  // Every parameter and buffer, in a fixed registration order.
  ParamList<T> params();
  Param<T>* find(const std::string& name);
  void zero_grad();

  std::vector<ProductKeyMemory<T>*> memories();
  std::vector<MemoryBlock<T>>& memory_blocks() { return blocks_; }
  void set_memory_frozen(bool frozen);
  void set_memory_batch_stats(bool on);

 private:
  EncoderConfig cfg_;
  Embeddings<T> embeddings_;
  std::vector<AttentionBlock<T>> attention_;
  std::vector<MemoryBlock<T>> blocks_;
  MlmHead<T> mlm_;
  std::optional<ClassifierHead<T>> classifier_;
  std::vector<std::uint8_t> pad_mask_;
  std::vector<std::size_t> mlm_positions_;
  Shape hidden_shape_;
};

}  // namespace pkmlab
