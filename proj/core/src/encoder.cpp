#include "pkmlab/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

namespace pkmlab {

void BlockVariant::validate() const {
  if ((alpha != 0 && alpha != 1) || (beta != 0 && beta != 1)) {
    throw std::invalid_argument("block variant: alpha and beta must be 0 or 1");
  }
  if (alpha == 0 && beta == 0) throw std::invalid_argument("block variant: (0,0) has no sub-layer");
}

BlockVariant EncoderConfig::variant_at(int layer) const {
  return is_memory_layer(layer) ? memory_variant : BlockVariant::ffn();
}

bool EncoderConfig::is_memory_layer(int layer) const {
  return std::find(memory_positions.begin(), memory_positions.end(), layer) !=
         memory_positions.end();
}

void EncoderConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("model.layers must be >= 1");
  if (d_model < 2) throw std::invalid_argument("model.d_model must be >= 2");
  if (attention_heads < 1 || d_model % attention_heads != 0) {
    throw std::invalid_argument("model.attention_heads must divide d_model");
  }
  if (d_ff < 1) throw std::invalid_argument("model.d_ff must be >= 1");
  if (vocab_size <= kNumReserved) throw std::invalid_argument("model.vocab_size too small");
  if (max_len < 1) throw std::invalid_argument("model.max_len must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model.dropout must be in [0,1)");
  std::set<int> seen;
  for (const int p : memory_positions) {
    if (p < 1 || p > layers) {
      throw std::invalid_argument("model.memory_positions: " + std::to_string(p) +
                                  " outside [1, layers]");
    }
    if (!seen.insert(p).second) throw std::invalid_argument("model.memory_positions: duplicate");
  }
  memory_variant.validate();
  if (!memory_positions.empty()) {
    memory.validate();
    if (memory.value_dim != d_model) {
      throw std::invalid_argument("model.memory.value_dim must equal d_model");
    }
  }
  if (num_classes < 0) throw std::invalid_argument("model.num_classes must be >= 0");
}

std::vector<int> regular_memory_positions(int layers, int count) {
  std::vector<int> out;
  if (layers < 1 || count < 1) return out;
  const int spacing = std::max(1, (layers + count) / (count + 1));
  for (int i = 1; i <= count; ++i) {
    const int p = std::min(layers, i * spacing);
    if (out.empty() || out.back() != p) out.push_back(p);
  }
  return out;
}

namespace {

template <typename T>
void init_normal(Param<T>& p, Rng& rng, double sigma = 0.02) {
  for (auto& v : p.value.vec()) v = static_cast<T>(rng.normal(0.0, sigma));
}

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i];
}

}  // namespace

// ---------------------------------------------------------------- Dropout

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, double p, bool train, Rng* rng) {
  active_ = train && p > 0.0 && rng != nullptr;
  if (!active_) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  mask_.resize(x.size());
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask_[i] = rng->bernoulli(p) ? T(0) : scale;
    y[i] = x[i] * mask_[i];
  }
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& dy) const {
  if (!active_) return dy;
  Tensor<T> dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask_[i];
  return dx;
}

// ---------------------------------------------------------------- Embeddings

template <typename T>
Embeddings<T>::Embeddings(const EncoderConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  token.init("embeddings.token", {static_cast<std::size_t>(cfg.vocab_size), d});
  position.init("embeddings.position", {static_cast<std::size_t>(cfg.max_len), d});
  ln_gain.init("embeddings.ln.weight", {d});
  ln_bias.init("embeddings.ln.bias", {d});
  init_normal(token, rng);
  init_normal(position, rng);
  ln_gain.value.fill(T(1));
}

template <typename T>
Tensor<T> Embeddings<T>::forward(const TokenBatch& tokens, bool train, Rng* rng, double dropout) {
  const std::size_t d = token.value.cols();
  const std::size_t vocab = token.value.rows();
  if (tokens.seq > position.value.rows()) {
    throw std::invalid_argument("sequence length " + std::to_string(tokens.seq) +
                                " exceeds max_len " + std::to_string(position.value.rows()));
  }
  ids_ = tokens.ids;
  seq_ = tokens.seq;
  sum_ = Tensor<T>({tokens.batch, tokens.seq, d});
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const auto id = ids_[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
    const auto tr = token.value.row(static_cast<std::size_t>(id));
    const auto pr = position.value.row(i % seq_);
    auto out = sum_.row(i);
    for (std::size_t c = 0; c < d; ++c) out[c] = tr[c] + pr[c];
  }
  Tensor<T> y = layer_norm(sum_, ln_gain.value, ln_bias.value, kLayerNormEps, &ln_cache_);
  return drop_.forward(y, dropout, train, rng);
}

template <typename T>
void Embeddings<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dsum;
  layer_norm_backward(drop_.backward(dy), sum_, ln_gain.value, ln_cache_, dsum, &ln_gain.grad,
                      &ln_bias.grad);
  const std::size_t d = token.value.cols();
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const auto g = dsum.row(i);
    auto tg = token.grad.row(static_cast<std::size_t>(ids_[i]));
    auto pg = position.grad.row(i % seq_);
    for (std::size_t c = 0; c < d; ++c) {
      tg[c] += g[c];
      pg[c] += g[c];
    }
  }
}

template <typename T>
void Embeddings<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&token, &position, &ln_gain, &ln_bias}) out.push_back(p);
}

// ---------------------------------------------------------------- Attention

template <typename T>
AttentionBlock<T>::AttentionBlock(const std::string& prefix, const EncoderConfig& cfg, Rng& rng)
    : heads_(cfg.attention_heads) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  qkv_weight.init(prefix + ".attention.qkv.weight", {d, 3 * d});
  qkv_bias.init(prefix + ".attention.qkv.bias", {3 * d});
  out_weight.init(prefix + ".attention.out.weight", {d, d});
  out_bias.init(prefix + ".attention.out.bias", {d});
  ln_gain.init(prefix + ".attention.ln.weight", {d});
  ln_bias.init(prefix + ".attention.ln.bias", {d});
  init_normal(qkv_weight, rng);
  init_normal(out_weight, rng);
  ln_gain.value.fill(T(1));
}

template <typename T>
Tensor<T> AttentionBlock<T>::forward(const Tensor<T>& x, std::span<const std::uint8_t> pad_mask,
                                     bool train, Rng* rng, double dropout) {
  using Strided = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
  batch_ = x.dim(0);
  seq_ = x.dim(1);
  d_ = x.dim(2);
  const std::size_t dh = d_ / static_cast<std::size_t>(heads_);
  const auto t = static_cast<Eigen::Index>(seq_);
  const auto edh = static_cast<Eigen::Index>(dh);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  x_ = x;
  qkv_ = linear_forward(x, qkv_weight.value, qkv_bias.value);
  probs_ = Tensor<T>({batch_, static_cast<std::size_t>(heads_), seq_, seq_});
  context_ = Tensor<T>({batch_, seq_, d_});
  const Eigen::OuterStride<> s3(static_cast<Eigen::Index>(3 * d_));
  const Eigen::OuterStride<> s1(static_cast<Eigen::Index>(d_));
  for (std::size_t b = 0; b < batch_; ++b) {
    const std::uint8_t* pad = pad_mask.empty() ? nullptr : pad_mask.data() + b * seq_;
    bool any_key = pad == nullptr;
    for (std::size_t j = 0; pad != nullptr && j < seq_; ++j) any_key = any_key || pad[j] == 0;
    for (int h = 0; h < heads_; ++h) {
      const T* base = qkv_.data() + b * seq_ * 3 * d_ + static_cast<std::size_t>(h) * dh;
      Strided q(base, t, edh, s3);
      Strided k(base + d_, t, edh, s3);
      Strided v(base + 2 * d_, t, edh, s3);
      T* pb = probs_.data() + (b * heads_ + h) * seq_ * seq_;
      MatMap<T> p(pb, t, t);
      p.noalias() = (q * k.transpose()) * scale;
      if (pad != nullptr && any_key) {
        for (std::size_t j = 0; j < seq_; ++j) {
          if (pad[j] != 0) p.col(static_cast<Eigen::Index>(j)).setConstant(-std::numeric_limits<T>::infinity());
        }
      }
      for (Eigen::Index r = 0; r < t; ++r) {
        const T mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      StridedMut ctx(context_.data() + b * seq_ * d_ + static_cast<std::size_t>(h) * dh, t, edh, s1);
      ctx.noalias() = p * v;
    }
  }
  Tensor<T> attn = linear_forward(context_, out_weight.value, out_bias.value);
  attn = drop_.forward(attn, dropout, train, rng);
  sum_ = x;
  add_into(sum_, attn);
  return layer_norm(sum_, ln_gain.value, ln_bias.value, kLayerNormEps, &ln_cache_);
}

template <typename T>
Tensor<T> AttentionBlock<T>::backward(const Tensor<T>& dy) {
  using Strided = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
  const std::size_t dh = d_ / static_cast<std::size_t>(heads_);
  const auto t = static_cast<Eigen::Index>(seq_);
  const auto edh = static_cast<Eigen::Index>(dh);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<T> dsum;
  layer_norm_backward(dy, sum_, ln_gain.value, ln_cache_, dsum, &ln_gain.grad, &ln_bias.grad);
  Tensor<T> dattn = drop_.backward(dsum);
  Tensor<T> dcontext;
  linear_backward(context_, out_weight.value, dattn, &dcontext, &out_weight.grad, &out_bias.grad);

  Tensor<T> dqkv(qkv_.shape());
  const Eigen::OuterStride<> s3(static_cast<Eigen::Index>(3 * d_));
  const Eigen::OuterStride<> s1(static_cast<Eigen::Index>(d_));
  RowMatrix<T> dp(t, t);
  for (std::size_t b = 0; b < batch_; ++b) {
    for (int h = 0; h < heads_; ++h) {
      const std::size_t off = b * seq_ * 3 * d_ + static_cast<std::size_t>(h) * dh;
      Strided q(qkv_.data() + off, t, edh, s3);
      Strided k(qkv_.data() + off + d_, t, edh, s3);
      Strided v(qkv_.data() + off + 2 * d_, t, edh, s3);
      StridedMut dq(dqkv.data() + off, t, edh, s3);
      StridedMut dk(dqkv.data() + off + d_, t, edh, s3);
      StridedMut dv(dqkv.data() + off + 2 * d_, t, edh, s3);
      ConstMatMap<T> p(probs_.data() + (b * heads_ + h) * seq_ * seq_, t, t);
      Strided dctx(dcontext.data() + b * seq_ * d_ + static_cast<std::size_t>(h) * dh, t, edh, s1);
      dp.noalias() = dctx * v.transpose();
      dv.noalias() = p.transpose() * dctx;
      for (Eigen::Index r = 0; r < t; ++r) {
        const T inner = p.row(r).dot(dp.row(r));
        dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - inner).matrix());
      }
      dp *= scale;
      dq.noalias() = dp * k;
      dk.noalias() = dp.transpose() * q;
    }
  }
  Tensor<T> dx;
  linear_backward(x_, qkv_weight.value, dqkv, &dx, &qkv_weight.grad, &qkv_bias.grad);
  add_into(dx, dsum);
  return dx;
}

template <typename T>
void AttentionBlock<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&qkv_weight, &qkv_bias, &out_weight, &out_bias, &ln_gain, &ln_bias}) {
    out.push_back(p);
  }
}

// ---------------------------------------------------------------- FFN

template <typename T>
void FeedForward<T>::init(const std::string& prefix, int d_model, int d_ff, Rng& rng) {
  const auto d = static_cast<std::size_t>(d_model);
  const auto f = static_cast<std::size_t>(d_ff);
  in_weight.init(prefix + ".ffn.in.weight", {d, f});
  in_bias.init(prefix + ".ffn.in.bias", {f});
  out_weight.init(prefix + ".ffn.out.weight", {f, d});
  out_bias.init(prefix + ".ffn.out.bias", {d});
  reinit(rng);
}

template <typename T>
void FeedForward<T>::reinit(Rng& rng) {
  init_normal(in_weight, rng);
  init_normal(out_weight, rng);
  in_bias.value.zero();
  out_bias.value.zero();
}

template <typename T>
Tensor<T> FeedForward<T>::forward(const Tensor<T>& input) {
  x = input;
  pre = linear_forward(x, in_weight.value, in_bias.value);
  act = gelu(pre);
  return linear_forward(act, out_weight.value, out_bias.value);
}

template <typename T>
Tensor<T> FeedForward<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dact, dx;
  linear_backward(act, out_weight.value, dy, &dact, &out_weight.grad, &out_bias.grad);
  const Tensor<T> dpre = gelu_backward(pre, dact);
  linear_backward(x, in_weight.value, dpre, &dx, &in_weight.grad, &in_bias.grad);
  return dx;
}

template <typename T>
void FeedForward<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&in_weight, &in_bias, &out_weight, &out_bias}) out.push_back(p);
}

// ---------------------------------------------------------------- Memory block

template <typename T>
MemoryBlock<T>::MemoryBlock(const std::string& prefix, const EncoderConfig& cfg,
                            BlockVariant variant, Rng& rng)
    : variant_(variant) {
  variant_.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  ln_gain.init(prefix + ".output_ln.weight", {d});
  ln_bias.init(prefix + ".output_ln.bias", {d});
  ln_gain.value.fill(T(1));
  if (variant_.has_ffn()) {
    ffn_.emplace();
    ffn_->init(prefix, cfg.d_model, cfg.d_ff, rng);
  }
  if (variant_.has_memory()) {
    MemoryConfig mc = cfg.memory;
    mc.value_dim = cfg.d_model;
    memory_.emplace(prefix + ".memory", d, mc, rng);
  }
}

template <typename T>
Tensor<T> MemoryBlock<T>::forward(const Tensor<T>& x, bool train, Rng* rng, double dropout,
                                  MemoryAccess* access) {
  sum_ = x;
  if (ffn_) add_into(sum_, ffn_drop_.forward(ffn_->forward(x), dropout, train, rng));
  if (memory_) add_into(sum_, mem_drop_.forward(memory_->forward(x, train, access), dropout, train, rng));
  return layer_norm(sum_, ln_gain.value, ln_bias.value, kLayerNormEps, &ln_cache_);
}

template <typename T>
Tensor<T> MemoryBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dsum;
  layer_norm_backward(dy, sum_, ln_gain.value, ln_cache_, dsum, &ln_gain.grad, &ln_bias.grad);
  Tensor<T> dx = dsum;
  if (ffn_) add_into(dx, ffn_->backward(ffn_drop_.backward(dsum)));
  if (memory_) add_into(dx, memory_->backward(mem_drop_.backward(dsum)));
  return dx;
}

template <typename T>
void MemoryBlock<T>::collect(ParamList<T>& out) {
  if (ffn_) ffn_->collect(out);
  if (memory_) memory_->collect(out);
  out.push_back(&ln_gain);
  out.push_back(&ln_bias);
}

// ---------------------------------------------------------------- Heads

template <typename T>
MlmHead<T>::MlmHead(const EncoderConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  transform_weight.init("mlm.transform.weight", {d, d});
  transform_bias.init("mlm.transform.bias", {d});
  ln_gain.init("mlm.ln.weight", {d});
  ln_bias.init("mlm.ln.bias", {d});
  decoder_weight.init("mlm.decoder.weight", {d, v});
  decoder_bias.init("mlm.decoder.bias", {v});
  init_normal(transform_weight, rng);
  init_normal(decoder_weight, rng);
  ln_gain.value.fill(T(1));
}

template <typename T>
Tensor<T> MlmHead<T>::forward(const Tensor<T>& h) {
  h_ = h;
  pre_ = linear_forward(h_, transform_weight.value, transform_bias.value);
  act_ = gelu(pre_);
  normed_ = layer_norm(act_, ln_gain.value, ln_bias.value, kLayerNormEps, &ln_cache_);
  return linear_forward(normed_, decoder_weight.value, decoder_bias.value);
}

template <typename T>
Tensor<T> MlmHead<T>::backward(const Tensor<T>& dlogits) {
  Tensor<T> dnormed, dact, dh;
  linear_backward(normed_, decoder_weight.value, dlogits, &dnormed, &decoder_weight.grad,
                  &decoder_bias.grad);
  layer_norm_backward(dnormed, act_, ln_gain.value, ln_cache_, dact, &ln_gain.grad, &ln_bias.grad);
  const Tensor<T> dpre = gelu_backward(pre_, dact);
  linear_backward(h_, transform_weight.value, dpre, &dh, &transform_weight.grad,
                  &transform_bias.grad);
  return dh;
}

template <typename T>
void MlmHead<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&transform_weight, &transform_bias, &ln_gain, &ln_bias, &decoder_weight,
                      &decoder_bias}) {
    out.push_back(p);
  }
}

template <typename T>
ClassifierHead<T>::ClassifierHead(const EncoderConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto c = static_cast<std::size_t>(cfg.num_classes);
  pooler_weight.init("classifier.pooler.weight", {d, d});
  pooler_bias.init("classifier.pooler.bias", {d});
  out_weight.init("classifier.out.weight", {d, c});
  out_bias.init("classifier.out.bias", {c});
  init_normal(pooler_weight, rng);
  init_normal(out_weight, rng);
}

template <typename T>
Tensor<T> ClassifierHead<T>::forward(const Tensor<T>& hidden) {
  hidden_shape_ = hidden.shape();
  const std::size_t b = hidden.dim(0);
  const std::size_t t = hidden.dim(1);
  const std::size_t d = hidden.dim(2);
  first_ = Tensor<T>({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(hidden.data() + i * t * d, d, first_.data() + i * d);
  }
  pooled_ = linear_forward(first_, pooler_weight.value, pooler_bias.value);
  for (auto& v : pooled_.vec()) v = std::tanh(v);
  return linear_forward(pooled_, out_weight.value, out_bias.value);
}

template <typename T>
Tensor<T> ClassifierHead<T>::backward(const Tensor<T>& dlogits) {
  Tensor<T> dpooled, dfirst;
  linear_backward(pooled_, out_weight.value, dlogits, &dpooled, &out_weight.grad, &out_bias.grad);
  for (std::size_t i = 0; i < dpooled.size(); ++i) dpooled[i] *= T(1) - pooled_[i] * pooled_[i];
  linear_backward(first_, pooler_weight.value, dpooled, &dfirst, &pooler_weight.grad,
                  &pooler_bias.grad);
  Tensor<T> dhidden(hidden_shape_);
  const std::size_t t = hidden_shape_[1];
  const std::size_t d = hidden_shape_[2];
  for (std::size_t i = 0; i < hidden_shape_[0]; ++i) {
    std::copy_n(dfirst.data() + i * d, d, dhidden.data() + i * t * d);
  }
  return dhidden;
}

template <typename T>
void ClassifierHead<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&pooler_weight, &pooler_bias, &out_weight, &out_bias}) out.push_back(p);
}

// ---------------------------------------------------------------- Encoder

template <typename T>
Encoder<T>::Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  std::sort(cfg_.memory_positions.begin(), cfg_.memory_positions.end());
  cfg_.memory.value_dim = cfg_.d_model;
  cfg_.validate();
  Rng root(seed);
  Rng emb_rng = root.split();
  embeddings_ = Embeddings<T>(cfg_, emb_rng);
  for (int l = 1; l <= cfg_.layers; ++l) {
    Rng layer_rng = root.split();
    const std::string prefix = "layer" + std::to_string(l);
    attention_.emplace_back(prefix, cfg_, layer_rng);
    blocks_.emplace_back(prefix, cfg_, cfg_.variant_at(l), layer_rng);
  }
  Rng head_rng = root.split();
  mlm_ = MlmHead<T>(cfg_, head_rng);
  if (cfg_.num_classes > 0) attach_classifier(cfg_.num_classes, root.next());
}

template <typename T>
void Encoder<T>::attach_classifier(int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  cfg_.num_classes = num_classes;
  Rng rng(seed);
  classifier_.emplace(cfg_, rng);
}

template <typename T>
EncoderOutput<T> Encoder<T>::forward(const TokenBatch& tokens, bool train, Rng* dropout_rng) {
  if (tokens.ids.size() != tokens.batch * tokens.seq) {
    throw std::invalid_argument("token batch: ids size does not match batch x seq");
  }
  EncoderOutput<T> out;
  hidden_shape_ = {tokens.batch, tokens.seq, static_cast<std::size_t>(cfg_.d_model)};
  if (tokens.batch == 0) {
    out.hidden = Tensor<T>(hidden_shape_);
    return out;
  }
  pad_mask_.resize(tokens.ids.size());
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) pad_mask_[i] = tokens.ids[i] == kPadId;
  const double p = cfg_.dropout;
  Tensor<T> h = embeddings_.forward(tokens, train, dropout_rng, p);
  for (int l = 0; l < cfg_.layers; ++l) {
    h = attention_[l].forward(h, pad_mask_, train, dropout_rng, p);
    MemoryAccess* access = nullptr;
    if (blocks_[l].variant().has_memory()) {
      out.accesses.emplace_back();
      out.access_layers.push_back(l + 1);
      access = &out.accesses.back();
    }
    h = blocks_[l].forward(h, train, dropout_rng, p, access);
  }
  out.hidden = std::move(h);
  return out;
}

template <typename T>
void Encoder<T>::backward(const Tensor<T>& dhidden) {
  if (hidden_shape_.empty() || hidden_shape_[0] == 0) return;
  Tensor<T> g = dhidden;
  for (int l = cfg_.layers - 1; l >= 0; --l) {
    g = blocks_[l].backward(g);
    g = attention_[l].backward(g);
  }
  embeddings_.backward(g);
}

template <typename T>
Tensor<T> Encoder<T>::mlm_logits(const Tensor<T>& hidden, std::span<const std::size_t> positions) {
  const std::size_t d = hidden.cols();
  mlm_positions_.assign(positions.begin(), positions.end());
  Tensor<T> rows({positions.size(), d});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= hidden.rows()) throw std::out_of_range("mlm position out of range");
    std::copy_n(hidden.data() + positions[i] * d, d, rows.data() + i * d);
  }
  return mlm_.forward(rows);
}

template <typename T>
Tensor<T> Encoder<T>::mlm_backward(const Tensor<T>& dlogits) {
  const Tensor<T> drows = mlm_.backward(dlogits);
  Tensor<T> dhidden(hidden_shape_);
  const std::size_t d = dhidden.cols();
  for (std::size_t i = 0; i < mlm_positions_.size(); ++i) {
    T* dst = dhidden.data() + mlm_positions_[i] * d;
    const T* src = drows.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
  return dhidden;
}

template <typename T>
Tensor<T> Encoder<T>::classify_logits(const Tensor<T>& hidden) {
  if (!classifier_) throw std::logic_error("classify: no classification head attached");
  return classifier_->forward(hidden);
}

template <typename T>
Tensor<T> Encoder<T>::classify_backward(const Tensor<T>& dlogits) {
  if (!classifier_) throw std::logic_error("classify: no classification head attached");
  return classifier_->backward(dlogits);
}

template <typename T>
ParamList<T> Encoder<T>::params() {
  ParamList<T> out;
  embeddings_.collect(out);
  for (int l = 0; l < cfg_.layers; ++l) {
    attention_[l].collect(out);
    blocks_[l].collect(out);
  }
  mlm_.collect(out);
  if (classifier_) classifier_->collect(out);
  return out;
}

template <typename T>
Param<T>* Encoder<T>::find(const std::string& name) {
  for (Param<T>* p : params()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
void Encoder<T>::zero_grad() {
  for (Param<T>* p : params()) {
    if (p->kind == ParamKind::kDense) p->grad.zero();
  }
  for (auto* m : memories()) m->value_grad.clear(m->values.value.cols());
}

template <typename T>
std::vector<ProductKeyMemory<T>*> Encoder<T>::memories() {
  std::vector<ProductKeyMemory<T>*> out;
  for (auto& b : blocks_) {
    if (b.memory()) out.push_back(&*b.memory());
  }
  return out;
}

template <typename T>
void Encoder<T>::set_memory_frozen(bool frozen) {
  for (auto* m : memories()) m->set_frozen(frozen);
}

template <typename T>
void Encoder<T>::set_memory_batch_stats(bool on) {
  for (auto* m : memories()) m->set_batch_stats(on);
}

#define PKMLAB_INSTANTIATE_ENCODER(T) \
  template class Dropout<T>;          \
  template class Embeddings<T>;       \
  template class AttentionBlock<T>;   \
  template struct FeedForward<T>;     \
  template class MemoryBlock<T>;      \
  template class MlmHead<T>;          \
  template class ClassifierHead<T>;   \
  template class Encoder<T>;

PKMLAB_INSTANTIATE_ENCODER(float)
PKMLAB_INSTANTIATE_ENCODER(double)

}  // namespace pkmlab
