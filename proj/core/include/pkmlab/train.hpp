#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkmlab/adam.hpp"
#include "pkmlab/config.hpp"
#include "pkmlab/encoder.hpp"
#include "pkmlab/metrics.hpp"
#include "pkmlab/mlm.hpp"
#include "pkmlab/vocab.hpp"

namespace pkmlab {

// base * s / warmup for 1-based step s <= warmup, base afterwards.
double warmup_lr(double base, std::int64_t step, std::int64_t warmup);

// Dense Adam for every trainable tensor plus row-wise updates for memory
// value tables. State is keyed by parameter name.
class ModelOptimizer {
 public:
  ModelOptimizer(Encoder<float>& model, AdamConfig dense, AdamConfig memory,
                 SparseRule memory_rule = SparseRule::kAdam);

  // Memory parameters (dense and sparse) are skipped when `freeze_memory`.
  void step(Encoder<float>& model, double lr, double memory_lr, bool freeze_memory = false);

  // Row-wise optimizer of the value table named `values_name`; throws if unknown.
  const SparseRowOptimizer<float>& memory_optimizer(const std::string& values_name) const {
    return sparse_.at(values_name);
  }

 private:
  std::map<std::string, AdamState<float>> dense_;
  std::map<std::string, SparseRowOptimizer<float>> sparse_;
};

struct CorpusSplit {
  std::vector<std::int32_t> train;    // flat token stream
  std::vector<std::int32_t> heldout;  // flat token stream
  std::size_t train_lines = 0;
  std::size_t heldout_lines = 0;
};

// Line i is held out when i % heldout_every == heldout_every - 1.
CorpusSplit split_corpus(const std::vector<std::string>& lines, const Vocab& vocab,
                         int heldout_every);

// Rows of [CLS] followed by seq-1 consecutive stream tokens from random offsets.
TokenBatch sample_windows(std::span<const std::int32_t> stream, std::size_t batch, std::size_t seq,
                          Rng& rng);

// Consecutive non-overlapping windows; a trailing partial batch is kept.
// `max_batches` 0 keeps all. Throws if the stream cannot fill one window.
std::vector<TokenBatch> sequential_batches(std::span<const std::int32_t> stream, std::size_t batch,
                                           std::size_t seq, std::size_t max_batches = 0);

struct EvalResult {
  double mlm_loss = 0.0;  // mean over all masked positions
  double ppl = 0.0;
  std::size_t masked = 0;
  std::vector<int> memory_layers;
  std::vector<AccessLog> logs;  // one per memory layer, over every non-pad position
  std::vector<LayerReport> layers;
};

// Eval-mode MLM loss and memory utilization. Masks are drawn from `mask_seed`
// so different models see identical corrupted inputs.
EvalResult evaluate(Encoder<float>& model, const std::vector<TokenBatch>& batches,
                    double mask_prob, std::uint64_t mask_seed);

struct EvalRecord {
  std::int64_t step = 0;
  double mlm_loss = 0.0;
  double ppl = 0.0;
  double train_loss = 0.0;  // mean over the steps since the previous record
  std::vector<LayerReport> layers;
};
nlohmann::json to_json(const EvalRecord& r);

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  nlohmann::json run_echo = nlohmann::json::object();
  std::function<void(const EvalRecord&)> on_eval;
};

struct PretrainResult {
  std::vector<double> train_losses;  // one per step
  std::vector<EvalRecord> evals;
  std::vector<std::int64_t> checkpoint_steps;
  std::vector<int> memory_layers;
  // Per memory layer, over the training stream, one bucket per checkpoint
  // interval. Top-1 usage and any-weight usage respectively.
  std::vector<StalenessHistogram> staleness;
  std::vector<StalenessHistogram> staleness_topk;
};

// MLM pretraining. Checkpoints are written at step 0, every checkpoint
// interval and at the final step; evals run every eval interval and at the
// final step (never at step 0). Throws when the training stream cannot fill
// one batch.
PretrainResult pretrain(Encoder<float>& model, const CorpusSplit& data, const TrainConfig& cfg,
                        const PretrainOptions& opts = {});

std::filesystem::path checkpoint_dir(const std::filesystem::path& out, std::int64_t step);

// Builds a memory-augmented model from a memory-free one: trunk and MLM head
// copied by name, memory parameters fresh from `seed`. For kPkm the FFN at
// memory positions is dropped, for kResmReinitFfn it is re-randomized.
Encoder<float> init_from_pretrained(Encoder<float>& base, const EncoderConfig& target,
                                    TrainVariant variant, std::uint64_t seed);

struct LabeledSet {
  std::vector<std::vector<std::int32_t>> ids;  // [CLS] + tokens, truncated
  std::vector<int> labels;
  int num_classes = 0;
  std::size_t size() const { return labels.size(); }
};

LabeledSet encode_labeled(const std::vector<LabeledText>& rows, const Vocab& vocab, int seq_len);

// Right-padded with [PAD] to the longest selected row.
TokenBatch pad_batch(const LabeledSet& set, std::span<const std::size_t> rows);

double accuracy(Encoder<float>& model, const LabeledSet& set, int batch_size);

struct FinetuneResult {
  double initial_accuracy = 0.0;
  double accuracy = 0.0;
  double train_accuracy = 0.0;
  std::vector<double> losses;
  std::vector<int> memory_layers;
  std::vector<LayerReport> utilization;  // over the dev set
  std::uint64_t memory_hash_before = 0;
  std::uint64_t memory_hash_after = 0;
};

// Classification finetuning. Attaches a head when the model has none. Memory
// query normalization uses the pretrained running statistics throughout.
// Throws when the training set has fewer than two classes.
FinetuneResult finetune(Encoder<float>& model, const LabeledSet& train, const LabeledSet& dev,
                        const FinetuneConfig& cfg);

struct ClassdivLayer {
  int layer = 0;
  ClassDivergence divergence;
  std::uint64_t positive_queries = 0;
  std::uint64_t negative_queries = 0;
};

// Top-1 usage split by label (1 positive, 0 negative) over every non-pad
// position, compared per memory layer.
std::vector<ClassdivLayer> class_usage_divergence(Encoder<float>& model, const LabeledSet& set,
                                                  int batch_size);

}  // namespace pkmlab
