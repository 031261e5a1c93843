#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkmlab/adam.hpp"
#include "pkmlab/encoder.hpp"
#include "pkmlab/vocab.hpp"

namespace pkmlab {

// Schema violation; `field()` is the dotted path of the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& message);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class TrainVariant { kFfn, kPkm, kResm, kResmReinitFfn };

const char* to_string(TrainVariant v);
TrainVariant train_variant_from_string(const std::string& s);
bool has_memory(TrainVariant v);
BlockVariant block_variant(TrainVariant v);

const char* to_string(SparseRule r);
SparseRule sparse_rule_from_string(const std::string& s);

struct CorpusConfig {
  std::filesystem::path path;   // one document per line
  std::filesystem::path vocab;  // optional prebuilt vocabulary file
  TokenizerMode tokenizer = TokenizerMode::kWord;
  std::size_t max_vocab = 8192;
  int heldout_every = 20;  // line i is held out when i % heldout_every == heldout_every - 1
};

struct TrainConfig {
  std::int64_t steps = 10000;
  int batch_size = 32;
  int seq_len = 64;
  double lr = 5e-4;
  double memory_lr = 1e-3;
  std::int64_t warmup_steps = -1;         // -1: 5% of steps
  std::int64_t checkpoint_interval = -1;  // -1: 10% of steps
  std::int64_t eval_interval = -1;        // -1: checkpoint interval
  int eval_batches = 16;                  // held-out batches per eval, 0 = all
  double mask_prob = 0.15;
  TrainVariant variant = TrainVariant::kResm;
  std::filesystem::path init_from;  // memory-free checkpoint to graft from
  SparseRule memory_optimizer = SparseRule::kAdam;
  std::uint64_t seed = 1;

  std::int64_t warmup() const;
  std::int64_t checkpoint_every() const;
  std::int64_t eval_every() const;
  void validate() const;
};

struct FinetuneConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path train_data;  // label<TAB>text
  std::filesystem::path dev_data;    // optional; otherwise every `dev_every`-th line
  int dev_every = 5;
  std::int64_t steps = 500;
  int batch_size = 32;
  int seq_len = 32;
  double lr = 5e-4;
  std::int64_t warmup_steps = -1;  // -1: 10% of steps
  bool freeze_memory = false;
  std::uint64_t seed = 1;

  std::int64_t warmup() const;
  void validate() const;
};

struct AnalyzeConfig {
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path corpus;  // defaults to the corpus section
  bool heldout_only = true;
  int batch_size = 32;
  int seq_len = 64;
  int max_batches = 0;  // 0 = all
};

struct ClassdivConfig {
  std::filesystem::path checkpoint;
  std::filesystem::path data;  // label<TAB>text, labels 0/1
  int batch_size = 32;
  int seq_len = 32;
};

struct BenchConfig {
  int iterations = 30;
  int warmup = 5;
  int runs = 3;
  int batch_size = 8;
  int seq_len = 64;
  std::vector<int> search_subkeys = {128, 256};
  int search_topk = 8;
  int search_key_dim = 32;
  int search_queries = 32;
};

struct RunConfig {
  std::filesystem::path out = "runs/default";
  CorpusConfig corpus;
  EncoderConfig model;  // trunk and memory shape; vocab size and variant are filled in per run
  TrainConfig train;
  FinetuneConfig finetune;
  AnalyzeConfig analyze;
  ClassdivConfig classdiv;
  BenchConfig bench;
  nlohmann::json source;  // the parsed document
};

// Parses and validates a config document. Relative paths are resolved
// against `base_dir`.
RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);

// Model for one run: trunk from `trunk`, memory blocks per `variant`.
EncoderConfig model_for_variant(const EncoderConfig& trunk, TrainVariant variant, int vocab_size);

nlohmann::json to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);

}  // namespace pkmlab
