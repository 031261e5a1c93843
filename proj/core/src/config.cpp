#include "pkmlab/config.hpp"

#include <fstream>
#include <set>

namespace pkmlab {

using nlohmann::json;
namespace fs = std::filesystem;

ConfigError::ConfigError(const std::string& field, const std::string& message)
    : std::runtime_error("config: " + (field.empty() ? std::string() : field + ": ") + message),
      field_(field) {}

const char* to_string(TrainVariant v) {
  switch (v) {
    case TrainVariant::kFfn: return "ffn";
    case TrainVariant::kPkm: return "pkm";
    case TrainVariant::kResm: return "resm";
    case TrainVariant::kResmReinitFfn: return "resm_reinit_ffn";
  }
  return "?";
}

TrainVariant train_variant_from_string(const std::string& s) {
  if (s == "ffn") return TrainVariant::kFfn;
  if (s == "pkm") return TrainVariant::kPkm;
  if (s == "resm") return TrainVariant::kResm;
  if (s == "resm_reinit_ffn") return TrainVariant::kResmReinitFfn;
  throw std::invalid_argument("unknown variant '" + s + "' (expected ffn|pkm|resm|resm_reinit_ffn)");
}

bool has_memory(TrainVariant v) { return v != TrainVariant::kFfn; }

BlockVariant block_variant(TrainVariant v) {
  switch (v) {
    case TrainVariant::kFfn: return BlockVariant::ffn();
    case TrainVariant::kPkm: return BlockVariant::pkm();
    default: return BlockVariant::resm();
  }
}

const char* to_string(SparseRule r) { return r == SparseRule::kSgd ? "sgd" : "adam"; }

SparseRule sparse_rule_from_string(const std::string& s) {
  if (s == "adam") return SparseRule::kAdam;
  if (s == "sgd") return SparseRule::kSgd;
  throw std::invalid_argument("unknown memory optimizer '" + s + "' (expected adam|sgd)");
}

std::int64_t TrainConfig::warmup() const {
  return warmup_steps >= 0 ? warmup_steps : steps / 20;
}

std::int64_t TrainConfig::checkpoint_every() const {
  if (checkpoint_interval > 0) return checkpoint_interval;
  return std::max<std::int64_t>(1, steps / 10);
}

std::int64_t TrainConfig::eval_every() const {
  return eval_interval > 0 ? eval_interval : checkpoint_every();
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train.steps", "must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  if (seq_len < 2) throw ConfigError("train.seq_len", "must be >= 2");
  if (!(lr > 0)) throw ConfigError("train.lr", "must be > 0");
  if (!(memory_lr > 0)) throw ConfigError("train.memory_lr", "must be > 0");
  if (warmup() > steps) throw ConfigError("train.warmup_steps", "must not exceed train.steps");
  if (mask_prob < 0 || mask_prob > 1) throw ConfigError("train.mask_prob", "must be in [0,1]");
  if (eval_batches < 0) throw ConfigError("train.eval_batches", "must be >= 0");
}

std::int64_t FinetuneConfig::warmup() const {
  return warmup_steps >= 0 ? warmup_steps : steps / 10;
}

void FinetuneConfig::validate() const {
  if (steps < 0) throw ConfigError("finetune.steps", "must be >= 0");
  if (batch_size < 1) throw ConfigError("finetune.batch_size", "must be >= 1");
  if (seq_len < 2) throw ConfigError("finetune.seq_len", "must be >= 2");
  if (lr < 0) throw ConfigError("finetune.lr", "must be >= 0");
  if (warmup() > steps) throw ConfigError("finetune.warmup_steps", "must not exceed finetune.steps");
  if (dev_every < 2) throw ConfigError("finetune.dev_every", "must be >= 2");
}

namespace {

// Reads the fields of one JSON object, rejecting unknown keys.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }

  std::string child(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  template <typename Int>
  void integer(const std::string& key, Int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(child(key), "expected an integer");
      if constexpr (std::is_unsigned_v<Int>) {
        if (v->is_number_unsigned() || v->get<std::int64_t>() >= 0) {
          out = v->get<Int>();
          return;
        }
        throw ConfigError(child(key), "expected a non-negative integer");
      } else {
        out = v->get<Int>();
      }
    }
  }

  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(child(key), "expected a number");
      out = v->get<double>();
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(child(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  bool string(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(child(key), "expected a string");
      out = v->get<std::string>();
      return true;
    }
    return false;
  }

  void path(const std::string& key, fs::path& out, const fs::path& base) {
    std::string s;
    if (string(key, s)) out = resolve(s, base);
  }

  bool int_list(const std::string& key, std::vector<int>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ConfigError(child(key), "expected an array of integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        if (!(*v)[i].is_number_integer()) {
          throw ConfigError(child(key) + "[" + std::to_string(i) + "]", "expected an integer");
        }
        out.push_back((*v)[i].get<int>());
      }
      return true;
    }
    return false;
  }

  template <typename E, typename Parse>
  void enumeration(const std::string& key, E& out, Parse parse) {
    std::string s;
    if (!string(key, s)) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(child(key), e.what());
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(child(key), "unknown field");
    }
  }

  static fs::path resolve(const std::string& s, const fs::path& base) {
    fs::path p(s);
    if (p.is_relative() && !base.empty()) p = base / p;
    return p.lexically_normal();
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_memory(Fields& f, MemoryConfig& m) {
  f.integer("subkeys", m.subkeys);
  f.integer("heads", m.heads);
  f.integer("topk", m.topk);
  f.integer("key_dim", m.key_dim);
  f.integer("value_dim", m.value_dim);
  f.boolean("query_batchnorm", m.query_batchnorm);
  f.enumeration("value_init", m.value_init, value_init_from_string);
}

// Shared by the config file and checkpoint manifests.
void read_model(Fields& f, EncoderConfig& cfg, bool& positions_set) {
  f.integer("layers", cfg.layers);
  f.integer("d_model", cfg.d_model);
  f.integer("attention_heads", cfg.attention_heads);
  f.integer("d_ff", cfg.d_ff);
  f.integer("vocab_size", cfg.vocab_size);
  f.integer("max_len", cfg.max_len);
  f.number("dropout", cfg.dropout);
  f.integer("num_classes", cfg.num_classes);
  positions_set = f.int_list("memory_positions", cfg.memory_positions);
  if (const json* v = f.find("memory_variant")) {
    Fields vf(*v, f.child("memory_variant"));
    vf.integer("alpha", cfg.memory_variant.alpha);
    vf.integer("beta", cfg.memory_variant.beta);
    vf.finish();
  }
  cfg.memory.value_dim = cfg.d_model;
  if (const json* v = f.find("memory")) {
    Fields mf(*v, f.child("memory"));
    read_memory(mf, cfg.memory);
    mf.finish();
  }
}

template <typename Fn>
void rethrow_as(const std::string& section, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    // Validation messages already start with the field path.
    const std::string msg = e.what();
    if (msg.rfind("memory:", 0) == 0) throw ConfigError(section + ".memory", msg.substr(8));
    const auto colon = msg.find(':');
    const auto space = msg.find(' ');
    if (colon != std::string::npos && colon < space) {
      throw ConfigError(msg.substr(0, colon), msg.substr(colon + 2));
    }
    throw ConfigError(section, msg);
  }
}

}  // namespace

nlohmann::json to_json(const EncoderConfig& cfg) {
  return json{
      {"layers", cfg.layers},
      {"d_model", cfg.d_model},
      {"attention_heads", cfg.attention_heads},
      {"d_ff", cfg.d_ff},
      {"vocab_size", cfg.vocab_size},
      {"max_len", cfg.max_len},
      {"dropout", cfg.dropout},
      {"num_classes", cfg.num_classes},
      {"memory_positions", cfg.memory_positions},
      {"memory_variant", {{"alpha", cfg.memory_variant.alpha}, {"beta", cfg.memory_variant.beta}}},
      {"memory",
       {{"subkeys", cfg.memory.subkeys},
        {"heads", cfg.memory.heads},
        {"topk", cfg.memory.topk},
        {"key_dim", cfg.memory.key_dim},
        {"value_dim", cfg.memory.value_dim},
        {"query_batchnorm", cfg.memory.query_batchnorm},
        {"value_init", to_string(cfg.memory.value_init)}}},
  };
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig cfg;
  bool positions_set = false;
  Fields f(j, "model");
  read_model(f, cfg, positions_set);
  f.finish();
  if (!positions_set) cfg.memory_positions.clear();
  rethrow_as("model", [&] { cfg.validate(); });
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return json{
      {"steps", cfg.steps},
      {"batch_size", cfg.batch_size},
      {"seq_len", cfg.seq_len},
      {"lr", cfg.lr},
      {"memory_lr", cfg.memory_lr},
      {"warmup_steps", cfg.warmup()},
      {"checkpoint_interval", cfg.checkpoint_every()},
      {"eval_interval", cfg.eval_every()},
      {"eval_batches", cfg.eval_batches},
      {"mask_prob", cfg.mask_prob},
      {"variant", to_string(cfg.variant)},
      {"init_from", cfg.init_from.string()},
      {"memory_optimizer", to_string(cfg.memory_optimizer)},
      {"seed", cfg.seed},
  };
}

EncoderConfig model_for_variant(const EncoderConfig& trunk, TrainVariant variant, int vocab_size) {
  EncoderConfig cfg = trunk;
  cfg.vocab_size = vocab_size;
  cfg.memory_variant = block_variant(variant);
  if (!has_memory(variant)) cfg.memory_positions.clear();
  return cfg;
}

RunConfig parse_config(const nlohmann::json& doc, const fs::path& base_dir) {
  RunConfig rc;
  rc.source = doc;
  Fields top(doc, "");
  top.path("out", rc.out, base_dir);

  std::uint64_t seed = 0;
  bool seed_set = false;
  if (const json* v = top.find("seed")) {
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
      throw ConfigError("seed", "expected a non-negative integer");
    }
    seed = v->get<std::uint64_t>();
    seed_set = true;
  }

  if (const json* v = top.find("corpus")) {
    Fields f(*v, "corpus");
    f.path("path", rc.corpus.path, base_dir);
    f.path("vocab", rc.corpus.vocab, base_dir);
    f.enumeration("tokenizer", rc.corpus.tokenizer, tokenizer_mode_from_string);
    f.integer("max_vocab", rc.corpus.max_vocab);
    f.integer("heldout_every", rc.corpus.heldout_every);
    f.finish();
    if (rc.corpus.max_vocab <= static_cast<std::size_t>(kNumReserved)) {
      throw ConfigError("corpus.max_vocab", "must exceed the reserved token count");
    }
    if (rc.corpus.heldout_every < 2) throw ConfigError("corpus.heldout_every", "must be >= 2");
  }

  bool positions_set = false;
  if (const json* v = top.find("model")) {
    if (v->is_object() && v->contains("vocab_size")) {
      throw ConfigError("model.vocab_size", "derived from the vocabulary; remove it");
    }
    Fields f(*v, "model");
    read_model(f, rc.model, positions_set);
    f.finish();
  }
  if (!positions_set) rc.model.memory_positions = regular_memory_positions(rc.model.layers, 2);

  if (const json* v = top.find("train")) {
    Fields f(*v, "train");
    auto& t = rc.train;
    f.integer("steps", t.steps);
    f.integer("batch_size", t.batch_size);
    f.integer("seq_len", t.seq_len);
    f.number("lr", t.lr);
    f.number("memory_lr", t.memory_lr);
    f.integer("warmup_steps", t.warmup_steps);
    f.integer("checkpoint_interval", t.checkpoint_interval);
    f.integer("eval_interval", t.eval_interval);
    f.integer("eval_batches", t.eval_batches);
    f.number("mask_prob", t.mask_prob);
    f.enumeration("variant", t.variant, train_variant_from_string);
    f.path("init_from", t.init_from, base_dir);
    f.enumeration("memory_optimizer", t.memory_optimizer, sparse_rule_from_string);
    f.integer("seed", t.seed);
    f.finish();
  }

  if (const json* v = top.find("finetune")) {
    Fields f(*v, "finetune");
    auto& t = rc.finetune;
    f.path("checkpoint", t.checkpoint, base_dir);
    f.path("train_data", t.train_data, base_dir);
    f.path("dev_data", t.dev_data, base_dir);
    f.integer("dev_every", t.dev_every);
    f.integer("steps", t.steps);
    f.integer("batch_size", t.batch_size);
    f.integer("seq_len", t.seq_len);
    f.number("lr", t.lr);
    f.integer("warmup_steps", t.warmup_steps);
    f.boolean("freeze_memory", t.freeze_memory);
    f.integer("seed", t.seed);
    f.finish();
  }

  if (const json* v = top.find("analyze")) {
    Fields f(*v, "analyze");
    auto& a = rc.analyze;
    if (const json* c = f.find("checkpoints")) {
      if (!c->is_array()) throw ConfigError("analyze.checkpoints", "expected an array of paths");
      for (std::size_t i = 0; i < c->size(); ++i) {
        if (!(*c)[i].is_string()) {
          throw ConfigError("analyze.checkpoints[" + std::to_string(i) + "]", "expected a string");
        }
        a.checkpoints.push_back(Fields::resolve((*c)[i].get<std::string>(), base_dir));
      }
    }
    f.path("corpus", a.corpus, base_dir);
    f.boolean("heldout_only", a.heldout_only);
    f.integer("batch_size", a.batch_size);
    f.integer("seq_len", a.seq_len);
    f.integer("max_batches", a.max_batches);
    f.finish();
    if (a.batch_size < 1) throw ConfigError("analyze.batch_size", "must be >= 1");
    if (a.seq_len < 2) throw ConfigError("analyze.seq_len", "must be >= 2");
  }

  if (const json* v = top.find("classdiv")) {
    Fields f(*v, "classdiv");
    auto& c = rc.classdiv;
    f.path("checkpoint", c.checkpoint, base_dir);
    f.path("data", c.data, base_dir);
    f.integer("batch_size", c.batch_size);
    f.integer("seq_len", c.seq_len);
    f.finish();
    if (c.batch_size < 1) throw ConfigError("classdiv.batch_size", "must be >= 1");
    if (c.seq_len < 2) throw ConfigError("classdiv.seq_len", "must be >= 2");
  }

  if (const json* v = top.find("bench")) {
    Fields f(*v, "bench");
    auto& b = rc.bench;
    f.integer("iterations", b.iterations);
    f.integer("warmup", b.warmup);
    f.integer("runs", b.runs);
    f.integer("batch_size", b.batch_size);
    f.integer("seq_len", b.seq_len);
    f.int_list("search_subkeys", b.search_subkeys);
    f.integer("search_topk", b.search_topk);
    f.integer("search_key_dim", b.search_key_dim);
    f.integer("search_queries", b.search_queries);
    f.finish();
    if (b.iterations < 30) throw ConfigError("bench.iterations", "must be >= 30");
    if (b.runs < 1) throw ConfigError("bench.runs", "must be >= 1");
    if (b.warmup < 0) throw ConfigError("bench.warmup", "must be >= 0");
    for (std::size_t i = 0; i < b.search_subkeys.size(); ++i) {
      if (b.search_subkeys[i] < 2) {
        throw ConfigError("bench.search_subkeys[" + std::to_string(i) + "]", "must be >= 2");
      }
    }
  }
  top.finish();

  if (seed_set) {
    rc.train.seed = seed;
    rc.finetune.seed = seed;
  }
  rc.train.validate();
  rc.finetune.validate();
  // Vocabulary size is not known yet; validate the trunk with a placeholder.
  EncoderConfig probe = model_for_variant(rc.model, rc.train.variant, kNumReserved + 1);
  rethrow_as("model", [&] { probe.validate(); });
  if (rc.train.seq_len > rc.model.max_len) {
    throw ConfigError("train.seq_len", "exceeds model.max_len");
  }
  return rc;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc, path.parent_path());
}

}  // namespace pkmlab
