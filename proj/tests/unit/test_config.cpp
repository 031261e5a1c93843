#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "pkmlab/config.hpp"

using namespace pkmlab;
using nlohmann::json;

namespace {

// Field path reported for a document that must be rejected.
std::string rejected_field(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

}  // namespace

TEST(Config, DefaultsFromEmptyDocument) {
  const RunConfig rc = parse_config(json::object());
  EXPECT_EQ(rc.train.steps, 10000);
  EXPECT_EQ(rc.train.batch_size, 32);
  EXPECT_EQ(rc.train.seq_len, 64);
  EXPECT_EQ(rc.train.memory_lr, 1e-3);
  EXPECT_EQ(rc.train.warmup(), 500);
  EXPECT_EQ(rc.train.checkpoint_every(), 1000);
  EXPECT_EQ(rc.train.eval_every(), 1000);
  EXPECT_EQ(rc.model.layers, 4);
  EXPECT_EQ(rc.model.d_model, 128);
  EXPECT_EQ(rc.model.memory_positions, (std::vector<int>{2, 4}));
  EXPECT_EQ(rc.model.memory.subkeys, 32);
  EXPECT_EQ(rc.model.memory.heads, 2);
  EXPECT_EQ(rc.model.memory.topk, 8);
  EXPECT_EQ(rc.model.memory.key_dim, 32);
  EXPECT_EQ(rc.corpus.max_vocab, 8192u);
  EXPECT_EQ(rc.corpus.tokenizer, TokenizerMode::kWord);
}

TEST(Config, ParsesSectionsAndResolvesPaths) {
  const json doc = {
      {"out", "runs/x"},
      {"seed", 7},
      {"corpus", {{"path", "data/c.txt"}, {"tokenizer", "char"}, {"max_vocab", 100}}},
      {"model", {{"layers", 6}, {"memory", {{"subkeys", 16}, {"value_init", "zeros"}}}}},
      {"train", {{"steps", 200}, {"variant", "pkm"}, {"memory_optimizer", "sgd"}, {"warmup_steps", 0}}},
      {"finetune", {{"freeze_memory", true}, {"steps", 50}}},
  };
  const RunConfig rc = parse_config(doc, "/base");
  EXPECT_EQ(rc.out, std::filesystem::path("/base/runs/x"));
  EXPECT_EQ(rc.corpus.path, std::filesystem::path("/base/data/c.txt"));
  EXPECT_EQ(rc.corpus.tokenizer, TokenizerMode::kChar);
  EXPECT_EQ(rc.model.layers, 6);
  EXPECT_EQ(rc.model.memory_positions, regular_memory_positions(6, 2));
  EXPECT_EQ(rc.model.memory.value_init, ValueInit::kZeros);
  EXPECT_EQ(rc.train.variant, TrainVariant::kPkm);
  EXPECT_EQ(rc.train.memory_optimizer, SparseRule::kSgd);
  EXPECT_EQ(rc.train.warmup(), 0);
  EXPECT_EQ(rc.train.seed, 7u);
  EXPECT_EQ(rc.finetune.seed, 7u);
  EXPECT_TRUE(rc.finetune.freeze_memory);
  EXPECT_EQ(rc.finetune.warmup(), 5);
  EXPECT_EQ(rc.source, doc);
}

TEST(Config, ErrorsCarryFieldPaths) {
  EXPECT_EQ(rejected_field({{"train", {{"stepz", 1}}}}), "train.stepz");
  EXPECT_EQ(rejected_field({{"train", {{"lr", "fast"}}}}), "train.lr");
  EXPECT_EQ(rejected_field({{"train", {{"variant", "big"}}}}), "train.variant");
  EXPECT_EQ(rejected_field({{"train", {{"steps", -3}}}}), "train.steps");
  EXPECT_EQ(rejected_field({{"train", {{"seq_len", 100}}}}), "train.seq_len");
  EXPECT_EQ(rejected_field({{"model", {{"memory", {{"topk", 64}}}}}}), "model.memory");
  EXPECT_EQ(rejected_field({{"model", {{"vocab_size", 10}}}}), "model.vocab_size");
  EXPECT_EQ(rejected_field({{"model", {{"memory_positions", {1, 9}}}}}), "model.memory_positions");
  EXPECT_EQ(rejected_field({{"corpus", {{"tokenizer", "bpe"}}}}), "corpus.tokenizer");
  EXPECT_EQ(rejected_field({{"bogus", 1}}), "bogus");
  EXPECT_EQ(rejected_field({{"seed", -1}}), "seed");
  EXPECT_EQ(rejected_field(json::array()), "");
}

TEST(Config, ErrorMessageNamesField) {
  try {
    parse_config({{"finetune", {{"batch_size", 0}}}});
    FAIL() << "accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("finetune.batch_size"), std::string::npos) << e.what();
  }
}

TEST(Config, LoadConfigFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "pkmlab_config_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "c.json");
    out << R"({"corpus": {"path": "corpus.txt"}, "train": {"steps": 3}})";
  }
  const RunConfig rc = load_config(dir / "c.json");
  EXPECT_EQ(rc.corpus.path, dir / "corpus.txt");
  EXPECT_EQ(rc.train.steps, 3);
  {
    std::ofstream out(dir / "bad.json");
    out << "{not json";
  }
  EXPECT_THROW(load_config(dir / "bad.json"), ConfigError);
  EXPECT_THROW(load_config(dir / "missing.json"), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Config, EncoderConfigJsonRoundTrip) {
  EncoderConfig c = model_for_variant(EncoderConfig{}, TrainVariant::kPkm, 500);
  c.num_classes = 2;
  c.memory.value_init = ValueInit::kZeros;
  const EncoderConfig back = encoder_config_from_json(json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.memory_variant, BlockVariant::pkm());
  EXPECT_THROW(encoder_config_from_json({{"layers", 2}, {"extra", 1}}), ConfigError);
}

TEST(Config, ModelForVariant) {
  const EncoderConfig trunk;
  const EncoderConfig ffn = model_for_variant(trunk, TrainVariant::kFfn, 100);
  EXPECT_TRUE(ffn.memory_positions.empty());
  EXPECT_EQ(ffn.vocab_size, 100);
  EXPECT_EQ(model_for_variant(trunk, TrainVariant::kPkm, 100).memory_variant, BlockVariant::pkm());
  EXPECT_EQ(model_for_variant(trunk, TrainVariant::kResm, 100).memory_variant, BlockVariant::resm());
  EXPECT_EQ(model_for_variant(trunk, TrainVariant::kResmReinitFfn, 100).memory_variant, BlockVariant::resm());
  EXPECT_EQ(model_for_variant(trunk, TrainVariant::kResm, 100).memory_positions, (std::vector<int>{2, 4}));
}

TEST(Config, EnumStrings) {
  for (const auto v : {TrainVariant::kFfn, TrainVariant::kPkm, TrainVariant::kResm, TrainVariant::kResmReinitFfn}) {
    EXPECT_EQ(train_variant_from_string(to_string(v)), v);
  }
  EXPECT_THROW(train_variant_from_string("nope"), std::invalid_argument);
  EXPECT_EQ(sparse_rule_from_string("sgd"), SparseRule::kSgd);
  EXPECT_FALSE(has_memory(TrainVariant::kFfn));
  EXPECT_TRUE(has_memory(TrainVariant::kResmReinitFfn));
}

TEST(TrainConfig, ScheduleDefaultsAndValidation) {
  TrainConfig t;
  t.steps = 5;
  EXPECT_EQ(t.checkpoint_every(), 1);
  EXPECT_EQ(t.warmup(), 0);
  t.warmup_steps = 6;
  EXPECT_THROW(t.validate(), ConfigError);
  t.warmup_steps = 2;
  t.lr = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t.lr = 1e-3;
  t.memory_lr = -1;
  EXPECT_THROW(t.validate(), ConfigError);
  t.memory_lr = 1e-3;
  EXPECT_NO_THROW(t.validate());
}
