#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

#include <json.hpp>

#include "pkmlab/bench.hpp"
#include "pkmlab/checkpoint.hpp"
#include "pkmlab/metrics.hpp"

using namespace pkmlab;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Runs the CLI with stdout/stderr captured to `log`; returns the exit status.
int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PKMLAB_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

void write_json(const fs::path& p, const json& j) { std::ofstream(p, std::ios::trunc) << j.dump(2); }

// One workspace shared by the pipeline tests: synthetic data and a small trunk.
class CliPipeline : public ::testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    // Per-process directory: ctest may run these cases in parallel.
    root = fs::temp_directory_path() / ("pkmlab_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
    ASSERT_EQ(run_cli("synth --out " + (root / "data").string() +
                          " --bytes 40000 --examples 200 --seed 2",
                      root / "synth.log"),
              0)
        << slurp(root / "synth.log");
  }
  static void TearDownTestSuite() { fs::remove_all(root); }

  static json base_config(const std::string& variant) {
    return {{"corpus", {{"path", (root / "data" / "corpus.txt").string()}, {"max_vocab", 400},
                        {"heldout_every", 10}}},
            {"model", {{"layers", 2}, {"d_model", 16}, {"attention_heads", 2}, {"d_ff", 32},
                       {"max_len", 16}, {"memory_positions", {2}},
                       {"memory", {{"subkeys", 8}, {"heads", 2}, {"topk", 2}, {"key_dim", 8}}}}},
            {"train", {{"steps", 20}, {"batch_size", 4}, {"seq_len", 16}, {"variant", variant},
                       {"checkpoint_interval", 10}, {"eval_batches", 2}, {"lr", 1e-3}}},
            {"seed", 5}};
  }

  static fs::path config_file(const std::string& name, const json& cfg) {
    const fs::path p = root / (name + ".json");
    write_json(p, cfg);
    return p;
  }
};

fs::path CliPipeline::root;

}  // namespace

TEST(Cli, UnknownSubcommandAndMissingConfigFail) {
  const auto log = fs::temp_directory_path() / "pkmlab_cli_usage.log";
  EXPECT_NE(run_cli("frobnicate", log), 0);
  EXPECT_NE(run_cli("pretrain", log), 0);
  EXPECT_NE(run_cli("pretrain --config /nonexistent/c.json", log), 0);
  EXPECT_EQ(run_cli("--version", log), 0);
  fs::remove(log);
}

TEST(Cli, ConfigErrorExitsWithTwoAndNamesField) {
  const auto dir = fs::temp_directory_path() / "pkmlab_cli_cfgerr";
  fs::create_directories(dir);
  write_json(dir / "bad.json", {{"train", {{"stepz", 3}}}});
  EXPECT_EQ(run_cli("pretrain --config " + (dir / "bad.json").string() + " --out " +
                        (dir / "out").string(),
                    dir / "log"),
            2);
  EXPECT_NE(slurp(dir / "log").find("train.stepz"), std::string::npos) << slurp(dir / "log");
  fs::remove_all(dir);
}

TEST_F(CliPipeline, PretrainGraftAnalyzeFinetuneClassdiv) {
  // Memory-free trunk.
  const fs::path ffn_out = root / "ffn";
  ASSERT_EQ(run_cli("pretrain --config " + config_file("ffn", base_config("ffn")).string() +
                        " --out " + ffn_out.string(),
                    root / "ffn.log"),
            0)
      << slurp(root / "ffn.log");
  const json manifest = read_json(ffn_out / "run_manifest.json");
  EXPECT_EQ(manifest.at("command"), "pretrain");
  EXPECT_EQ(manifest.at("seed").at("train"), 5);
  for (const auto& [key, path] : manifest.at("outputs").items()) {
    EXPECT_TRUE(fs::exists(path.get<std::string>())) << key;
  }
  std::ifstream metrics(ffn_out / "metrics.jsonl");
  std::string line;
  int rows = 0;
  while (std::getline(metrics, line)) {
    EXPECT_TRUE(json::parse(line).at("layers").empty());
    ++rows;
  }
  EXPECT_EQ(rows, 2);
  const fs::path trunk = ffn_out / "checkpoints" / "step_00000020";
  ASSERT_TRUE(fs::exists(trunk / "manifest.json"));

  // ResM graft with zero-initialized values starts from the trunk's predictions.
  json graft = base_config("resm");
  graft["train"]["init_from"] = trunk.string();
  graft["train"]["steps"] = 10;
  graft["model"]["memory"]["value_init"] = "zeros";
  const fs::path graft_out = root / "graft";
  ASSERT_EQ(run_cli("graft --config " + config_file("graft", graft).string() + " --out " +
                        graft_out.string(),
                    root / "graft.log"),
            0)
      << slurp(root / "graft.log");
  std::ifstream util(graft_out / "utilization.csv");
  const auto reports = read_utilization_csv(util);
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_EQ(reports[0].layer, 2);
  EXPECT_GT(reports[0].mu, 0.0);
  EXPECT_LE(reports[0].mu, 1.0);

  // Analyze the graft's initial checkpoint: zero values, so the trunk loss.
  json analyze = graft;
  analyze["analyze"] = {{"checkpoints", {(graft_out / "checkpoints" / "step_00000000").string(),
                                         trunk.string()}},
                        {"batch_size", 4},
                        {"seq_len", 16}};
  const fs::path an_out = root / "analyze";
  ASSERT_EQ(run_cli("analyze --config " + config_file("analyze", analyze).string() + " --out " +
                        an_out.string(),
                    root / "analyze.log"),
            0)
      << slurp(root / "analyze.log");
  const json report = read_json(an_out / "analysis.json");
  ASSERT_EQ(report.size(), 2u);
  EXPECT_NEAR(report[0].at("mlm_loss").get<double>(), report[1].at("mlm_loss").get<double>(), 1e-4);
  EXPECT_EQ(report[0].at("layers").size(), 1u);
  EXPECT_TRUE(report[1].at("layers").empty());

  // Frozen finetune leaves the memory untouched.
  json ft = graft;
  ft["finetune"] = {{"checkpoint", (graft_out / "checkpoints" / "step_00000010").string()},
                    {"train_data", (root / "data" / "task_train.tsv").string()},
                    {"dev_data", (root / "data" / "task_dev.tsv").string()},
                    {"steps", 20},
                    {"batch_size", 8},
                    {"seq_len", 16},
                    {"freeze_memory", true}};
  const fs::path ft_out = root / "finetune";
  ASSERT_EQ(run_cli("finetune --config " + config_file("finetune", ft).string() + " --out " +
                        ft_out.string(),
                    root / "finetune.log"),
            0)
      << slurp(root / "finetune.log");
  const json ftr = read_json(ft_out / "finetune.json");
  EXPECT_TRUE(ftr.at("memory_unchanged").get<bool>());
  EXPECT_GE(ftr.at("accuracy").get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(ft_out / "finetuned" / "params.bin"));

  json cd = graft;
  cd["classdiv"] = {{"checkpoint", (graft_out / "checkpoints" / "step_00000010").string()},
                    {"data", (root / "data" / "task_dev.tsv").string()}};
  const fs::path cd_out = root / "classdiv";
  ASSERT_EQ(run_cli("classdiv --config " + config_file("classdiv", cd).string() + " --out " +
                        cd_out.string(),
                    root / "classdiv.log"),
            0)
      << slurp(root / "classdiv.log");
  const json cdr = read_json(cd_out / "classdiv.json");
  ASSERT_EQ(cdr.size(), 1u);
  EXPECT_GE(cdr[0].at("KL").get<double>(), 0.0);
  EXPECT_GE(cdr[0].at("IOU").get<double>(), 0.0);
  EXPECT_LE(cdr[0].at("IOU").get<double>(), 1.0);
}

TEST_F(CliPipeline, SeedOverrideAndDeterminism) {
  json cfg = base_config("pkm");
  cfg["train"]["steps"] = 5;
  const fs::path c = config_file("pkm", cfg);
  for (const char* name : {"a", "b"}) {
    ASSERT_EQ(run_cli("pretrain --config " + c.string() + " --seed 9 --out " + (root / name).string(),
                      root / "pkm.log"),
              0)
        << slurp(root / "pkm.log");
  }
  EXPECT_EQ(read_json(root / "a" / "run_manifest.json").at("seed").at("train"), 9);
  const auto last = fs::path("checkpoints") / "step_00000005" / "params.bin";
  EXPECT_EQ(slurp(root / "a" / last), slurp(root / "b" / last));
  EXPECT_EQ(slurp(root / "a" / "metrics.jsonl"), slurp(root / "b" / "metrics.jsonl"));
}

TEST_F(CliPipeline, BenchWritesParsableRows) {
  json cfg = base_config("pkm");
  cfg["bench"] = {{"iterations", 30}, {"warmup", 1}, {"runs", 1}, {"batch_size", 2},
                  {"seq_len", 8}, {"search_subkeys", {8, 16}}, {"search_queries", 4}};
  const fs::path out = root / "bench";
  ASSERT_EQ(run_cli("bench --config " + config_file("bench", cfg).string() + " --out " + out.string(),
                    root / "bench.log"),
            0)
      << slurp(root / "bench.log");
  std::ifstream in(out / "bench.csv");
  const auto rows = read_bench_csv(in);
  int blocks = 0, searches = 0;
  for (const auto& r : rows) {
    EXPECT_GT(r.median_ms, 0.0);
    (r.kind == "block" ? blocks : searches) += 1;
  }
  EXPECT_EQ(blocks, 3);
  EXPECT_EQ(searches, 4);
}

TEST_F(CliPipeline, VocabCommandIsByteReproducible) {
  const fs::path c = config_file("vocab", base_config("ffn"));
  ASSERT_EQ(run_cli("vocab --config " + c.string() + " --out " + (root / "v1").string(), root / "v.log"), 0);
  ASSERT_EQ(run_cli("vocab --config " + c.string() + " --out " + (root / "v2").string(), root / "v.log"), 0);
  EXPECT_EQ(slurp(root / "v1" / "vocab.txt"), slurp(root / "v2" / "vocab.txt"));
}
