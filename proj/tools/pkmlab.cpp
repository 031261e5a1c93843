// pkmlab command-line driver.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <json.hpp>

#include "pkmlab/bench.hpp"
#include "pkmlab/checkpoint.hpp"
#include "pkmlab/config.hpp"
#include "pkmlab/synth.hpp"
#include "pkmlab/train.hpp"
#include "pkmlab/vocab.hpp"

#ifndef PKMLAB_BUILD_ID
#define PKMLAB_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pkmlab;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

struct Run {
  std::string command;
  RunConfig cfg;
  fs::path out;
  json outputs = json::object();
};

void add_common(CLI::App* sub, CommonArgs& args) {
  sub->add_option("--config", args.config, "JSON config file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", args.out, "Output directory (overrides PKMLAB_OUT and the config)");
  sub->add_option("--seed", args.seed, "Seed for training and finetuning");
}

fs::path resolve_out(const CommonArgs& args, const RunConfig& cfg) {
  if (!args.out.empty()) return args.out;
  if (const char* env = std::getenv("PKMLAB_OUT"); env != nullptr && *env != '\0') return env;
  return cfg.out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Loads the config, applies overrides and writes run_manifest.json before
// anything else lands in the output directory.
Run start_run(const std::string& command, const CommonArgs& args, json outputs) {
  Run run;
  run.command = command;
  run.cfg = load_config(args.config);
  if (args.seed) {
    run.cfg.train.seed = *args.seed;
    run.cfg.finetune.seed = *args.seed;
  }
  run.out = resolve_out(args, run.cfg);
  fs::create_directories(run.out);
  for (auto& [key, value] : outputs.items()) value = (run.out / value.get<std::string>()).string();
  run.outputs = outputs;
  json manifest = {{"command", command},
                   {"build", PKMLAB_BUILD_ID},
                   {"created", utc_now()},
                   {"config_path", fs::absolute(args.config).string()},
                   {"config", run.cfg.source},
                   {"seed", {{"train", run.cfg.train.seed}, {"finetune", run.cfg.finetune.seed}}},
                   {"out", fs::absolute(run.out).string()},
                   {"outputs", outputs}};
  write_json(run.out / "run_manifest.json", manifest);
  return run;
}

void log(const std::string& msg) { std::cerr << "[pkmlab] " << msg << std::endl; }

Vocab vocab_for_corpus(const RunConfig& cfg, const std::vector<std::string>& lines) {
  if (!cfg.corpus.vocab.empty() && fs::exists(cfg.corpus.vocab)) return Vocab::load(cfg.corpus.vocab);
  return Vocab::build(lines, cfg.corpus.tokenizer, cfg.corpus.max_vocab);
}

// The vocabulary a checkpoint was trained with.
Vocab vocab_for_checkpoint(const RunConfig& cfg, const Checkpoint& ck) {
  if (!cfg.corpus.vocab.empty()) return Vocab::load(cfg.corpus.vocab);
  const auto& run = ck.manifest.at("run");
  if (!run.contains("vocab")) {
    throw std::runtime_error("checkpoint does not record its vocabulary; set corpus.vocab");
  }
  return Vocab::load(run.at("vocab").get<std::string>());
}

std::vector<std::string> corpus_lines(const fs::path& path) {
  if (path.empty()) throw ConfigError("corpus.path", "required by this command");
  auto lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("corpus " + path.string() + " is empty");
  return lines;
}

void print_eval(const EvalRecord& r) {
  std::string layers;
  for (const auto& l : r.layers) {
    char buf[96];
    std::snprintf(buf, sizeof buf, " L%d MU=%.3f top1=%.3f", l.layer, l.mu, l.mu_top1);
    layers += buf;
  }
  char head[128];
  std::snprintf(head, sizeof head, "step %lld train %.4f heldout %.4f ppl %.2f",
                static_cast<long long>(r.step), r.train_loss, r.mlm_loss, r.ppl);
  log(head + layers);
}

int cmd_pretrain(const CommonArgs& args, bool graft) {
  Run run = start_run(graft ? "graft" : "pretrain", args,
                      {{"checkpoints", "checkpoints"},
                       {"metrics", "metrics.jsonl"},
                       {"utilization", "utilization.csv"},
                       {"staleness", "staleness.csv"},
                       {"staleness_topk", "staleness_topk.csv"},
                       {"vocab", "vocab.txt"}});
  const RunConfig& cfg = run.cfg;
  const auto lines = corpus_lines(cfg.corpus.path);

  std::optional<Checkpoint> base;
  if (graft || !cfg.train.init_from.empty()) {
    if (cfg.train.init_from.empty()) throw ConfigError("train.init_from", "required by graft");
    base.emplace(load_checkpoint(cfg.train.init_from));
  }
  const Vocab vocab = base ? vocab_for_checkpoint(cfg, *base) : vocab_for_corpus(cfg, lines);
  const fs::path vocab_path = run.out / "vocab.txt";
  vocab.save(vocab_path);
  const CorpusSplit split = split_corpus(lines, vocab, cfg.corpus.heldout_every);
  log("corpus: " + std::to_string(split.train_lines) + " train lines (" +
      std::to_string(split.train.size()) + " tokens), " + std::to_string(split.heldout_lines) +
      " held-out lines; vocab " + std::to_string(vocab.size()));

  const EncoderConfig target =
      model_for_variant(cfg.model, cfg.train.variant, static_cast<int>(vocab.size()));
  Encoder<float> model = base ? init_from_pretrained(base->model, target, cfg.train.variant,
                                                     cfg.train.seed)
                              : Encoder<float>(target, cfg.train.seed);

  PretrainOptions opts;
  opts.out_dir = run.out;
  opts.run_echo = {{"vocab", fs::absolute(vocab_path).string()},
                   {"command", run.command},
                   {"build", PKMLAB_BUILD_ID}};
  if (base) opts.run_echo["init_from"] = fs::absolute(cfg.train.init_from).string();
  opts.on_eval = print_eval;
  const PretrainResult res = pretrain(model, split, cfg.train, opts);
  log("wrote " + std::to_string(res.checkpoint_steps.size()) + " checkpoints to " +
      (run.out / "checkpoints").string());
  return 0;
}

LabeledSet load_labeled(const fs::path& path, const Vocab& vocab, int seq_len) {
  return encode_labeled(read_labeled_tsv(path), vocab, seq_len);
}

int cmd_finetune(const CommonArgs& args) {
  Run run = start_run("finetune", args,
                      {{"report", "finetune.json"},
                       {"utilization", "utilization.csv"},
                       {"checkpoint", "finetuned"}});
  const FinetuneConfig& fc = run.cfg.finetune;
  if (fc.checkpoint.empty()) throw ConfigError("finetune.checkpoint", "required");
  if (fc.train_data.empty()) throw ConfigError("finetune.train_data", "required");
  Checkpoint ck = load_checkpoint(fc.checkpoint);
  const Vocab vocab = vocab_for_checkpoint(run.cfg, ck);

  LabeledSet train, dev;
  if (!fc.dev_data.empty()) {
    train = load_labeled(fc.train_data, vocab, fc.seq_len);
    dev = load_labeled(fc.dev_data, vocab, fc.seq_len);
  } else {
    const auto rows = read_labeled_tsv(fc.train_data);
    std::vector<LabeledText> tr, dv;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      (static_cast<int>(i % fc.dev_every) == fc.dev_every - 1 ? dv : tr).push_back(rows[i]);
    }
    train = encode_labeled(tr, vocab, fc.seq_len);
    dev = encode_labeled(dv, vocab, fc.seq_len);
  }
  log("finetune: " + std::to_string(train.size()) + " train / " + std::to_string(dev.size()) +
      " dev examples, freeze_memory=" + (fc.freeze_memory ? "true" : "false"));

  const FinetuneResult res = finetune(ck.model, train, dev, fc);
  json util = json::array();
  for (const auto& l : res.utilization) util.push_back(to_json(l));
  const json report = {{"checkpoint", fs::absolute(fc.checkpoint).string()},
                       {"freeze_memory", fc.freeze_memory},
                       {"steps", fc.steps},
                       {"initial_accuracy", res.initial_accuracy},
                       {"accuracy", res.accuracy},
                       {"train_accuracy", res.train_accuracy},
                       {"final_loss", res.losses.empty() ? 0.0 : res.losses.back()},
                       {"memory_hash_before", res.memory_hash_before},
                       {"memory_hash_after", res.memory_hash_after},
                       {"memory_unchanged", res.memory_hash_before == res.memory_hash_after},
                       {"utilization", util}};
  write_json(run.out / "finetune.json", report);
  std::ofstream uc(run.out / "utilization.csv", std::ios::trunc);
  write_utilization_csv(uc, res.utilization);
  json echo = ck.manifest.at("run");
  echo["finetune_from"] = fs::absolute(fc.checkpoint).string();
  save_checkpoint(ck.model, run.out / "finetuned", ck.step, echo);
  char buf[128];
  std::snprintf(buf, sizeof buf, "accuracy %.4f (initial %.4f), memory %s", res.accuracy,
                res.initial_accuracy,
                res.memory_hash_before == res.memory_hash_after ? "unchanged" : "updated");
  log(buf);
  return 0;
}

std::vector<fs::path> checkpoints_in(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (fs::exists(e.path() / "manifest.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_analyze(const CommonArgs& args) {
  Run run = start_run("analyze", args, {{"report", "analysis.json"}});
  const AnalyzeConfig& ac = run.cfg.analyze;
  std::vector<fs::path> cks = ac.checkpoints;
  if (cks.empty()) cks = checkpoints_in(run.out / "checkpoints");
  if (cks.empty()) throw ConfigError("analyze.checkpoints", "no checkpoints given or found");
  const fs::path corpus = ac.corpus.empty() ? run.cfg.corpus.path : ac.corpus;
  const auto lines = corpus_lines(corpus);

  json report = json::array();
  for (const auto& path : cks) {
    Checkpoint ck = load_checkpoint(path);
    const Vocab vocab = vocab_for_checkpoint(run.cfg, ck);
    const CorpusSplit split = split_corpus(lines, vocab, run.cfg.corpus.heldout_every);
    std::vector<std::int32_t> stream = split.heldout;
    if (!ac.heldout_only) stream.insert(stream.end(), split.train.begin(), split.train.end());
    const auto batches = sequential_batches(stream, static_cast<std::size_t>(ac.batch_size),
                                            static_cast<std::size_t>(ac.seq_len),
                                            static_cast<std::size_t>(ac.max_batches));
    const EvalResult ev = evaluate(ck.model, batches, run.cfg.train.mask_prob, run.cfg.train.seed);
    json layers = json::array();
    for (const auto& l : ev.layers) layers.push_back(to_json(l));
    report.push_back({{"checkpoint", fs::absolute(path).string()},
                      {"step", ck.step},
                      {"mlm_loss", ev.mlm_loss},
                      {"ppl", ev.ppl},
                      {"layers", layers}});
    const fs::path csv = run.out / ("utilization_" + path.filename().string() + ".csv");
    std::ofstream uc(csv, std::ios::trunc);
    write_utilization_csv(uc, ev.layers);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s: step %lld mlm_loss %.4f ppl %.2f",
                  path.filename().string().c_str(), static_cast<long long>(ck.step), ev.mlm_loss,
                  ev.ppl);
    log(buf);
  }
  write_json(run.out / "analysis.json", report);
  return 0;
}

int cmd_classdiv(const CommonArgs& args) {
  Run run = start_run("classdiv", args, {{"report", "classdiv.json"}, {"table", "classdiv.csv"}});
  const ClassdivConfig& cc = run.cfg.classdiv;
  if (cc.checkpoint.empty()) throw ConfigError("classdiv.checkpoint", "required");
  if (cc.data.empty()) throw ConfigError("classdiv.data", "required");
  Checkpoint ck = load_checkpoint(cc.checkpoint);
  const Vocab vocab = vocab_for_checkpoint(run.cfg, ck);
  const LabeledSet set = load_labeled(cc.data, vocab, cc.seq_len);
  const auto layers = class_usage_divergence(ck.model, set, cc.batch_size);
  json report = json::array();
  std::ofstream csv(run.out / "classdiv.csv", std::ios::trunc);
  csv << "layer,KL,IOU,positive_queries,negative_queries\n";
  for (const auto& l : layers) {
    report.push_back({{"layer", l.layer},
                      {"KL", l.divergence.kl},
                      {"IOU", l.divergence.iou},
                      {"positive_queries", l.positive_queries},
                      {"negative_queries", l.negative_queries}});
    csv << l.layer << ',' << l.divergence.kl << ',' << l.divergence.iou << ','
        << l.positive_queries << ',' << l.negative_queries << '\n';
  }
  write_json(run.out / "classdiv.json", report);
  return 0;
}

int cmd_bench(const CommonArgs& args) {
  Run run = start_run("bench", args, {{"report", "bench.csv"}});
  const auto rows = run_bench(run.cfg.model, run.cfg.bench, run.cfg.train.seed);
  std::ofstream csv(run.out / "bench.csv", std::ios::trunc);
  write_bench_csv(csv, rows);
  write_bench_csv(std::cout, rows);
  return 0;
}

int cmd_vocab(const CommonArgs& args) {
  Run run = start_run("vocab", args, {{"vocab", "vocab.txt"}});
  const auto lines = corpus_lines(run.cfg.corpus.path);
  const Vocab vocab = Vocab::build(lines, run.cfg.corpus.tokenizer, run.cfg.corpus.max_vocab);
  vocab.save(run.out / "vocab.txt");
  log("vocab of " + std::to_string(vocab.size()) + " tokens");
  return 0;
}

int cmd_synth(const fs::path& out, std::uint64_t seed, std::size_t bytes, std::size_t examples) {
  fs::create_directories(out);
  SynthCorpusConfig sc;
  sc.seed = seed;
  sc.target_bytes = bytes;
  const auto lines = synth_corpus(sc);
  std::ofstream corpus(out / "corpus.txt", std::ios::trunc);
  for (const auto& l : lines) corpus << l << '\n';
  for (const auto& [name, salt] : {std::pair{"task_train.tsv", 1ULL}, std::pair{"task_dev.tsv", 2ULL}}) {
    std::ofstream tsv(out / name, std::ios::trunc);
    const std::size_t n = salt == 1 ? examples : std::max<std::size_t>(examples / 4, 2);
    for (const auto& ex : synth_labeled(sc, n, seed * 1000003ULL + salt)) {
      tsv << ex.label << '\t' << ex.text << '\n';
    }
  }
  log("wrote " + std::to_string(lines.size()) + " corpus lines to " + out.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Product-key memory laboratory"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(PKMLAB_BUILD_ID));

  CommonArgs pretrain_args, graft_args, finetune_args, analyze_args, classdiv_args, bench_args,
      vocab_args;
  add_common(app.add_subcommand("pretrain", "MLM pretraining"), pretrain_args);
  add_common(app.add_subcommand("graft", "Initialize from a memory-free checkpoint, then pretrain"),
             graft_args);
  add_common(app.add_subcommand("finetune", "Classification finetuning"), finetune_args);
  add_common(app.add_subcommand("analyze", "Memory utilization of checkpoints over a corpus"),
             analyze_args);
  add_common(app.add_subcommand("classdiv", "Class-conditional memory usage divergence"),
             classdiv_args);
  add_common(app.add_subcommand("bench", "Block and search timing"), bench_args);
  add_common(app.add_subcommand("vocab", "Build the vocabulary file"), vocab_args);

  std::string synth_out;
  std::uint64_t synth_seed = 1;
  std::size_t synth_bytes = 1 << 20;
  std::size_t synth_examples = 2000;
  CLI::App* synth = app.add_subcommand("synth", "Write the synthetic corpus and labeled task");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--bytes", synth_bytes, "Approximate corpus size");
  synth->add_option("--examples", synth_examples, "Labeled training examples");

  CLI11_PARSE(app, argc, argv);
  try {
    if (app.got_subcommand("pretrain")) return cmd_pretrain(pretrain_args, false);
    if (app.got_subcommand("graft")) return cmd_pretrain(graft_args, true);
    if (app.got_subcommand("finetune")) return cmd_finetune(finetune_args);
    if (app.got_subcommand("analyze")) return cmd_analyze(analyze_args);
    if (app.got_subcommand("classdiv")) return cmd_classdiv(classdiv_args);
    if (app.got_subcommand("bench")) return cmd_bench(bench_args);
    if (app.got_subcommand("vocab")) return cmd_vocab(vocab_args);
    if (app.got_subcommand("synth")) return cmd_synth(synth_out, synth_seed, synth_bytes, synth_examples);
  } catch (const ConfigError& e) {
    std::cerr << "pkmlab: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pkmlab: error: " << e.what() << std::endl;
    return 1;
  }
  return 1;
}
