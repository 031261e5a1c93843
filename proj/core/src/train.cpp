#include "pkmlab/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>

#include "pkmlab/checkpoint.hpp"

namespace pkmlab {

namespace fs = std::filesystem;
using nlohmann::json;

double warmup_lr(double base, std::int64_t step, std::int64_t warmup) {
  if (warmup <= 0 || step >= warmup) return base;
  return base * static_cast<double>(std::max<std::int64_t>(step, 0)) / static_cast<double>(warmup);
}

// ---------------------------------------------------------------- optimizer

ModelOptimizer::ModelOptimizer(Encoder<float>& model, AdamConfig dense, AdamConfig memory,
                               SparseRule memory_rule) {
  for (Param<float>* p : model.params()) {
    if (p->kind == ParamKind::kDense) dense_.emplace(p->name, AdamState<float>(p->value.size(), dense));
  }
  for (ProductKeyMemory<float>* m : model.memories()) {
    sparse_.emplace(m->values.name,
                    SparseRowOptimizer<float>(m->values.value.rows(), m->values.value.cols(), memory,
                                              memory_rule));
  }
}

void ModelOptimizer::step(Encoder<float>& model, double lr, double memory_lr, bool freeze_memory) {
  for (Param<float>* p : model.params()) {
    if (p->kind != ParamKind::kDense || (freeze_memory && p->memory)) continue;
    auto it = dense_.find(p->name);
    if (it == dense_.end()) {
      // A head attached after construction.
      it = dense_.emplace(p->name, AdamState<float>(p->value.size(), dense_.begin()->second.config))
               .first;
    }
    adam_step<float>(p->value.span(), std::span<const float>(p->grad.data(), p->grad.size()),
                     it->second, lr);
  }
  if (freeze_memory) return;
  for (ProductKeyMemory<float>* m : model.memories()) {
    sparse_.at(m->values.name).update(m->values.value, m->value_grad, memory_lr);
  }
}

// ---------------------------------------------------------------- data

CorpusSplit split_corpus(const std::vector<std::string>& lines, const Vocab& vocab,
                         int heldout_every) {
  if (heldout_every < 2) throw std::invalid_argument("split_corpus: heldout_every must be >= 2");
  CorpusSplit out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto ids = vocab.encode(lines[i]);
    const bool held = static_cast<int>(i % heldout_every) == heldout_every - 1;
    auto& dst = held ? out.heldout : out.train;
    dst.insert(dst.end(), ids.begin(), ids.end());
    ++(held ? out.heldout_lines : out.train_lines);
  }
  return out;
}

TokenBatch sample_windows(std::span<const std::int32_t> stream, std::size_t batch, std::size_t seq,
                          Rng& rng) {
  if (seq < 2) throw std::invalid_argument("sample_windows: seq must be >= 2");
  const std::size_t body = seq - 1;
  if (stream.size() < batch * body) {
    throw std::runtime_error("corpus too small: " + std::to_string(stream.size()) +
                             " training tokens, one batch needs " + std::to_string(batch * body));
  }
  TokenBatch tb{batch, seq, std::vector<std::int32_t>(batch * seq)};
  const std::uint64_t starts = stream.size() - body + 1;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto start = static_cast<std::size_t>(rng.below(starts));
    tb.ids[b * seq] = kClsId;
    std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>(start), body, tb.ids.begin() + b * seq + 1);
  }
  return tb;
}

std::vector<TokenBatch> sequential_batches(std::span<const std::int32_t> stream, std::size_t batch,
                                           std::size_t seq, std::size_t max_batches) {
  if (seq < 2 || batch < 1) throw std::invalid_argument("sequential_batches: bad shape");
  const std::size_t body = seq - 1;
  const std::size_t windows = stream.size() / body;
  if (windows == 0) {
    throw std::runtime_error("held-out text too small: " + std::to_string(stream.size()) +
                             " tokens, one window needs " + std::to_string(body));
  }
  std::vector<TokenBatch> out;
  for (std::size_t w = 0; w < windows; w += batch) {
    if (max_batches > 0 && out.size() == max_batches) break;
    const std::size_t rows = std::min(batch, windows - w);
    TokenBatch tb{rows, seq, std::vector<std::int32_t>(rows * seq)};
    for (std::size_t b = 0; b < rows; ++b) {
      tb.ids[b * seq] = kClsId;
      std::copy_n(stream.begin() + static_cast<std::ptrdiff_t>((w + b) * body), body,
                  tb.ids.begin() + b * seq + 1);
    }
    out.push_back(std::move(tb));
  }
  return out;
}

namespace {

std::vector<std::uint8_t> non_pad(const TokenBatch& tb) {
  std::vector<std::uint8_t> keep(tb.ids.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = tb.ids[i] != kPadId;
  return keep;
}

std::vector<int> sorted_memory_layers(const Encoder<float>& model) {
  std::vector<int> layers = model.config().memory_positions;
  std::sort(layers.begin(), layers.end());
  return layers;
}

std::vector<AccessLog> fresh_logs(Encoder<float>& model) {
  std::vector<AccessLog> logs;
  for (auto* m : model.memories()) logs.emplace_back(m->config().slots());
  return logs;
}

}  // namespace

// ---------------------------------------------------------------- evaluation

EvalResult evaluate(Encoder<float>& model, const std::vector<TokenBatch>& batches,
                    double mask_prob, std::uint64_t mask_seed) {
  EvalResult r;
  r.memory_layers = sorted_memory_layers(model);
  r.logs = fresh_logs(model);
  Rng mask_rng(mask_seed);
  const MaskingRecipe recipe{mask_prob, 0.8, 0.1};
  double total = 0.0;
  for (const TokenBatch& tb : batches) {
    const MaskedBatch mb = mlm_mask(tb, recipe, model.config().vocab_size, mask_rng);
    const auto out = model.forward(mb.input, false);
    const auto keep = non_pad(mb.input);
    for (std::size_t i = 0; i < out.accesses.size(); ++i) {
      record_access(r.logs[i], out.accesses[i].select(keep));
    }
    if (mb.positions.empty()) continue;
    const Tensor<float> logits = model.mlm_logits(out.hidden, mb.positions);
    const auto ce = softmax_cross_entropy(logits, mb.targets);
    total += ce.loss * static_cast<double>(ce.count);
    r.masked += ce.count;
  }
  r.mlm_loss = r.masked > 0 ? total / static_cast<double>(r.masked)
                            : std::numeric_limits<double>::quiet_NaN();
  r.ppl = std::exp(r.mlm_loss);
  for (std::size_t i = 0; i < r.logs.size(); ++i) {
    r.layers.push_back(layer_report(r.memory_layers[i], r.logs[i]));
  }
  return r;
}

nlohmann::json to_json(const EvalRecord& r) {
  json layers = json::array();
  for (const auto& l : r.layers) layers.push_back(to_json(l));
  return json{{"step", r.step},
              {"mlm_loss", r.mlm_loss},
              {"ppl", r.ppl},
              {"train_loss", r.train_loss},
              {"layers", layers}};
}

fs::path checkpoint_dir(const fs::path& out, std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08lld", static_cast<long long>(step));
  return out / "checkpoints" / buf;
}

// ---------------------------------------------------------------- pretraining

PretrainResult pretrain(Encoder<float>& model, const CorpusSplit& data, const TrainConfig& cfg,
                        const PretrainOptions& opts) {
  cfg.validate();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const auto seq = static_cast<std::size_t>(cfg.seq_len);
  if (data.train.size() < batch * (seq - 1)) {
    throw std::runtime_error("corpus smaller than one batch: " + std::to_string(data.train.size()) +
                             " training tokens, need " + std::to_string(batch * (seq - 1)));
  }
  if (cfg.steps > 0 && cfg.mask_prob <= 0.0) {
    throw std::invalid_argument("train.mask_prob must be > 0 to train");
  }

  Rng root(cfg.seed);
  Rng data_rng = root.split();
  Rng mask_rng = root.split();
  Rng drop_rng = root.split();
  const std::uint64_t eval_mask_seed = root.next();

  PretrainResult res;
  res.memory_layers = sorted_memory_layers(model);
  const std::size_t n_mem = res.memory_layers.size();
  std::vector<AccessLog> interval = fresh_logs(model);
  std::vector<std::vector<std::vector<std::uint64_t>>> top1_snaps(n_mem), any_snaps(n_mem);

  const bool write = !opts.out_dir.empty();
  json echo = opts.run_echo;
  echo["train"] = to_json(cfg);
  std::ofstream metrics;
  if (write) {
    fs::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write metrics.jsonl");
    save_checkpoint(model, checkpoint_dir(opts.out_dir, 0), 0, echo);
  }
  res.checkpoint_steps.push_back(0);

  std::vector<TokenBatch> heldout;
  if (cfg.steps > 0) {
    heldout = sequential_batches(data.heldout, batch, seq, static_cast<std::size_t>(cfg.eval_batches));
  }

  ModelOptimizer opt(model, AdamConfig{cfg.lr}, AdamConfig{cfg.memory_lr}, cfg.memory_optimizer);
  const MaskingRecipe recipe{cfg.mask_prob, 0.8, 0.1};
  const std::int64_t warmup = cfg.warmup();
  double loss_sum = 0.0;
  std::int64_t loss_count = 0;

  for (std::int64_t s = 1; s <= cfg.steps; ++s) {
    const TokenBatch tb = sample_windows(data.train, batch, seq, data_rng);
    MaskedBatch mb = mlm_mask(tb, recipe, model.config().vocab_size, mask_rng);
    while (mb.positions.empty()) mb = mlm_mask(tb, recipe, model.config().vocab_size, mask_rng);

    model.zero_grad();
    const auto step = mlm_loss(model, mb, true, &drop_rng, true);
    for (std::size_t i = 0; i < n_mem; ++i) record_access(interval[i], step.output.accesses[i]);
    opt.step(model, warmup_lr(cfg.lr, s, warmup), warmup_lr(cfg.memory_lr, s, warmup));
    res.train_losses.push_back(step.loss);
    loss_sum += step.loss;
    ++loss_count;

    if (s % cfg.eval_every() == 0 || s == cfg.steps) {
      const EvalResult ev = evaluate(model, heldout, cfg.mask_prob, eval_mask_seed);
      EvalRecord rec{s, ev.mlm_loss, ev.ppl, loss_sum / static_cast<double>(loss_count), ev.layers};
      loss_sum = 0.0;
      loss_count = 0;
      if (write) metrics << to_json(rec).dump() << "\n" << std::flush;
      if (opts.on_eval) opts.on_eval(rec);
      res.evals.push_back(std::move(rec));
    }
    if (s % cfg.checkpoint_every() == 0 || s == cfg.steps) {
      for (std::size_t i = 0; i < n_mem; ++i) {
        top1_snaps[i].push_back(interval[i].t_raw);
        any_snaps[i].push_back(interval[i].u_raw);
        interval[i].reset();
      }
      if (write) save_checkpoint(model, checkpoint_dir(opts.out_dir, s), s, echo);
      res.checkpoint_steps.push_back(s);
    }
  }

  std::vector<StalenessRow> rows, rows_topk;
  for (std::size_t i = 0; i < n_mem && cfg.steps > 0; ++i) {
    res.staleness.push_back(staleness_histogram(top1_snaps[i]));
    res.staleness_topk.push_back(staleness_histogram(any_snaps[i]));
    const auto r1 = staleness_rows(res.memory_layers[i], res.staleness.back());
    const auto rk = staleness_rows(res.memory_layers[i], res.staleness_topk.back());
    rows.insert(rows.end(), r1.begin(), r1.end());
    rows_topk.insert(rows_topk.end(), rk.begin(), rk.end());
  }
  if (write) {
    std::ofstream util(opts.out_dir / "utilization.csv", std::ios::trunc);
    write_utilization_csv(util, res.evals.empty() ? std::vector<LayerReport>{} : res.evals.back().layers);
    std::ofstream st(opts.out_dir / "staleness.csv", std::ios::trunc);
    write_staleness_csv(st, rows);
    std::ofstream stk(opts.out_dir / "staleness_topk.csv", std::ios::trunc);
    write_staleness_csv(stk, rows_topk);
  }
  return res;
}

// ---------------------------------------------------------------- grafting

Encoder<float> init_from_pretrained(Encoder<float>& base, const EncoderConfig& target,
                                    TrainVariant variant, std::uint64_t seed) {
  if (!base.config().memory_positions.empty()) {
    throw std::invalid_argument("graft: base model must be memory-free");
  }
  EncoderConfig cfg = target;
  cfg.memory_variant = block_variant(variant);
  if (!has_memory(variant)) cfg.memory_positions.clear();
  cfg.num_classes = 0;
  Encoder<float> out(cfg, seed);

  std::set<std::string> reinit;
  if (variant == TrainVariant::kResmReinitFfn) {
    for (const int l : cfg.memory_positions) reinit.insert("layer" + std::to_string(l) + ".ffn.");
  }
  const auto skip = [&](const std::string& name) {
    for (const auto& prefix : reinit) {
      if (name.rfind(prefix, 0) == 0) return true;
    }
    return false;
  };

  for (Param<float>* p : out.params()) {
    if (p->memory || skip(p->name)) continue;
    const Param<float>* src = base.find(p->name);
    if (src == nullptr) throw std::runtime_error("graft: base model lacks " + p->name);
    if (src->value.shape() != p->value.shape()) {
      throw std::runtime_error("graft: shape mismatch for " + p->name + ": base " +
                               shape_str(src->value.shape()) + ", target " +
                               shape_str(p->value.shape()));
    }
    p->value = src->value;
  }
  return out;
}

// ---------------------------------------------------------------- finetuning

LabeledSet encode_labeled(const std::vector<LabeledText>& rows, const Vocab& vocab, int seq_len) {
  if (seq_len < 1) throw std::invalid_argument("encode_labeled: seq_len must be >= 1");
  LabeledSet set;
  for (const auto& row : rows) {
    if (row.label < 0) throw std::invalid_argument("labels must be non-negative");
    std::vector<std::int32_t> ids{kClsId};
    for (const auto id : vocab.encode(row.text)) {
      if (static_cast<int>(ids.size()) >= seq_len) break;
      ids.push_back(id);
    }
    set.ids.push_back(std::move(ids));
    set.labels.push_back(row.label);
    set.num_classes = std::max(set.num_classes, row.label + 1);
  }
  return set;
}

TokenBatch pad_batch(const LabeledSet& set, std::span<const std::size_t> rows) {
  std::size_t seq = 1;
  for (const auto r : rows) seq = std::max(seq, set.ids.at(r).size());
  TokenBatch tb{rows.size(), seq, std::vector<std::int32_t>(rows.size() * seq, kPadId)};
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(set.ids[rows[b]].begin(), set.ids[rows[b]].end(), tb.ids.begin() + b * seq);
  }
  return tb;
}

namespace {

template <typename Fn>
void for_each_batch(std::size_t n, int batch_size, Fn&& fn) {
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    rows.clear();
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) rows.push_back(i);
    fn(std::span<const std::size_t>(rows));
  }
}

std::size_t argmax_row(std::span<const float> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

double accuracy(Encoder<float>& model, const LabeledSet& set, int batch_size) {
  if (set.size() == 0) throw std::invalid_argument("accuracy: empty dataset");
  std::size_t correct = 0;
  for_each_batch(set.size(), batch_size, [&](std::span<const std::size_t> rows) {
    const auto out = model.forward(pad_batch(set, rows), false);
    const Tensor<float> logits = model.classify_logits(out.hidden);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      if (static_cast<int>(argmax_row(logits.row(b))) == set.labels[rows[b]]) ++correct;
    }
  });
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

FinetuneResult finetune(Encoder<float>& model, const LabeledSet& train, const LabeledSet& dev,
                        const FinetuneConfig& cfg) {
  cfg.validate();
  const std::set<int> classes(train.labels.begin(), train.labels.end());
  if (classes.size() < 2) throw std::invalid_argument("finetune: training set has a single class");
  if (dev.size() == 0) throw std::invalid_argument("finetune: empty dev set");
  const int num_classes = std::max(train.num_classes, dev.num_classes);

  Rng root(cfg.seed);
  Rng sample_rng = root.split();
  Rng drop_rng = root.split();
  const std::uint64_t head_seed = root.next();
  if (!model.has_classifier() || model.config().num_classes != num_classes) {
    model.attach_classifier(num_classes, head_seed);
  }
  model.set_memory_batch_stats(false);
  model.set_memory_frozen(cfg.freeze_memory);

  FinetuneResult res;
  res.memory_layers = sorted_memory_layers(model);
  res.memory_hash_before = parameter_hash(model, true);
  res.initial_accuracy = accuracy(model, dev, cfg.batch_size);

  ModelOptimizer opt(model, AdamConfig{cfg.lr}, AdamConfig{cfg.lr}, SparseRule::kAdam);
  std::vector<std::size_t> rows(static_cast<std::size_t>(cfg.batch_size));
  std::vector<std::int32_t> labels(rows.size());
  for (std::int64_t s = 1; s <= cfg.steps; ++s) {
    for (std::size_t b = 0; b < rows.size(); ++b) {
      rows[b] = static_cast<std::size_t>(sample_rng.below(train.size()));
      labels[b] = train.labels[rows[b]];
    }
    model.zero_grad();
    const auto out = model.forward(pad_batch(train, rows), true, &drop_rng);
    const Tensor<float> logits = model.classify_logits(out.hidden);
    const auto ce = softmax_cross_entropy(logits, labels);
    model.backward(model.classify_backward(ce.dlogits));
    const double lr = warmup_lr(cfg.lr, s, cfg.warmup());
    opt.step(model, lr, lr, cfg.freeze_memory);
    res.losses.push_back(ce.loss);
  }

  res.accuracy = accuracy(model, dev, cfg.batch_size);
  res.train_accuracy = accuracy(model, train, cfg.batch_size);
  std::vector<AccessLog> logs = fresh_logs(model);
  for_each_batch(dev.size(), cfg.batch_size, [&](std::span<const std::size_t> r) {
    const TokenBatch tb = pad_batch(dev, r);
    const auto out = model.forward(tb, false);
    const auto keep = non_pad(tb);
    for (std::size_t i = 0; i < out.accesses.size(); ++i) {
      record_access(logs[i], out.accesses[i].select(keep));
    }
  });
  for (std::size_t i = 0; i < logs.size(); ++i) {
    res.utilization.push_back(layer_report(res.memory_layers[i], logs[i]));
  }
  res.memory_hash_after = parameter_hash(model, true);
  model.set_memory_frozen(false);
  model.set_memory_batch_stats(true);
  return res;
}

std::vector<ClassdivLayer> class_usage_divergence(Encoder<float>& model, const LabeledSet& set,
                                                  int batch_size) {
  std::vector<AccessLog> pos = fresh_logs(model), neg = fresh_logs(model);
  for_each_batch(set.size(), batch_size, [&](std::span<const std::size_t> rows) {
    const TokenBatch tb = pad_batch(set, rows);
    const auto out = model.forward(tb, false);
    std::vector<std::uint8_t> keep_pos(tb.ids.size()), keep_neg(tb.ids.size());
    for (std::size_t i = 0; i < tb.ids.size(); ++i) {
      const int label = set.labels[rows[i / tb.seq]];
      const bool real = tb.ids[i] != kPadId;
      keep_pos[i] = real && label == 1;
      keep_neg[i] = real && label == 0;
    }
    for (std::size_t i = 0; i < out.accesses.size(); ++i) {
      record_access(pos[i], out.accesses[i].select(keep_pos));
      record_access(neg[i], out.accesses[i].select(keep_neg));
    }
  });
  const auto layers = sorted_memory_layers(model);
  std::vector<ClassdivLayer> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    ClassdivLayer l;
    l.layer = layers[i];
    l.positive_queries = pos[i].queries;
    l.negative_queries = neg[i].queries;
    l.divergence = class_divergence(class_usage(pos[i]), class_usage(neg[i]));
    out.push_back(l);
  }
  return out;
}

}  // namespace pkmlab
