#include "pkmlab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "pkmlab/pkm.hpp"

namespace pkmlab {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename Fn>
double timed_median_ms(const BenchConfig& cfg, Fn&& fn) {
  std::vector<double> run_medians;
  for (int r = 0; r < cfg.runs; ++r) {
    for (int i = 0; i < cfg.warmup; ++i) fn();
    std::vector<double> samples;
    for (int i = 0; i < cfg.iterations; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      const auto t1 = std::chrono::steady_clock::now();
      samples.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    run_medians.push_back(median(samples));
  }
  return median(run_medians);
}

// Keeps a result observable so the timed work is not elided.
volatile double g_sink = 0.0;

}  // namespace

std::vector<BenchRow> run_bench(const EncoderConfig& model, const BenchConfig& cfg,
                                std::uint64_t seed) {
  if (cfg.iterations < 30) throw std::invalid_argument("bench: at least 30 iterations required");
  std::vector<BenchRow> rows;
  Rng rng(seed);

  EncoderConfig ecfg = model;
  if (ecfg.vocab_size <= kNumReserved) ecfg.vocab_size = kNumReserved + 1;
  ecfg.memory.value_dim = ecfg.d_model;
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const auto t = static_cast<std::size_t>(cfg.seq_len);
  Tensor<float> x({b, t, static_cast<std::size_t>(ecfg.d_model)});
  for (auto& v : x.vec()) v = static_cast<float>(rng.normal());

  const std::pair<const char*, BlockVariant> variants[] = {
      {"ffn", BlockVariant::ffn()}, {"pkm", BlockVariant::pkm()}, {"resm", BlockVariant::resm()}};
  for (const auto& [name, variant] : variants) {
    Rng block_rng = rng.split();
    MemoryBlock<float> block("bench", ecfg, variant, block_rng);
    const double ms = timed_median_ms(cfg, [&] {
      const Tensor<float> y = block.forward(x, false, nullptr, 0.0);
      g_sink = g_sink + y[0];
    });
    rows.push_back({"block", name, variant.has_memory() ? ecfg.memory.subkeys : 0,
                    variant.has_memory() ? ecfg.memory.topk : 0, cfg.batch_size, cfg.seq_len,
                    cfg.iterations, cfg.runs, ms, 0});
  }

  const std::size_t half = static_cast<std::size_t>(cfg.search_key_dim) / 2;
  for (const int c : cfg.search_subkeys) {
    const auto cs = static_cast<std::size_t>(c);
    std::vector<float> k1(cs * half), k2(cs * half), q(static_cast<std::size_t>(cfg.search_queries) * 2 * half);
    for (auto* v : {&k1, &k2, &q}) {
      for (auto& e : *v) e = static_cast<float>(rng.normal());
    }
    const MatrixView<float> keys1(k1.data(), cs, half), keys2(k2.data(), cs, half);
    const int k = std::min(cfg.search_topk, c);
    for (const bool exhaustive : {false, true}) {
      SearchStats per_call;
      const auto call = [&](SearchStats* stats) {
        for (int i = 0; i < cfg.search_queries; ++i) {
          const float* qi = q.data() + static_cast<std::size_t>(i) * 2 * half;
          const std::span<const float> q1(qi, half), q2(qi + half, half);
          const TopK<float> top = exhaustive ? exhaustive_topk(q1, q2, keys1, keys2, k, stats)
                                             : product_topk(q1, q2, keys1, keys2, k, stats);
          g_sink = g_sink + top.scores[0];
        }
      };
      call(&per_call);
      const double ms = timed_median_ms(cfg, [&] { call(nullptr); });
      rows.push_back({"search", exhaustive ? "exhaustive" : "product", c, k, cfg.search_queries, 1,
                      cfg.iterations, cfg.runs, ms, per_call.dot_products});
    }
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "kind,variant,subkeys,topk,batch,seq,iterations,runs,median_ms,dot_products\n";
  for (const auto& r : rows) {
    os << r.kind << ',' << r.variant << ',' << r.subkeys << ',' << r.topk << ',' << r.batch << ','
       << r.seq << ',' << r.iterations << ',' << r.runs << ',' << r.median_ms << ','
       << r.dot_products << '\n';
  }
}

std::vector<BenchRow> read_bench_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) ||
      line != "kind,variant,subkeys,topk,batch,seq,iterations,runs,median_ms,dot_products") {
    throw std::runtime_error("bench csv: unexpected header");
  }
  std::vector<BenchRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    BenchRow r;
    if (!(ls >> r.kind >> r.variant >> r.subkeys >> r.topk >> r.batch >> r.seq >> r.iterations >>
          r.runs >> r.median_ms >> r.dot_products)) {
      throw std::runtime_error("bench csv: malformed row");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace pkmlab
