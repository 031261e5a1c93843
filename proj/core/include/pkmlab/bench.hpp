#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pkmlab/config.hpp"
#include "pkmlab/encoder.hpp"

namespace pkmlab {

struct BenchRow {
  std::string kind;     // "block" or "search"
  std::string variant;  // ffn|pkm|resm, or product|exhaustive
  int subkeys = 0;
  int topk = 0;
  int batch = 0;  // rows per timed call: batch*seq positions, or queries
  int seq = 0;
  int iterations = 0;
  int runs = 0;
  double median_ms = 0.0;
  std::uint64_t dot_products = 0;  // per timed call; search rows only
  friend bool operator==(const BenchRow&, const BenchRow&) = default;
};

// Eval-mode forward time of one memory block per variant, and product-key
// versus exhaustive search per codebook size. Each row reports the median
// over runs of the per-run median over `iterations` warm calls.
std::vector<BenchRow> run_bench(const EncoderConfig& model, const BenchConfig& cfg,
                                std::uint64_t seed);

// CSV header: kind,variant,subkeys,topk,batch,seq,iterations,runs,median_ms,dot_products
void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(std::istream& is);

}  // namespace pkmlab
