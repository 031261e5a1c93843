// Micro-benchmarks for the hot paths: key search, memory blocks, matmul.

#include <benchmark/benchmark.h>

#include <vector>

#include "pkmlab/encoder.hpp"
#include "pkmlab/ops.hpp"
#include "pkmlab/pkm.hpp"

namespace {

using pkmlab::MatrixView;
using pkmlab::Rng;
using pkmlab::Tensor;

Tensor<float> random_tensor(pkmlab::Shape shape, Rng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(rng.normal());
  return t;
}

struct SearchSetup {
  Tensor<float> keys1, keys2, queries;
  explicit SearchSetup(int c, int half = 16, int n = 64) {
    Rng rng(7);
    const auto cs = static_cast<std::size_t>(c), hs = static_cast<std::size_t>(half);
    keys1 = random_tensor({cs, hs}, rng);
    keys2 = random_tensor({cs, hs}, rng);
    queries = random_tensor({static_cast<std::size_t>(n), 2 * hs}, rng);
  }
};

template <bool kProduct>
void BM_Search(benchmark::State& state) {
  const SearchSetup s(static_cast<int>(state.range(0)));
  const int k = static_cast<int>(state.range(1));
  const std::size_t half = s.keys1.cols();
  std::size_t q = 0;
  for (auto _ : state) {
    const auto row = s.queries.row(q++ % s.queries.rows());
    const auto r = kProduct ? pkmlab::product_topk<float>(row.first(half), row.last(half),
                                                          MatrixView<float>(s.keys1),
                                                          MatrixView<float>(s.keys2), k)
                            : pkmlab::exhaustive_topk<float>(row.first(half), row.last(half),
                                                             MatrixView<float>(s.keys1),
                                                             MatrixView<float>(s.keys2), k);
    benchmark::DoNotOptimize(r.indices.data());
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_Search<true>)->Name("search/product")->ArgsProduct({{32, 128, 256}, {8, 32}});
BENCHMARK(BM_Search<false>)->Name("search/exhaustive")->ArgsProduct({{32, 128, 256}, {8}});

void BM_Block(benchmark::State& state) {
  const pkmlab::BlockVariant variants[] = {pkmlab::BlockVariant::ffn(), pkmlab::BlockVariant::pkm(),
                                           pkmlab::BlockVariant::resm()};
  pkmlab::EncoderConfig cfg;
  cfg.vocab_size = 100;
  cfg.memory.value_dim = cfg.d_model;
  Rng rng(3);
  pkmlab::MemoryBlock<float> block("bench", cfg, variants[state.range(0)], rng);
  const Tensor<float> x = random_tensor({8, 64, static_cast<std::size_t>(cfg.d_model)}, rng);
  for (auto _ : state) {
    const Tensor<float> y = block.forward(x, false, nullptr, 0.0);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * 8 * 64);
}
BENCHMARK(BM_Block)->ArgName("variant")->DenseRange(0, 2)->Unit(benchmark::kMicrosecond);

void BM_Matmul(benchmark::State& state) {
  Rng rng(1);
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor<float> a = random_tensor({512, n}, rng);
  const Tensor<float> b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    const Tensor<float> c = pkmlab::matmul(a, b);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 512 * static_cast<std::int64_t>(n * n));
}
BENCHMARK(BM_Matmul)->Arg(128)->Arg(512)->Unit(benchmark::kMicrosecond);

}  // namespace

// The packaged benchmark_main archive carries LTO bytecode from another compiler build.
BENCHMARK_MAIN();
