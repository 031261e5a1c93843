#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <vector>

#include "pkmlab/metrics.hpp"
#include "pkmlab/rng.hpp"

using namespace pkmlab;

namespace {

MemoryAccess random_access(Rng& rng, std::size_t slots, int heads, int k, std::size_t positions) {
  MemoryAccess a;
  a.slots = slots;
  a.heads = heads;
  a.topk = k;
  a.positions = positions;
  for (std::size_t p = 0; p < positions; ++p) {
    for (int h = 0; h < heads; ++h) {
      std::set<std::int64_t> chosen;
      while (static_cast<int>(chosen.size()) < k) chosen.insert(static_cast<std::int64_t>(rng.below(slots)));
      std::vector<double> w(chosen.size());
      for (auto& v : w) v = rng.uniform() + 1e-3;
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      std::size_t j = 0;
      for (const auto s : chosen) {
        a.indices.push_back(s);
        a.weights.push_back(w[j++] / total);
      }
    }
  }
  return a;
}

// Replays every position from the raw index/weight arrays.
AccessLog replay(const std::vector<MemoryAccess>& events, std::size_t slots) {
  AccessLog log(slots);
  for (const auto& a : events) {
    for (std::size_t p = 0; p < a.positions; ++p) {
      std::vector<double> w(slots, 0.0);
      for (std::size_t i = 0; i < a.stride(); ++i) {
        w[a.indices[p * a.stride() + i]] += a.weights[p * a.stride() + i];
      }
      std::size_t best = 0;
      for (std::size_t s = 0; s < slots; ++s) {
        if (w[s] > 0) ++log.u_raw[s];
        log.w_raw[s] += w[s];
        if (w[s] > w[best]) best = s;
      }
      ++log.t_raw[best];
      ++log.queries;
      log.head_queries += static_cast<std::uint64_t>(a.heads);
    }
  }
  return log;
}

AccessLog counts(std::vector<std::uint64_t> u, std::vector<std::uint64_t> t, std::vector<double> w) {
  AccessLog log(u.size());
  log.u_raw = std::move(u);
  log.t_raw = std::move(t);
  log.w_raw = std::move(w);
  log.queries = 1;
  return log;
}

}  // namespace

TEST(RecordAccess, SingletonSelection) {
  AccessLog log(16);
  MemoryAccess a;
  a.slots = 16;
  a.heads = 1;
  a.topk = 1;
  a.positions = 1;
  a.indices = {7};
  a.weights = {1.0};
  record_access(log, a);
  EXPECT_EQ(log.u_raw[7], 1u);
  EXPECT_EQ(log.t_raw[7], 1u);
  EXPECT_EQ(log.w_raw[7], 1.0);
  EXPECT_EQ(std::accumulate(log.u_raw.begin(), log.u_raw.end(), 0ull), 1ull);
}

TEST(RecordAccess, TopOneSumsHeadsAndBreaksTiesLow) {
  AccessLog log(8);
  MemoryAccess a;
  a.slots = 8;
  a.heads = 2;
  a.topk = 2;
  a.positions = 1;
  // Slot 5 wins only after summing heads (0.3 + 0.3 > 0.5); slot 2 and 3 tie.
  a.indices = {5, 2, 5, 3};
  a.weights = {0.3, 0.7, 0.3, 0.7};
  record_access(log, a);
  EXPECT_EQ(log.t_raw[2], 1u);
  a.indices = {5, 1, 5, 4};
  a.weights = {0.6, 0.4, 0.6, 0.4};
  record_access(log, a);
  EXPECT_EQ(log.t_raw[5], 1u);
}

TEST(RecordAccess, MatchesReplayOracle) {
  Rng rng(1);
  const std::size_t slots = 64;
  std::vector<MemoryAccess> events;
  AccessLog log(slots);
  for (int i = 0; i < 50; ++i) {
    events.push_back(random_access(rng, slots, 1 + static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(4)), 1 + rng.below(5)));
    record_access(log, events.back());
  }
  const AccessLog ref = replay(events, slots);
  EXPECT_EQ(log.u_raw, ref.u_raw);
  EXPECT_EQ(log.t_raw, ref.t_raw);
  EXPECT_EQ(log.queries, ref.queries);
  for (std::size_t s = 0; s < slots; ++s) EXPECT_NEAR(log.w_raw[s], ref.w_raw[s], 1e-12);
  const double total = std::accumulate(log.w_raw.begin(), log.w_raw.end(), 0.0);
  EXPECT_NEAR(total, static_cast<double>(log.head_queries), 1e-3);
  for (std::size_t s = 0; s < slots; ++s) EXPECT_LE(log.t_raw[s], log.u_raw[s]);
}

TEST(AccessLogMerge, EqualsConcatenatedStreamInAnyOrder) {
  Rng rng(2);
  std::vector<MemoryAccess> events;
  for (int i = 0; i < 12; ++i) events.push_back(random_access(rng, 32, 2, 3, 4));
  AccessLog whole(32), a(32), b(32), c(32);
  for (std::size_t i = 0; i < events.size(); ++i) {
    record_access(whole, events[i]);
    record_access(i < 4 ? a : (i < 8 ? b : c), events[i]);
  }
  AccessLog left = a;
  left.merge(b);
  left.merge(c);
  AccessLog right = c;
  AccessLog bc = b;
  bc.merge(a);
  right.merge(bc);
  for (const AccessLog* m : {&left, &right}) {
    EXPECT_EQ(m->u_raw, whole.u_raw);
    EXPECT_EQ(m->t_raw, whole.t_raw);
    EXPECT_EQ(m->queries, whole.queries);
    for (std::size_t s = 0; s < 32; ++s) EXPECT_NEAR(m->w_raw[s], whole.w_raw[s], 1e-12);
  }
  AccessLog other(16);
  EXPECT_THROW(left.merge(other), std::invalid_argument);
}

TEST(MemoryUsage, DirectCount) {
  const MemoryUsage u = memory_usage(counts({3, 0, 1, 0}, {1, 0, 0, 0}, {2, 0, 1, 0}));
  EXPECT_EQ(u.mu, 0.5);
  EXPECT_EQ(u.mu_top1, 0.25);
  const MemoryUsage e = memory_usage(AccessLog(8));
  EXPECT_EQ(e.mu, 0.0);
  EXPECT_EQ(e.mu_top1, 0.0);
}

TEST(MemoryUsage, TopOneBoundedAndMonotone) {
  Rng rng(3);
  AccessLog log(128);
  MemoryUsage prev{};
  for (int i = 0; i < 100; ++i) {
    record_access(log, random_access(rng, 128, 2, 4, 1 + rng.below(3)));
    const MemoryUsage u = memory_usage(log);
    EXPECT_LE(u.mu_top1, u.mu);
    EXPECT_GE(u.mu, prev.mu);
    EXPECT_GE(u.mu_top1, prev.mu_top1);
    prev = u;
  }
}

TEST(KlUniform, Examples) {
  EXPECT_NEAR(kl_uniform(counts({5, 5, 5, 5}, {1, 1, 1, 1}, {1, 1, 1, 1})).kl_u, 0.0, 1e-12);
  EXPECT_NEAR(kl_uniform(counts({0, 9, 0, 0}, {0, 9, 0, 0}, {0, 9, 0, 0})).kl_u, std::log(4.0), 1e-12);
  const UniformKl half = kl_uniform(counts({3, 3, 0, 0}, {3, 0, 0, 0}, {1, 3, 0, 0}));
  EXPECT_NEAR(half.kl_u, std::log(4.0) + std::log(0.5), 1e-12);
  EXPECT_NEAR(half.kl_u, 0.6931, 1e-4);
  EXPECT_NEAR(half.kl_w, std::log(4.0) + 0.25 * std::log(0.25) + 0.75 * std::log(0.75), 1e-12);
  EXPECT_THROW(kl_uniform(AccessLog(4)), std::invalid_argument);
}

TEST(KlUniform, BoundedByLogSlots) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    AccessLog log(64);
    for (int i = 0; i < 1 + static_cast<int>(rng.below(8)); ++i) record_access(log, random_access(rng, 64, 2, 3, 2));
    const UniformKl kl = kl_uniform(log);
    for (const double v : {kl.kl_u, kl.kl_w}) {
      EXPECT_GE(v, -1e-12);
      EXPECT_LE(v, std::log(64.0) + 1e-12);
    }
  }
}

TEST(Staleness, Examples) {
  const StalenessHistogram all = staleness_histogram({std::vector<std::uint64_t>(6, 2)});
  EXPECT_EQ(all.counts, (std::vector<std::uint64_t>{0, 6}));
  std::vector<std::vector<std::uint64_t>> snaps(5, std::vector<std::uint64_t>(3, 0));
  snaps[1][0] = 4;
  const StalenessHistogram h = staleness_histogram(snaps);
  EXPECT_EQ(h.counts, (std::vector<std::uint64_t>{2, 0, 1, 0, 0, 0}));
  EXPECT_THROW(staleness_histogram({}), std::invalid_argument);
  EXPECT_THROW(staleness_histogram({{1, 2}, {1}}), std::invalid_argument);
}

TEST(Staleness, MatchesPerSlotScan) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t slots = 50;
    std::vector<std::vector<std::uint64_t>> snaps(3, std::vector<std::uint64_t>(slots));
    for (auto& s : snaps) {
      for (auto& c : s) c = rng.bernoulli(0.3) ? 1 + rng.below(3) : 0;
    }
    std::vector<std::uint64_t> expect(4, 0);
    for (std::size_t i = 0; i < slots; ++i) {
      std::size_t last = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        if (snaps[c][i] > 0) last = c + 1;
      }
      ++expect[last];
    }
    const StalenessHistogram h = staleness_histogram(snaps);
    EXPECT_EQ(h.counts, expect);
    EXPECT_EQ(h.total(), slots);
  }
}

TEST(ClassDivergence, Examples) {
  const ClassUsage a{{0.25, 0.25, 0.5, 0.0}};
  const ClassDivergence same = class_divergence(a, a);
  EXPECT_EQ(same.iou, 1.0);
  EXPECT_NEAR(same.kl, 0.0, 1e-12);
  EXPECT_EQ(class_divergence(ClassUsage{{1, 0}}, ClassUsage{{0, 1}}).iou, 0.0);
  const ClassDivergence third = class_divergence(ClassUsage{{1.0, 0.0}}, ClassUsage{{0.5, 0.5}});
  EXPECT_NEAR(third.iou, 1.0 / 3.0, 1e-12);
  EXPECT_GT(third.kl, 0.0);
  EXPECT_THROW(class_divergence(ClassUsage{{0, 0}}, a), std::invalid_argument);
}

TEST(ClassDivergence, SymmetricKlMatchesSmoothedFormula) {
  const std::vector<double> p = {0.7, 0.3, 0.0}, q = {0.2, 0.2, 0.6};
  const auto smooth = [](std::vector<double> v) {
    double s = 0;
    for (auto& x : v) s += (x += kClassKlSmoothing);
    for (auto& x : v) x /= s;
    return v;
  };
  const auto ps = smooth(p), qs = smooth(q);
  double kl_pq = 0, kl_qp = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    kl_pq += ps[i] * std::log(ps[i] / qs[i]);
    kl_qp += qs[i] * std::log(qs[i] / ps[i]);
  }
  EXPECT_NEAR(class_divergence(ClassUsage{p}, ClassUsage{q}).kl, 0.5 * (kl_pq + kl_qp), 1e-9);
}

TEST(ClassUsage, NormalizesTopOneCounts) {
  AccessLog log = counts({4, 2, 1, 0}, {3, 1, 0, 0}, {1, 1, 1, 0});
  const ClassUsage u = class_usage(log);
  EXPECT_EQ(u.dist, (std::vector<double>{0.75, 0.25, 0.0, 0.0}));
  EXPECT_TRUE(class_usage(AccessLog(3)).empty());
}

TEST(Reports, JsonAndCsvRoundTrip) {
  Rng rng(6);
  AccessLog log(32);
  for (int i = 0; i < 10; ++i) record_access(log, random_access(rng, 32, 2, 3, 3));
  const std::vector<LayerReport> rows = {layer_report(2, log), layer_report(4, log)};
  const nlohmann::json j = to_json(rows[0]);
  for (const char* key : {"layer", "MU", "MU_top1", "KL_u", "KL_w"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(layer_report_from_json(nlohmann::json::parse(j.dump())), rows[0]);
  std::stringstream csv;
  write_utilization_csv(csv, rows);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')), "layer,MU,MU_top1,KL_u,KL_w");
  EXPECT_EQ(read_utilization_csv(csv), rows);

  const auto st = staleness_rows(2, staleness_histogram({{1, 0, 0}, {0, 0, 1}}));
  std::stringstream scsv;
  write_staleness_csv(scsv, st);
  EXPECT_EQ(read_staleness_csv(scsv), st);
}

TEST(Reports, MalformedCsvRejected) {
  std::stringstream bad("layer,MU\n1,0.5\n");
  EXPECT_ANY_THROW(read_utilization_csv(bad));
  std::stringstream bad_row("layer,MU,MU_top1,KL_u,KL_w\n1,x,0,0,0\n");
  EXPECT_ANY_THROW(read_utilization_csv(bad_row));
}
