#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkmlab/pkm.hpp"

namespace pkmlab {

// Per-slot access accumulators of one memory layer:
//   u_raw[i]  positions at which slot i received positive weight
//   t_raw[i]  positions at which slot i had the largest head-summed weight
//   w_raw[i]  summed weight
struct AccessLog {
  std::size_t slots = 0;
  std::vector<std::uint64_t> u_raw;
  std::vector<std::uint64_t> t_raw;
  std::vector<double> w_raw;
  std::uint64_t queries = 0;       // positions recorded
  std::uint64_t head_queries = 0;  // positions x heads

  AccessLog() = default;
  explicit AccessLog(std::size_t num_slots);

  void merge(const AccessLog& other);
  void reset();
  bool empty() const { return queries == 0; }
};

void record_access(AccessLog& log, const MemoryAccess& access);

struct MemoryUsage {
  double mu = 0.0;
  double mu_top1 = 0.0;
};
MemoryUsage memory_usage(const AccessLog& log);

struct UniformKl {
  double kl_u = 0.0;
  double kl_w = 0.0;
};
// log|K| + sum p log p for the normalized counts and weights. Throws on an
// empty log.
UniformKl kl_uniform(const AccessLog& log);

// KL of a non-negative vector (normalized internally) from uniform.
double kl_from_uniform(std::span<const double> mass);

// Bucket 0 holds slots never top-1 used; bucket c (1-based) holds slots whose
// last use was in interval c.
struct StalenessHistogram {
  std::vector<std::uint64_t> counts;
  std::uint64_t total() const;
};
StalenessHistogram staleness_histogram(const std::vector<std::vector<std::uint64_t>>& snapshots);

// Normalized top-1 usage of one class.
struct ClassUsage {
  std::vector<double> dist;
  bool empty() const;
};
ClassUsage class_usage(const AccessLog& log);

struct ClassDivergence {
  double kl = 0.0;   // mean of both KL directions after epsilon smoothing
  double iou = 0.0;  // sum min / sum max
};
inline constexpr double kClassKlSmoothing = 1e-8;
ClassDivergence class_divergence(const ClassUsage& positive, const ClassUsage& negative);

struct LayerReport {
  int layer = 0;
  double mu = 0.0;
  double mu_top1 = 0.0;
  double kl_u = 0.0;
  double kl_w = 0.0;
  friend bool operator==(const LayerReport&, const LayerReport&) = default;
};
LayerReport layer_report(int layer, const AccessLog& log);

nlohmann::json to_json(const LayerReport& r);
LayerReport layer_report_from_json(const nlohmann::json& j);

// CSV with header layer,MU,MU_top1,KL_u,KL_w.
void write_utilization_csv(std::ostream& os, const std::vector<LayerReport>& rows);
std::vector<LayerReport> read_utilization_csv(std::istream& is);

struct StalenessRow {
  int layer = 0;
  std::size_t checkpoint_index = 0;
  std::uint64_t count = 0;
  friend bool operator==(const StalenessRow&, const StalenessRow&) = default;
};
// CSV with header layer,checkpoint_index,count.
void write_staleness_csv(std::ostream& os, const std::vector<StalenessRow>& rows);
std::vector<StalenessRow> read_staleness_csv(std::istream& is);
std::vector<StalenessRow> staleness_rows(int layer, const StalenessHistogram& h);

}  // namespace pkmlab
