#include "pkmlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace pkmlab {

AccessLog::AccessLog(std::size_t num_slots)
    : slots(num_slots), u_raw(num_slots, 0), t_raw(num_slots, 0), w_raw(num_slots, 0.0) {}

void AccessLog::merge(const AccessLog& other) {
  if (other.slots != slots) throw std::invalid_argument("AccessLog::merge: slot count mismatch");
  for (std::size_t i = 0; i < slots; ++i) {
    u_raw[i] += other.u_raw[i];
    t_raw[i] += other.t_raw[i];
    w_raw[i] += other.w_raw[i];
  }
  queries += other.queries;
  head_queries += other.head_queries;
}

void AccessLog::reset() { *this = AccessLog(slots); }

void record_access(AccessLog& log, const MemoryAccess& access) {
  if (access.slots != log.slots) throw std::invalid_argument("record_access: slot count mismatch");
  for (std::size_t p = 0; p < access.positions; ++p) {
    const auto agg = access.aggregated(p);
    std::int64_t best = -1;
    double best_w = -1.0;
    for (const auto& [slot, w] : agg) {
      if (slot < 0 || static_cast<std::size_t>(slot) >= log.slots) {
        throw std::out_of_range("record_access: slot index out of range");
      }
      if (w > 0.0) ++log.u_raw[slot];
      log.w_raw[slot] += w;
      // `agg` is ascending by slot, so strict > keeps the lower index on ties.
      if (w > best_w) {
        best_w = w;
        best = slot;
      }
    }
    if (best >= 0) ++log.t_raw[best];
    ++log.queries;
    log.head_queries += static_cast<std::uint64_t>(access.heads);
  }
}

MemoryUsage memory_usage(const AccessLog& log) {
  MemoryUsage out;
  if (log.slots == 0) return out;
  std::size_t used = 0, top1 = 0;
  for (std::size_t i = 0; i < log.slots; ++i) {
    used += log.u_raw[i] > 0;
    top1 += log.t_raw[i] > 0;
  }
  out.mu = static_cast<double>(used) / static_cast<double>(log.slots);
  out.mu_top1 = static_cast<double>(top1) / static_cast<double>(log.slots);
  return out;
}

double kl_from_uniform(std::span<const double> mass) {
  if (mass.empty()) throw std::invalid_argument("kl_from_uniform: no slots");
  double total = 0.0;
  for (const double m : mass) total += m;
  if (!(total > 0.0)) throw std::invalid_argument("kl_from_uniform: zero total mass");
  double acc = std::log(static_cast<double>(mass.size()));
  for (const double m : mass) {
    if (m > 0.0) {
      const double p = m / total;
      acc += p * std::log(p);
    }
  }
  return std::max(0.0, acc);
}

UniformKl kl_uniform(const AccessLog& log) {
  if (log.empty()) throw std::invalid_argument("kl_uniform: empty access log");
  std::vector<double> u(log.u_raw.begin(), log.u_raw.end());
  return {kl_from_uniform(u), kl_from_uniform(log.w_raw)};
}

std::uint64_t StalenessHistogram::total() const {
  std::uint64_t t = 0;
  for (const auto c : counts) t += c;
  return t;
}

StalenessHistogram staleness_histogram(const std::vector<std::vector<std::uint64_t>>& snapshots) {
  if (snapshots.empty()) throw std::invalid_argument("staleness_histogram: no snapshots");
  const std::size_t slots = snapshots.front().size();
  for (const auto& s : snapshots) {
    if (s.size() != slots) throw std::invalid_argument("staleness_histogram: slot count mismatch");
  }
  StalenessHistogram h;
  h.counts.assign(snapshots.size() + 1, 0);
  for (std::size_t i = 0; i < slots; ++i) {
    std::size_t last = 0;
    for (std::size_t c = snapshots.size(); c > 0; --c) {
      if (snapshots[c - 1][i] > 0) {
        last = c;
        break;
      }
    }
    ++h.counts[last];
  }
  return h;
}

bool ClassUsage::empty() const {
  return std::all_of(dist.begin(), dist.end(), [](double v) { return v == 0.0; });
}

ClassUsage class_usage(const AccessLog& log) {
  ClassUsage out;
  out.dist.assign(log.slots, 0.0);
  double total = 0.0;
  for (const auto t : log.t_raw) total += static_cast<double>(t);
  if (total == 0.0) return out;
  for (std::size_t i = 0; i < log.slots; ++i) out.dist[i] = static_cast<double>(log.t_raw[i]) / total;
  return out;
}

ClassDivergence class_divergence(const ClassUsage& positive, const ClassUsage& negative) {
  if (positive.dist.size() != negative.dist.size()) {
    throw std::invalid_argument("class_divergence: slot count mismatch");
  }
  if (positive.empty() || negative.empty()) {
    throw std::invalid_argument("class_divergence: one class has no recorded usage");
  }
  const std::size_t n = positive.dist.size();
  const auto normalize = [](const std::vector<double>& d) {
    std::vector<double> p(d);
    double s = 0.0;
    for (const double v : p) s += v;
    for (double& v : p) v /= s;
    return p;
  };
  const std::vector<double> p = normalize(positive.dist);
  const std::vector<double> q = normalize(negative.dist);
  const double denom = 1.0 + kClassKlSmoothing * static_cast<double>(n);
  double kl_pq = 0.0, kl_qp = 0.0, inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ps = (p[i] + kClassKlSmoothing) / denom;
    const double qs = (q[i] + kClassKlSmoothing) / denom;
    kl_pq += ps * std::log(ps / qs);
    kl_qp += qs * std::log(qs / ps);
    inter += std::min(p[i], q[i]);
    uni += std::max(p[i], q[i]);
  }
  return {0.5 * (kl_pq + kl_qp), uni > 0.0 ? inter / uni : 0.0};
}

LayerReport layer_report(int layer, const AccessLog& log) {
  LayerReport r;
  r.layer = layer;
  const MemoryUsage u = memory_usage(log);
  r.mu = u.mu;
  r.mu_top1 = u.mu_top1;
  if (!log.empty()) {
    const UniformKl kl = kl_uniform(log);
    r.kl_u = kl.kl_u;
    r.kl_w = kl.kl_w;
  }
  return r;
}

nlohmann::json to_json(const LayerReport& r) {
  return {{"layer", r.layer}, {"MU", r.mu}, {"MU_top1", r.mu_top1}, {"KL_u", r.kl_u}, {"KL_w", r.kl_w}};
}

LayerReport layer_report_from_json(const nlohmann::json& j) {
  LayerReport r;
  r.layer = j.at("layer").get<int>();
  r.mu = j.at("MU").get<double>();
  r.mu_top1 = j.at("MU_top1").get<double>();
  r.kl_u = j.at("KL_u").get<double>();
  r.kl_w = j.at("KL_w").get<double>();
  return r;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

void expect_header(std::istream& is, const std::string& header) {
  std::string line;
  if (!std::getline(is, line) || line != header) {
    throw std::runtime_error("csv: expected header '" + header + "', got '" + line + "'");
  }
}

}  // namespace

void write_utilization_csv(std::ostream& os, const std::vector<LayerReport>& rows) {
  os << "layer,MU,MU_top1,KL_u,KL_w\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.layer << ',' << r.mu << ',' << r.mu_top1 << ',' << r.kl_u << ',' << r.kl_w << '\n';
  }
}

std::vector<LayerReport> read_utilization_csv(std::istream& is) {
  expect_header(is, "layer,MU,MU_top1,KL_u,KL_w");
  std::vector<LayerReport> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 5) throw std::runtime_error("utilization csv: expected 5 columns");
    rows.push_back({std::stoi(cells[0]), std::stod(cells[1]), std::stod(cells[2]),
                    std::stod(cells[3]), std::stod(cells[4])});
  }
  return rows;
}

void write_staleness_csv(std::ostream& os, const std::vector<StalenessRow>& rows) {
  os << "layer,checkpoint_index,count\n";
  for (const auto& r : rows) os << r.layer << ',' << r.checkpoint_index << ',' << r.count << '\n';
}

std::vector<StalenessRow> read_staleness_csv(std::istream& is) {
  expect_header(is, "layer,checkpoint_index,count");
  std::vector<StalenessRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 3) throw std::runtime_error("staleness csv: expected 3 columns");
    rows.push_back({std::stoi(cells[0]), static_cast<std::size_t>(std::stoull(cells[1])),
                    static_cast<std::uint64_t>(std::stoull(cells[2]))});
  }
  return rows;
}

std::vector<StalenessRow> staleness_rows(int layer, const StalenessHistogram& h) {
  std::vector<StalenessRow> rows;
  for (std::size_t c = 0; c < h.counts.size(); ++c) rows.push_back({layer, c, h.counts[c]});
  return rows;
}

}  // namespace pkmlab
