#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "layercache/cache_builder.hpp"
#include "layercache/graph.hpp"
#include "layercache/medial.hpp"

namespace layercache {

struct exit_record {
  std::string sample_id;
  bool early = false;            // true: resolved by a cache
  std::size_t exit_ordinal = 0;  // valid when early
  std::int32_t predicted = -1;
  float confidence = 0.0f;       // cache: scaled max prob; final: backbone max prob
  std::uint64_t path_flops = 0;
  std::int64_t timestamp_us = 0;
};

// frozen backbone plus its enabled caches; immutable, safe to share across threads
class cache_enabled_model {
 public:
  cache_enabled_model(backbone_graph graph, std::vector<cache_model> enabled,
                      double tolerance);

  const backbone_graph& graph() const { return graph_; }
  const std::vector<cache_model>& caches() const { return caches_; }
  double tolerance() const { return tolerance_; }

  // flop cost of a sample that misses every cache
  std::uint64_t final_path_flops() const;
  // flop cost of a sample resolved by the cache at position idx
  std::uint64_t early_path_flops(std::size_t idx) const;

  using resolve_fn = std::function<void(const exit_record&)>;

  // the cache-enabled forward pass: run layers in topological order, consult
  // each cache on the live batch, resolve confident samples immediately and
  // shrink the batch; every sample resolves exactly once. records are
  // returned in resolution order (early exits stream out first).
  std::vector<exit_record> infer_batch(const tensor& inputs,
                                       const std::vector<std::string>& ids,
                                       const resolve_fn& resolve = nullptr) const;
  std::vector<exit_record> infer_batch(const sample_set& batch,
                                       const resolve_fn& resolve = nullptr) const;

  void save(const std::filesystem::path& dir) const;
  static cache_enabled_model load(const std::filesystem::path& dir);

 private:
  backbone_graph graph_;
  std::vector<cache_model> caches_;  // ascending ordinal
  double tolerance_ = 0.0;
  std::unordered_map<std::string, std::size_t> cache_by_node_;
  std::vector<std::uint64_t> early_flops_;  // per cache position
};

struct exit_stats {
  std::size_t ordinal = 0;  // 0 = final exit
  std::string layer;        // empty for final
  std::size_t reached = 0, hits = 0;
  double hit_rate = 0.0;
  double cache_accuracy = 0.0;  // agreement with backbone among hits
  double gt_accuracy = 0.0;     // agreement with labels among hits
  double effect = 0.0;          // (fixes - breaks) / total samples
};

struct flops_summary {
  std::uint64_t base_total = 0, cache_total = 0;  // exact sums over samples
  double base_avg = 0.0, cache_avg = 0.0;
  double reduction = 0.0;  // 1 - cache/base
};

struct evaluation_report {
  std::size_t samples = 0;
  double base_accuracy = 0.0;           // plain backbone vs labels
  double cache_enabled_accuracy = 0.0;  // cache-enabled vs labels
  double overall_hit_rate = 0.0;
  flops_summary flops;
  std::vector<exit_stats> exits;  // enabled caches in ordinal order
  exit_stats final_exit;
  double latency_base_ms = 0.0, latency_cache_ms = 0.0;
  std::size_t latency_batch = 0;

  std::string text() const;
  nlohmann::json to_json() const;
  std::string csv() const;  // one row per exit
};

struct latency_options {
  bool measure = true;
  std::size_t repetitions = 100;
  std::size_t warmup = 3;  // discarded
  std::size_t batch = 32;
};

// exact per-sample flop accounting for both configurations
flops_summary average_flops(const cache_enabled_model& model, const sample_set& data);

// ground-truth evaluation (the only place labels are read)
evaluation_report evaluate(const cache_enabled_model& model, const sample_set& labeled,
                           const latency_options& lat = {});

}  // namespace layercache
