#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "layercache/cache_builder.hpp"
#include "layercache/engine.hpp"
#include "layercache/nn.hpp"

namespace layercache {

struct pipeline_config {
  std::filesystem::path backbone;   // manifest path
  std::filesystem::path stream;     // collected-traffic sample file
  std::filesystem::path artifacts;  // stage outputs land here

  double tolerance = 0.02;  // accuracy-drop budget T
  std::size_t skip_last_k = 1;

  double split_train = 0.5, split_val = 0.2, split_test = 0.3;
  std::uint32_t split_seed = 13;

  search_menus menus;
  train_config search_train;  // budgeted per-architecture training
  train_config full_train;    // training of the selected architectures
  float accuracy_slack = 0.01f;
  float convergence_margin = 0.05f;

  std::size_t collect_batch = 64;
  double drift_fraction = 0.2;

  std::uint16_t serve_port = 7070;
  std::size_t serve_max_frame_mb = 64;

  latency_options latency;

  // paths in the file are resolved against its directory
  static pipeline_config load(const std::filesystem::path& path);
};

struct maintenance_state {
  std::uint64_t last_build_count = 0;
  std::uint64_t current_count = 0;
  std::string last_build_hash;

  static maintenance_state load(const std::filesystem::path& path);  // default if absent
  void save(const std::filesystem::path& path) const;
};

enum class trigger_kind { none, data_drift, backbone_changed };

const char* trigger_name(trigger_kind t);

// backbone-changed wins over data-drift; an empty recorded hash means no
// build has happened yet, which triggers nothing
trigger_kind check_retrain_trigger(const maintenance_state& state,
                                   const std::string& current_hash,
                                   double drift_fraction = 0.2);

// pipeline stages, in dependency order; each reads its predecessors'
// artifacts from cfg.artifacts and writes its own
void run_candidates(const pipeline_config& cfg);
void run_collect(const pipeline_config& cfg);
void run_search(const pipeline_config& cfg);
void run_train_caches(const pipeline_config& cfg);
void run_calibrate(const pipeline_config& cfg);
void run_optimize(const pipeline_config& cfg);
evaluation_report run_evaluate(const pipeline_config& cfg);
std::string run_report(const pipeline_config& cfg);

// assembled from the optimize stage's chosen subset
cache_enabled_model load_enabled_model(const pipeline_config& cfg);

}  // namespace layercache
