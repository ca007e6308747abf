#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "layercache/graph.hpp"
#include "layercache/medial.hpp"
#include "layercache/nn.hpp"

namespace layercache {

// threshold value meaning "this cache never hits"; confidences max out at 1.0
inline constexpr float disabled_threshold = 1.0f + 1e-3f;

inline bool threshold_is_disabled(float theta) { return theta > 1.0f; }

struct search_menus {
  std::vector<std::size_t> conv_channels{8, 16};
  std::vector<std::size_t> conv_kernels{1, 3, 5};
  std::vector<std::size_t> conv_strides{1, 2};
  std::vector<std::size_t> dense_widths{32, 64};
  std::size_t max_convs = 2;  // conv stack depth 0..max_convs
  std::size_t max_dense = 2;  // hidden dense depth 1..max_dense
};

struct conv_choice {
  std::size_t channels = 0, kernel = 0, stride = 1;
};

// shallow classifier shape: optional conv stack (each conv + relu), pooling
// to a vector, 1-2 hidden dense layers (each + relu), dense to classes,
// log-softmax head. vector taps skip straight to the dense stack.
struct cache_architecture {
  std::vector<conv_choice> convs;
  std::vector<std::size_t> dense_widths;  // hidden widths, then implicit classifier

  std::vector<layer_spec> materialize(const std::vector<std::size_t>& tap_shape,
                                      std::size_t num_classes) const;
  std::uint64_t flops(const std::vector<std::size_t>& tap_shape,
                      std::size_t num_classes) const;
  std::string describe() const;  // compact id, e.g. "c8k3s1-gap-d32"
};

// exhaustive cartesian enumeration over the menus, dropping anything whose
// own cost c1 reaches the fallback cost c2; shallowest/narrowest first
std::vector<cache_architecture> enumerate_search_space(
    const std::vector<std::size_t>& tap_shape, std::size_t num_classes,
    const search_menus& menus, std::uint64_t c2);

struct cache_model {
  std::string target_layer;
  std::size_t ordinal = 0;
  cache_architecture arch;
  std::vector<std::size_t> tap_shape;
  std::size_t num_classes = 0;
  sequential net;
  float temperature = 1.0f;
  float threshold = disabled_threshold;
  std::uint64_t own_flops = 0;       // c1
  std::uint64_t fallback_flops = 0;  // c2
  float val_cache_accuracy = 0.0f;
  std::vector<std::pair<float, float>> hit_curve;  // (theta, hit rate) once calibrated
  std::string backbone_hash;

  tensor logits(const tensor& activations) const;

  struct predictions {
    std::vector<std::int32_t> classes;
    std::vector<float> confidence;  // max of temperature-scaled softmax
  };
  predictions predict(const tensor& activations) const;

  void save(const std::filesystem::path& json_path) const;
  static cache_model load(const std::filesystem::path& json_path);
};

// agreement rate between cache argmax and teacher argmax
float cache_accuracy(const cache_model& cache, const medial_dataset& md);

// accuracy > 1/classes + margin, i.e. meaningfully better than chance
bool is_converged(float accuracy, std::size_t num_classes, float margin = 0.05f);

struct trained_cache {
  cache_model model;
  train_result history;
};

// distill one architecture against the medial train split, early-stopping on
// the val split; ground-truth labels are structurally absent
trained_cache train_cache(const cache_architecture& arch, const medial_dataset& md,
                          const candidate_layer& cand, const train_config& cfg);

struct arch_report {
  std::string arch;
  float accuracy = 0.0f;
  std::uint64_t c1 = 0;
  bool converged = false;
  bool selected = false;
};

struct search_outcome {
  std::optional<trained_cache> best;  // empty = layer discarded
  std::vector<arch_report> report;
};

// budgeted search: train every enumerated architecture under cfg, keep the
// converged ones within accuracy_slack of the best, return the cheapest
search_outcome search(const candidate_layer& cand, const medial_dataset& md,
                      const search_menus& menus, const train_config& cfg,
                      float accuracy_slack = 0.01f, float margin = 0.05f);

}  // namespace layercache
