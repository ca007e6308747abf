#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "layercache/graph.hpp"
#include "layercache/tensor.hpp"

namespace layercache {

// raw inference traffic: ids + inputs, labels optional (evaluation only)
struct sample_set {
  std::vector<std::string> ids;
  tensor inputs;  // [n, ...]
  std::vector<std::int32_t> labels;

  std::size_t size() const { return ids.size(); }
  bool has_labels() const { return !labels.empty(); }

  sample_set subset(const std::vector<std::size_t>& idx) const;
  void save(const std::filesystem::path& path) const;
  static sample_set load(const std::filesystem::path& path);
};

enum class split_kind : std::uint8_t { train = 0, val = 1, test = 2 };

// activation/teacher-pd pairs tapped at one layer from unlabeled traffic
struct medial_dataset {
  std::string layer;
  std::vector<std::size_t> tap_shape;
  std::size_t num_classes = 0;
  std::string backbone_hash;

  std::vector<std::string> ids;
  tensor activations;  // [n, tap...]
  tensor teachers;     // [n, classes]
  std::vector<split_kind> split;  // valid once split_assigned
  bool split_assigned = false;

  std::size_t size() const { return ids.size(); }
  std::vector<std::size_t> split_indices(split_kind k) const;
  // rows of one split, in stored order
  medial_dataset view(split_kind k) const;

  void save(const std::filesystem::path& path) const;
  static medial_dataset load(const std::filesystem::path& path);
};

// run the backbone over the samples, pairing each candidate-layer activation
// with the backbone's own output pd; labels are never consulted
std::vector<medial_dataset> collect(const backbone_graph& graph, const sample_set& samples,
                                    const std::vector<candidate_layer>& candidates,
                                    std::size_t batch_size = 64);

struct split_sizes {
  std::size_t train = 0, val = 0, test = 0;
};

// floor allocation for val/test, remainder to train
split_sizes compute_split_sizes(std::size_t n, double train_frac, double val_frac,
                                double test_frac);

// seeded shuffle assignment; depends only on (n, seed), so datasets with the
// same sample order land in the same splits at every layer
void assign_splits(medial_dataset& md, double train_frac, double val_frac, double test_frac,
                   std::uint32_t seed);

// hash comparison against the live backbone; stale data is a warning, not an error
bool is_stale(const medial_dataset& md, const backbone_graph& graph);

}  // namespace layercache
