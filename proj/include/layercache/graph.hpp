#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "layercache/layers.hpp"
#include "layercache/tensor.hpp"

namespace layercache {

struct graph_node {
  std::string name;
  layer_spec spec;
  layer_params params;
  bool block_output = false;
};

// an intermediate layer a cache model can attach to
struct candidate_layer {
  std::string node;
  std::size_t ordinal = 0;             // 1-based, in topological order
  std::vector<std::size_t> tap_shape;  // per-sample activation shape at the node
  std::uint64_t cumulative_flops = 0;  // cost of computing up to and including the node
  std::uint64_t fallback_flops = 0;    // remaining cost to the backbone output
};

// frozen classifier dag. nodes are layers; multiple in-edges merge by
// element-wise sum; the output node is a softmax producing a pd.
class backbone_graph {
 public:
  static backbone_graph build(std::vector<graph_node> nodes,
                              std::vector<std::pair<std::string, std::string>> edges,
                              std::string input, std::string output,
                              std::size_t num_classes, std::vector<std::size_t> input_shape);

  static backbone_graph load(const std::filesystem::path& manifest_path);
  // writes the manifest plus one <node>.bin weight blob per parameterized node
  void save(const std::filesystem::path& manifest_path) const;

  const std::vector<graph_node>& nodes() const { return nodes_; }
  const std::vector<std::vector<std::size_t>>& preds() const { return preds_; }
  std::size_t node_index(const std::string& name) const;
  bool has_node(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::size_t>& topo_order() const { return topo_; }
  const std::string& input_node() const { return input_; }
  const std::string& output_node() const { return output_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<std::size_t>& input_shape() const { return input_shape_; }
  const std::vector<std::size_t>& node_shape(const std::string& name) const;

  // full forward pass; returns the output pd [n, classes]
  tensor forward(const tensor& batch) const;
  // same, also filling activations at the named nodes
  tensor forward_with_taps(const tensor& batch, const std::vector<std::string>& taps,
                           std::map<std::string, tensor>& out_taps) const;

  std::uint64_t total_flops() const { return total_flops_; }       // per sample
  std::uint64_t node_flops(const std::string& name) const;         // per sample
  std::uint64_t cumulative_flops(const std::string& name) const;   // ancestors + self
  std::uint64_t fallback_flops(const std::string& name) const;     // total - cumulative

  // true when every input->output path passes through the node
  bool dominates_output(const std::string& name) const;

  // weight-content digest; changes iff any parameter bit changes
  std::string content_hash() const;

  // candidates: inference-active block outputs (not batchnorm, not the output
  // node) that dominate the output and leave work to skip; the last
  // skip_last_k survivors are dropped as not worth caching
  std::vector<candidate_layer> identify_candidates(std::size_t skip_last_k = 1) const;

 private:
  std::vector<graph_node> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::vector<std::size_t>> preds_, succs_;
  std::string input_, output_;
  std::size_t num_classes_ = 0;
  std::vector<std::size_t> input_shape_;
  std::vector<std::size_t> topo_;
  std::vector<std::vector<std::size_t>> in_shapes_;   // per node
  std::vector<std::vector<std::size_t>> out_shapes_;  // per node
  std::vector<std::uint64_t> flops_;                  // per node, per sample
  std::vector<std::uint64_t> cumulative_;             // per node
  std::uint64_t total_flops_ = 0;
};

}  // namespace layercache
