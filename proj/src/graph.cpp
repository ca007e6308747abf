#include "layercache/graph.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>

#include <nlohmann/json.hpp>

#include "layercache/blob.hpp"
#include "layercache/errors.hpp"

namespace layercache {

using nlohmann::json;

std::size_t backbone_graph::node_index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw error("no node named '" + name + "'");
  return it->second;
}

const std::vector<std::size_t>& backbone_graph::node_shape(const std::string& name) const {
  return out_shapes_[node_index(name)];
}

std::uint64_t backbone_graph::node_flops(const std::string& name) const {
  return flops_[node_index(name)];
}

std::uint64_t backbone_graph::cumulative_flops(const std::string& name) const {
  return cumulative_[node_index(name)];
}

std::uint64_t backbone_graph::fallback_flops(const std::string& name) const {
  return total_flops_ - cumulative_flops(name);
}

backbone_graph backbone_graph::build(std::vector<graph_node> nodes,
                                     std::vector<std::pair<std::string, std::string>> edges,
                                     std::string input, std::string output,
                                     std::size_t num_classes,
                                     std::vector<std::size_t> input_shape) {
  backbone_graph g;
  g.nodes_ = std::move(nodes);
  g.input_ = std::move(input);
  g.output_ = std::move(output);
  g.num_classes_ = num_classes;
  g.input_shape_ = std::move(input_shape);

  const std::size_t n = g.nodes_.size();
  if (n == 0) throw parse_error("graph has no nodes");
  for (std::size_t i = 0; i < n; ++i) {
    if (!g.index_.emplace(g.nodes_[i].name, i).second) {
      throw parse_error("duplicate node name '" + g.nodes_[i].name + "'");
    }
  }
  if (!g.index_.count(g.input_)) throw parse_error("input node '" + g.input_ + "' not defined");
  if (!g.index_.count(g.output_)) throw parse_error("output node '" + g.output_ + "' not defined");

  g.preds_.resize(n);
  g.succs_.resize(n);
  for (const auto& [from, to] : edges) {
    if (!g.index_.count(from) || !g.index_.count(to)) {
      throw parse_error("edge " + from + " -> " + to + " references an unknown node");
    }
    g.preds_[g.index_[to]].push_back(g.index_[from]);
    g.succs_[g.index_[from]].push_back(g.index_[to]);
  }

  // kahn topological sort; declaration order breaks ties so layouts are stable
  std::vector<std::size_t> indeg(n);
  std::set<std::size_t> ready;
  for (std::size_t i = 0; i < n; ++i) {
    indeg[i] = g.preds_[i].size();
    if (indeg[i] == 0) ready.insert(i);
  }
  while (!ready.empty()) {
    const std::size_t i = *ready.begin();
    ready.erase(ready.begin());
    g.topo_.push_back(i);
    for (std::size_t s : g.succs_[i]) {
      if (--indeg[s] == 0) ready.insert(s);
    }
  }
  if (g.topo_.size() != n) {
    for (std::size_t i = 0; i < n; ++i) {
      if (indeg[i] > 0) throw cycle_error("graph has a cycle through node '" + g.nodes_[i].name + "'");
    }
  }

  if (!g.preds_[g.index_[g.input_]].empty()) {
    throw parse_error("input node '" + g.input_ + "' has incoming edges");
  }
  if (!g.succs_[g.index_[g.output_]].empty()) {
    throw parse_error("output node '" + g.output_ + "' has outgoing edges");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (g.preds_[i].empty() && i != g.index_[g.input_]) {
      throw parse_error("node '" + g.nodes_[i].name + "' is not reachable from the input");
    }
  }
  // every node must feed the output
  {
    std::vector<char> reaches(n, 0);
    std::vector<std::size_t> stack{g.index_[g.output_]};
    reaches[stack[0]] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      for (std::size_t p : g.preds_[i]) {
        if (!reaches[p]) {
          reaches[p] = 1;
          stack.push_back(p);
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!reaches[i]) {
        throw parse_error("node '" + g.nodes_[i].name + "' does not reach the output");
      }
    }
  }

  // shape inference along the topo order; merged inputs must agree
  g.in_shapes_.resize(n);
  g.out_shapes_.resize(n);
  g.flops_.resize(n);
  for (std::size_t i : g.topo_) {
    if (g.preds_[i].empty()) {
      g.in_shapes_[i] = g.input_shape_;
    } else {
      g.in_shapes_[i] = g.out_shapes_[g.preds_[i][0]];
      for (std::size_t p : g.preds_[i]) {
        if (g.out_shapes_[p] != g.in_shapes_[i]) {
          throw shape_error("node '" + g.nodes_[i].name + "' merges shapes " +
                            tensor::shape_str(g.out_shapes_[p]) + " and " +
                            tensor::shape_str(g.in_shapes_[i]));
        }
      }
    }
    try {
      g.out_shapes_[i] = output_shape(g.nodes_[i].spec, g.in_shapes_[i]);
    } catch (const shape_error& e) {
      throw shape_error("node '" + g.nodes_[i].name + "': " + e.what());
    }
    g.flops_[i] = layer_flops(g.nodes_[i].spec, g.in_shapes_[i]);
  }

  const auto& out_node = g.nodes_[g.index_[g.output_]];
  if (out_node.spec.kind != layer_kind::softmax) {
    throw parse_error("output node '" + g.output_ + "' must be a softmax");
  }
  if (g.out_shapes_[g.index_[g.output_]] != std::vector<std::size_t>{g.num_classes_}) {
    throw shape_error("output node produces " +
                      tensor::shape_str(g.out_shapes_[g.index_[g.output_]]) +
                      ", expected [" + std::to_string(g.num_classes_) + "]");
  }

  // per-node cumulative cost = flops of all ancestors plus the node itself
  g.cumulative_.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<char> seen(n, 0);
    std::vector<std::size_t> stack{i};
    seen[i] = 1;
    std::uint64_t acc = 0;
    while (!stack.empty()) {
      const std::size_t c = stack.back();
      stack.pop_back();
      acc += g.flops_[c];
      for (std::size_t p : g.preds_[c]) {
        if (!seen[p]) {
          seen[p] = 1;
          stack.push_back(p);
        }
      }
    }
    g.cumulative_[i] = acc;
  }
  g.total_flops_ = 0;
  for (std::size_t i = 0; i < n; ++i) g.total_flops_ += g.flops_[i];

  // weight shapes must match the specs
  for (std::size_t i = 0; i < n; ++i) {
    if (layer_has_params(g.nodes_[i].spec.kind)) {
      // forward() checks shapes; probe with a 1-sample zero batch is wasteful,
      // so validate directly against an init template
      rng probe(0);
      const layer_params tmpl = init_params(g.nodes_[i].spec, probe);
      if (g.nodes_[i].params.weight.shape() != tmpl.weight.shape() ||
          g.nodes_[i].params.bias.shape() != tmpl.bias.shape()) {
        throw shape_error("node '" + g.nodes_[i].name + "': weight shape " +
                          g.nodes_[i].params.weight.shape_str() + " does not match expected " +
                          tmpl.weight.shape_str());
      }
    }
  }
  return g;
}

tensor backbone_graph::forward(const tensor& batch) const {
  std::map<std::string, tensor> none;
  return forward_with_taps(batch, {}, none);
}

tensor backbone_graph::forward_with_taps(const tensor& batch,
                                         const std::vector<std::string>& taps,
                                         std::map<std::string, tensor>& out_taps) const {
  if (batch.sample_shape() != input_shape_) {
    throw shape_error("graph input shape " + tensor::shape_str(batch.sample_shape()) +
                      " does not match expected " + tensor::shape_str(input_shape_));
  }
  std::vector<char> want(nodes_.size(), 0);
  for (const auto& t : taps) want[node_index(t)] = 1;

  std::vector<tensor> acts(nodes_.size());
  for (std::size_t i : topo_) {
    tensor in;
    if (preds_[i].empty()) {
      in = batch;
    } else if (preds_[i].size() == 1) {
      in = acts[preds_[i][0]];
    } else {
      in = acts[preds_[i][0]];
      for (std::size_t p = 1; p < preds_[i].size(); ++p) {
        const tensor& other = acts[preds_[i][p]];
        for (std::size_t v = 0; v < in.size(); ++v) in[v] += other[v];
      }
    }
    acts[i] = layercache::forward(nodes_[i].spec, nodes_[i].params, in);
    if (want[i]) out_taps[nodes_[i].name] = acts[i];
  }
  return acts[node_index(output_)];
}

bool backbone_graph::dominates_output(const std::string& name) const {
  const std::size_t blocked = node_index(name);
  const std::size_t src = node_index(input_);
  const std::size_t dst = node_index(output_);
  if (blocked == src || blocked == dst) return true;
  // can the output still be reached when the node is removed?
  std::vector<char> seen(nodes_.size(), 0);
  std::vector<std::size_t> stack{src};
  seen[src] = 1;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    if (i == dst) return false;
    for (std::size_t s : succs_[i]) {
      if (s != blocked && !seen[s]) {
        seen[s] = 1;
        stack.push_back(s);
      }
    }
  }
  return true;
}

std::vector<candidate_layer> backbone_graph::identify_candidates(std::size_t skip_last_k) const {
  std::vector<candidate_layer> out;
  for (std::size_t i : topo_) {
    const graph_node& nd = nodes_[i];
    if (!nd.spec.inference_active) continue;
    if (!nd.block_output) continue;
    if (nd.spec.kind == layer_kind::batchnorm_frozen) continue;
    if (nd.name == output_) continue;
    if (fallback_flops(nd.name) == 0) continue;
    if (!dominates_output(nd.name)) continue;
    candidate_layer c;
    c.node = nd.name;
    c.tap_shape = out_shapes_[i];
    c.cumulative_flops = cumulative_[i];
    c.fallback_flops = total_flops_ - cumulative_[i];
    out.push_back(std::move(c));
  }
  if (skip_last_k >= out.size()) {
    out.clear();
  } else {
    out.resize(out.size() - skip_last_k);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].ordinal = i + 1;
  return out;
}

std::string backbone_graph::content_hash() const {
  sha256 h;
  for (std::size_t i : topo_) {
    if (!layer_has_params(nodes_[i].spec.kind)) continue;
    h.update_f32(nodes_[i].params.weight.values());
    h.update_f32(nodes_[i].params.bias.values());
  }
  return h.hex_digest();
}

namespace {

json spec_to_json(const graph_node& nd) {
  json j;
  j["name"] = nd.name;
  j["kind"] = layer_kind_name(nd.spec.kind);
  switch (nd.spec.kind) {
    case layer_kind::dense:
      j["in_features"] = nd.spec.in_features;
      j["out_features"] = nd.spec.out_features;
      break;
    case layer_kind::conv2d:
      j["in_channels"] = nd.spec.in_channels;
      j["out_channels"] = nd.spec.out_channels;
      j["kernel"] = nd.spec.kernel;
      j["stride"] = nd.spec.stride;
      j["padding"] = nd.spec.padding;
      break;
    case layer_kind::maxpool2d:
      j["kernel"] = nd.spec.kernel;
      j["stride"] = nd.spec.stride;
      break;
    case layer_kind::batchnorm_frozen:
      j["features"] = nd.spec.features;
      break;
    default:
      break;
  }
  if (nd.block_output) j["block_output"] = true;
  if (!nd.spec.inference_active) j["inference_active"] = false;
  if (layer_has_params(nd.spec.kind)) j["weights"] = nd.name + ".bin";
  return j;
}

layer_spec spec_from_json(const json& j) {
  const layer_kind kind = layer_kind_from_name(j.at("kind").get<std::string>());
  layer_spec s;
  switch (kind) {
    case layer_kind::dense:
      s = layer_spec::dense(j.at("in_features").get<std::size_t>(),
                            j.at("out_features").get<std::size_t>());
      break;
    case layer_kind::conv2d:
      s = layer_spec::conv2d(j.at("in_channels").get<std::size_t>(),
                             j.at("out_channels").get<std::size_t>(),
                             j.at("kernel").get<std::size_t>(),
                             j.value("stride", std::size_t{1}),
                             j.value("padding", std::size_t{0}));
      break;
    case layer_kind::maxpool2d:
      s = layer_spec::maxpool2d(j.at("kernel").get<std::size_t>(),
                                j.at("stride").get<std::size_t>());
      break;
    case layer_kind::batchnorm_frozen:
      s = layer_spec::batchnorm_frozen(j.at("features").get<std::size_t>());
      break;
    default:
      s.kind = kind;
      break;
  }
  s.inference_active = j.value("inference_active", true);
  return s;
}

constexpr const char* kManifestFormat = "layercache-backbone/1";

}  // namespace

void backbone_graph::save(const std::filesystem::path& manifest_path) const {
  const auto dir = manifest_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);

  json j;
  j["format"] = kManifestFormat;
  j["num_classes"] = num_classes_;
  j["input"] = input_;
  j["output"] = output_;
  j["input_shape"] = input_shape_;
  j["nodes"] = json::array();
  for (const auto& nd : nodes_) j["nodes"].push_back(spec_to_json(nd));
  j["edges"] = json::array();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (std::size_t s : succs_[i]) {
      j["edges"].push_back(json::array({nodes_[i].name, nodes_[s].name}));
    }
  }

  std::ofstream f(manifest_path);
  if (!f) throw error("cannot write " + manifest_path.string());
  f << j.dump(2) << "\n";

  for (const auto& nd : nodes_) {
    if (!layer_has_params(nd.spec.kind)) continue;
    std::vector<float> blob = nd.params.weight.values();
    blob.insert(blob.end(), nd.params.bias.values().begin(), nd.params.bias.values().end());
    write_f32_blob(dir / (nd.name + ".bin"), blob);
  }
}

backbone_graph backbone_graph::load(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw missing_blob_error("cannot open " + manifest_path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw parse_error(manifest_path.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kManifestFormat) {
      throw parse_error(manifest_path.string() + ": unsupported format '" +
                        j.at("format").get<std::string>() + "'");
    }
    const auto dir = manifest_path.parent_path();
    std::vector<graph_node> nodes;
    for (const auto& nj : j.at("nodes")) {
      graph_node nd;
      nd.name = nj.at("name").get<std::string>();
      nd.spec = spec_from_json(nj);
      nd.block_output = nj.value("block_output", false);
      if (layer_has_params(nd.spec.kind)) {
        const auto blob_name = nj.value("weights", nd.name + ".bin");
        const auto blob = read_f32_blob(dir / blob_name);
        rng probe(0);
        layer_params tmpl = init_params(nd.spec, probe);
        const std::size_t want = tmpl.weight.size() + tmpl.bias.size();
        if (blob.size() != want) {
          throw parse_error(blob_name + ": has " + std::to_string(blob.size()) +
                            " floats, node '" + nd.name + "' expects " + std::to_string(want));
        }
        nd.params.weight = tensor(tmpl.weight.shape(),
                                  {blob.begin(), blob.begin() + tmpl.weight.size()});
        nd.params.bias = tensor(tmpl.bias.shape(),
                                {blob.begin() + tmpl.weight.size(), blob.end()});
      }
      nodes.push_back(std::move(nd));
    }
    std::vector<std::pair<std::string, std::string>> edges;
    for (const auto& ej : j.at("edges")) {
      edges.emplace_back(ej.at(0).get<std::string>(), ej.at(1).get<std::string>());
    }
    return build(std::move(nodes), std::move(edges), j.at("input").get<std::string>(),
                 j.at("output").get<std::string>(), j.at("num_classes").get<std::size_t>(),
                 j.at("input_shape").get<std::vector<std::size_t>>());
  } catch (const json::exception& e) {
    throw parse_error(manifest_path.string() + ": " + e.what());
  }
}

}  // namespace layercache
