#pragma once

// shared helpers for the test suites: finite differences, kink-safe inputs,
// and small ready-made graphs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "layercache/graph.hpp"
#include "layercache/rng.hpp"
#include "layercache/tensor.hpp"

namespace testsup {

using layercache::backbone_graph;
using layercache::graph_node;
using layercache::layer_spec;
using layercache::rng;
using layercache::tensor;

// central differences of a scalar function over a flat parameter vector
inline std::vector<double> finite_diff(const std::function<double(const std::vector<float>&)>& f,
                                       std::vector<float> x, double h = 1e-3) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float keep = x[i];
    x[i] = keep + static_cast<float>(h);
    const double up = f(x);
    x[i] = keep - static_cast<float>(h);
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-12);
}

// distinct values with pairwise gaps of at least 0.01 and none within 0.005 of
// zero, so a +-1e-3 probe never crosses a relu or max-pool kink
inline tensor kink_safe_tensor(const std::vector<std::size_t>& shape, rng& gen) {
  tensor t(shape);
  const std::size_t n = t.size();
  std::vector<std::size_t> slots = gen.permutation(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const double centered = 0.01 * (static_cast<double>(slots[i]) - static_cast<double>(n));
    t.data()[i] = static_cast<float>(centered >= 0.0 ? centered + 0.005 : centered - 0.005);
  }
  return t;
}

inline tensor random_tensor(const std::vector<std::size_t>& shape, rng& gen, float lo = -1.0f,
                            float hi = 1.0f) {
  tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = gen.uniform(lo, hi);
  return t;
}

// dense+relu blocks with every relu marked as a block output; the classic
// straight-line stack used by the replay/oracle comparisons
inline backbone_graph mlp_chain(std::size_t blocks, std::size_t in_dim, std::size_t width,
                                std::size_t classes, std::uint32_t seed) {
  rng gen(seed);
  std::vector<graph_node> nodes;
  std::vector<std::pair<std::string, std::string>> edges;
  std::size_t prev_w = in_dim;
  std::string prev;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string fc = "fc" + std::to_string(b + 1);
    const std::string act = "act" + std::to_string(b + 1);
    auto fc_spec = layer_spec::dense(prev_w, width);
    nodes.push_back({fc, fc_spec, layercache::init_params(fc_spec, gen), false});
    nodes.push_back({act, layer_spec::relu(), {}, true});
    if (!prev.empty()) edges.emplace_back(prev, fc);
    edges.emplace_back(fc, act);
    prev = act;
    prev_w = width;
  }
  auto head_spec = layer_spec::dense(prev_w, classes);
  nodes.push_back({"head", head_spec, layercache::init_params(head_spec, gen), false});
  nodes.push_back({"prob", layer_spec::softmax(), {}, false});
  edges.emplace_back(prev, "head");
  edges.emplace_back("head", "prob");
  return backbone_graph::build(std::move(nodes), std::move(edges), "fc1", "prob", classes,
                               {in_dim});
}

}  // namespace testsup
