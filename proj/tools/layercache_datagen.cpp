// toy fixture generator: gaussian-blob 16x16 images, 10 classes, plus a small
// convnet backbone pre-trained on a disjoint pool. output layout:
//   <out>/backbone/manifest.json (+ weight blobs)
//   <out>/stream.bin             labeled traffic for the pipeline
//   <out>/config.json            pipeline config wired to the above

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "layercache/calibration.hpp"
#include "layercache/graph.hpp"
#include "layercache/medial.hpp"
#include "layercache/nn.hpp"
#include "layercache/rng.hpp"

namespace {

using namespace layercache;

constexpr std::size_t kSide = 16;
constexpr std::size_t kPixels = kSide * kSide;

struct chain_node {
  std::string name;
  layer_spec spec;
  bool block_output = false;
};

// conv stack with pools; bn1 and drop1 carry block_output marks on purpose so
// the candidate filter has something to reject
std::vector<chain_node> backbone_chain(std::size_t classes) {
  auto drop = layer_spec::relu();
  drop.inference_active = false;  // dropout stand-in, identity at inference
  return {
      {"conv1", layer_spec::conv2d(1, 8, 3, 1, 1), false},
      {"relu1", layer_spec::relu(), false},
      {"pool1", layer_spec::maxpool2d(2, 2), true},
      {"conv2", layer_spec::conv2d(8, 16, 3, 1, 1), false},
      {"relu2", layer_spec::relu(), false},
      {"bn1", layer_spec::batchnorm_frozen(16), true},
      {"drop1", drop, true},
      {"pool2", layer_spec::maxpool2d(2, 2), true},
      {"conv3", layer_spec::conv2d(16, 32, 3, 1, 1), false},
      {"relu3", layer_spec::relu(), true},
      {"gap", layer_spec::global_average_pool(), false},
      {"fc", layer_spec::dense(32, classes), false},
      {"prob", layer_spec::softmax(), false},
  };
}

sample_set draw_samples(const std::vector<std::vector<float>>& templates, std::size_t n,
                        float noise, const std::string& prefix, rng& gen) {
  const std::size_t classes = templates.size();
  sample_set s;
  s.inputs = tensor({n, 1, kSide, kSide});
  float* out = s.inputs.data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = gen.index(classes);
    char id[32];
    std::snprintf(id, sizeof(id), "%s%05zu", prefix.c_str(), i);
    s.ids.push_back(id);
    s.labels.push_back(static_cast<std::int32_t>(c));
    for (std::size_t p = 0; p < kPixels; ++p) {
      out[i * kPixels + p] = templates[c][p] + noise * gen.normal();
    }
  }
  return s;
}

tensor one_hot(const std::vector<std::int32_t>& labels, std::size_t classes) {
  tensor t({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    t.data()[i * classes + static_cast<std::size_t>(labels[i])] = 1.0f;
  }
  return t;
}

float accuracy(const sequential& net, const sample_set& data) {
  std::size_t correct = 0;
  const std::size_t n = data.size();
  for (std::size_t at = 0; at < n; at += 200) {
    std::vector<std::size_t> idx;
    for (std::size_t i = at; i < std::min(n, at + 200); ++i) idx.push_back(i);
    const sample_set chunk = data.subset(idx);
    const auto cls = argmax_rows(net.forward(chunk.inputs));
    for (std::size_t i = 0; i < cls.size(); ++i) {
      if (cls[i] == chunk.labels[i]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(n);
}

void write_config(const std::filesystem::path& path) {
  nlohmann::json j = {
      {"backbone", "backbone/manifest.json"},
      {"stream", "stream.bin"},
      {"artifacts", "artifacts"},
      {"tolerance", 0.02},
      {"skip_last_k", 1},
      {"split", {{"train", 0.5}, {"val", 0.2}, {"test", 0.3}, {"seed", 13}}},
      {"menus",
       {{"conv_channels", {8}},
        {"conv_kernels", {3}},
        {"conv_strides", {1, 2}},
        {"dense_widths", {32}},
        {"max_convs", 1},
        {"max_dense", 1}}},
      {"search",
       {{"epochs", 6},
        {"batch_size", 32},
        {"learning_rate", 1e-3},
        {"optimizer", "adam"},
        {"patience", 3},
        {"seed", 11},
        {"accuracy_slack", 0.01},
        {"convergence_margin", 0.05}}},
      {"train",
       {{"epochs", 45},
        {"batch_size", 32},
        {"learning_rate", 1e-3},
        {"optimizer", "adam"},
        {"patience", 6},
        {"seed", 17}}},
      {"collect_batch", 64},
      {"serve", {{"port", 7070}, {"max_frame_mb", 64}}},
      {"maintenance", {{"drift_fraction", 0.2}}},
      {"evaluate",
       {{"latency_repetitions", 20}, {"latency_warmup", 2}, {"latency_batch", 32}}},
  };
  std::ofstream f(path);
  f << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generate the toy image-classification fixture"};
  std::string out;
  std::size_t samples = 4000, pretrain = 3000, classes = 10, epochs = 12;
  float noise = 1.0f;
  std::uint32_t seed = 7;
  app.add_option("-o,--out", out, "output directory")->required();
  app.add_option("--samples", samples, "stream size");
  app.add_option("--pretrain", pretrain, "backbone training pool size");
  app.add_option("--classes", classes, "number of classes");
  app.add_option("--epochs", epochs, "backbone training epochs");
  app.add_option("--noise", noise, "per-pixel noise stddev");
  app.add_option("--seed", seed, "master seed");
  CLI11_PARSE(app, argc, argv);

  try {
    const std::filesystem::path root(out);
    std::filesystem::create_directories(root / "backbone");

    rng gen(seed);
    std::vector<std::vector<float>> templates(classes, std::vector<float>(kPixels));
    for (auto& t : templates) {
      for (auto& v : t) v = 0.8f * gen.normal();
    }

    const sample_set pool = draw_samples(templates, pretrain, noise, "p", gen);
    const sample_set stream = draw_samples(templates, samples, noise, "s", gen);

    const auto chain = backbone_chain(classes);
    std::vector<layer_spec> specs;
    for (const auto& c : chain) specs.push_back(c.spec);
    sequential net = sequential::create(specs, seed ^ 0xabcdef01u);

    // hold out the tail of the pool for early stopping
    const std::size_t n_val = pool.size() / 8;
    std::vector<std::size_t> tr_idx, va_idx;
    for (std::size_t i = 0; i < pool.size() - n_val; ++i) tr_idx.push_back(i);
    for (std::size_t i = pool.size() - n_val; i < pool.size(); ++i) va_idx.push_back(i);
    const sample_set tr = pool.subset(tr_idx), va = pool.subset(va_idx);

    train_config cfg;
    cfg.max_epochs = epochs;
    cfg.patience = 4;
    cfg.seed = seed;
    const auto hist = train(net, {tr.inputs, one_hot(tr.labels, classes)},
                            {va.inputs, one_hot(va.labels, classes)}, cfg);
    std::printf("backbone: %zu epochs, best val loss %.4f\n", hist.epochs_run,
                hist.best_val_loss);
    std::printf("backbone accuracy on stream: %.4f\n",
                static_cast<double>(accuracy(net, stream)));

    std::vector<graph_node> nodes;
    std::vector<std::pair<std::string, std::string>> edges;
    for (std::size_t i = 0; i < chain.size(); ++i) {
      nodes.push_back({chain[i].name, chain[i].spec, net.params[i], chain[i].block_output});
      if (i) edges.emplace_back(chain[i - 1].name, chain[i].name);
    }
    const auto graph =
        backbone_graph::build(std::move(nodes), std::move(edges), "conv1", "prob", classes,
                              {1, kSide, kSide});
    graph.save(root / "backbone" / "manifest.json");
    stream.save(root / "stream.bin");
    write_config(root / "config.json");
    std::printf("fixture written to %s\n", root.string().c_str());
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
