#include "layercache/cache_builder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "layercache/blob.hpp"
#include "layercache/errors.hpp"

namespace layercache {

using nlohmann::json;

std::vector<layer_spec> cache_architecture::materialize(
    const std::vector<std::size_t>& tap_shape, std::size_t num_classes) const {
  std::vector<layer_spec> specs;
  std::size_t width;
  if (tap_shape.size() == 3) {
    std::size_t channels = tap_shape[0];
    for (const auto& c : convs) {
      specs.push_back(layer_spec::conv2d(channels, c.channels, c.kernel, c.stride,
                                         c.kernel / 2));
      specs.push_back(layer_spec::relu());
      channels = c.channels;
    }
    specs.push_back(layer_spec::global_average_pool());
    width = channels;
  } else if (tap_shape.size() == 1) {
    if (!convs.empty()) {
      throw precondition_error("conv stack is undefined on a vector tap");
    }
    width = tap_shape[0];
  } else {
    throw shape_error("cache tap shape " + tensor::shape_str(tap_shape) +
                      " is neither [c, h, w] nor [features]");
  }
  for (std::size_t w : dense_widths) {
    specs.push_back(layer_spec::dense(width, w));
    specs.push_back(layer_spec::relu());
    width = w;
  }
  specs.push_back(layer_spec::dense(width, num_classes));
  specs.push_back(layer_spec::log_softmax());
  return specs;
}

std::uint64_t cache_architecture::flops(const std::vector<std::size_t>& tap_shape,
                                        std::size_t num_classes) const {
  const auto specs = materialize(tap_shape, num_classes);
  auto cur = tap_shape;
  std::uint64_t total = 0;
  for (const auto& s : specs) {
    total += layer_flops(s, cur);
    cur = output_shape(s, cur);
  }
  return total;
}

std::string cache_architecture::describe() const {
  std::ostringstream os;
  for (const auto& c : convs) {
    os << "c" << c.channels << "k" << c.kernel << "s" << c.stride << "-";
  }
  if (!convs.empty()) os << "gap-";
  for (std::size_t w : dense_widths) os << "d" << w << "-";
  os << "out";
  return os.str();
}

std::vector<cache_architecture> enumerate_search_space(
    const std::vector<std::size_t>& tap_shape, std::size_t num_classes,
    const search_menus& menus, std::uint64_t c2) {
  if (menus.conv_channels.empty() || menus.conv_kernels.empty() ||
      menus.conv_strides.empty() || menus.dense_widths.empty()) {
    throw precondition_error("search menus must be non-empty");
  }
  auto sorted = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  const auto channels = sorted(menus.conv_channels);
  const auto kernels = sorted(menus.conv_kernels);
  const auto strides = sorted(menus.conv_strides);
  const auto widths = sorted(menus.dense_widths);

  // per-slot conv options, narrowest first
  std::vector<conv_choice> conv_opts;
  for (std::size_t c : channels) {
    for (std::size_t k : kernels) {
      for (std::size_t s : strides) conv_opts.push_back({c, k, s});
    }
  }

  const std::size_t max_convs = tap_shape.size() == 3 ? menus.max_convs : 0;
  std::vector<cache_architecture> out;
  for (std::size_t nconv = 0; nconv <= max_convs; ++nconv) {
    std::vector<std::size_t> pick(nconv, 0);  // indices into conv_opts
    while (true) {
      for (std::size_t ndense = 1; ndense <= menus.max_dense; ++ndense) {
        // odometer over one width index per hidden slot
        std::vector<std::size_t> widx(ndense, 0);
        while (true) {
          cache_architecture arch;
          for (std::size_t i = 0; i < nconv; ++i) arch.convs.push_back(conv_opts[pick[i]]);
          for (std::size_t i = 0; i < ndense; ++i) arch.dense_widths.push_back(widths[widx[i]]);
          if (arch.flops(tap_shape, num_classes) < c2) out.push_back(std::move(arch));
          std::size_t d = ndense;
          while (d > 0 && ++widx[d - 1] == widths.size()) widx[--d] = 0;
          if (d == 0) break;
        }
      }
      if (nconv == 0) break;
      std::size_t d = nconv;
      while (d > 0 && ++pick[d - 1] == conv_opts.size()) pick[--d] = 0;
      if (d == 0) break;
    }
  }
  return out;
}

tensor cache_model::logits(const tensor& activations) const {
  return net.logits(activations);
}

cache_model::predictions cache_model::predict(const tensor& activations) const {
  const tensor lg = logits(activations);
  const std::size_t n = lg.rows(), k = lg.row_size();
  predictions out;
  out.classes.resize(n);
  out.confidence.resize(n);
  const float inv_t = 1.0f / temperature;
  for (std::size_t r = 0; r < n; ++r) {
    const float* x = lg.row(r);
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i) {
      if (x[i] > x[best]) best = i;
    }
    // max of softmax(logits / t) without materializing the full pd
    double denom = 0.0;
    const double mx = static_cast<double>(x[best]) * inv_t;
    for (std::size_t i = 0; i < k; ++i) {
      denom += std::exp(static_cast<double>(x[i]) * inv_t - mx);
    }
    out.classes[r] = static_cast<std::int32_t>(best);
    out.confidence[r] = static_cast<float>(1.0 / denom);
  }
  return out;
}

float cache_accuracy(const cache_model& cache, const medial_dataset& md) {
  if (md.size() == 0) throw precondition_error("cache_accuracy: empty dataset");
  const auto preds = cache.predict(md.activations);
  std::size_t agree = 0;
  const std::size_t k = md.num_classes;
  for (std::size_t r = 0; r < md.size(); ++r) {
    const float* t = md.teachers.row(r);
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i) {
      if (t[i] > t[best]) best = i;
    }
    if (static_cast<std::int32_t>(best) == preds.classes[r]) ++agree;
  }
  return static_cast<float>(agree) / static_cast<float>(md.size());
}

bool is_converged(float accuracy, std::size_t num_classes, float margin) {
  return accuracy > 1.0f / static_cast<float>(num_classes) + margin;
}

trained_cache train_cache(const cache_architecture& arch, const medial_dataset& md,
                          const candidate_layer& cand, const train_config& cfg) {
  if (!md.split_assigned) {
    throw precondition_error("train_cache: medial dataset has no split assignment");
  }
  if (md.layer != cand.node) {
    throw precondition_error("train_cache: dataset is for layer '" + md.layer +
                             "', candidate is '" + cand.node + "'");
  }
  const auto train_view = md.view(split_kind::train);
  const auto val_view = md.view(split_kind::val);
  if (train_view.size() == 0 || val_view.size() == 0) {
    throw precondition_error("train_cache: empty train or val split");
  }

  trained_cache out;
  out.model.target_layer = cand.node;
  out.model.ordinal = cand.ordinal;
  out.model.arch = arch;
  out.model.tap_shape = md.tap_shape;
  out.model.num_classes = md.num_classes;
  out.model.own_flops = arch.flops(md.tap_shape, md.num_classes);
  out.model.fallback_flops = cand.fallback_flops;
  out.model.backbone_hash = md.backbone_hash;
  out.model.net = sequential::create(arch.materialize(md.tap_shape, md.num_classes), cfg.seed);

  distill_data train_data{train_view.activations, train_view.teachers};
  distill_data val_data{val_view.activations, val_view.teachers};
  out.history = train(out.model.net, train_data, val_data, cfg);
  out.model.val_cache_accuracy = cache_accuracy(out.model, val_view);
  return out;
}

search_outcome search(const candidate_layer& cand, const medial_dataset& md,
                      const search_menus& menus, const train_config& cfg,
                      float accuracy_slack, float margin) {
  const auto space =
      enumerate_search_space(md.tap_shape, md.num_classes, menus, cand.fallback_flops);
  search_outcome out;
  if (space.empty()) return out;

  std::vector<trained_cache> trained;
  trained.reserve(space.size());
  float best_acc = -1.0f;
  for (std::size_t i = 0; i < space.size(); ++i) {
    train_config arch_cfg = cfg;
    // each architecture gets its own derived seed so reordering the menu
    // cannot silently reuse weights
    arch_cfg.seed = cfg.seed ^ (0x9e3779b9u * static_cast<std::uint32_t>(i + 1));
    trained.push_back(train_cache(space[i], md, cand, arch_cfg));
    const auto& tc = trained.back();
    arch_report rep;
    rep.arch = space[i].describe();
    rep.accuracy = tc.model.val_cache_accuracy;
    rep.c1 = tc.model.own_flops;
    rep.converged = is_converged(rep.accuracy, md.num_classes, margin);
    out.report.push_back(rep);
    if (rep.converged) best_acc = std::max(best_acc, rep.accuracy);
  }
  if (best_acc < 0.0f) return out;  // nothing converged: layer discarded

  std::size_t pick = space.size();
  for (std::size_t i = 0; i < space.size(); ++i) {
    if (!out.report[i].converged) continue;
    if (out.report[i].accuracy + accuracy_slack < best_acc) continue;
    if (pick == space.size() || out.report[i].c1 < out.report[pick].c1) pick = i;
  }
  out.report[pick].selected = true;
  out.best = std::move(trained[pick]);
  return out;
}

void cache_model::save(const std::filesystem::path& json_path) const {
  const auto dir = json_path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  const std::string blob_name = json_path.stem().string() + ".bin";

  json j;
  j["format"] = "layercache-cache/1";
  j["layer"] = target_layer;
  j["ordinal"] = ordinal;
  json arch_j;
  arch_j["convs"] = json::array();
  for (const auto& c : arch.convs) {
    arch_j["convs"].push_back({{"channels", c.channels}, {"kernel", c.kernel},
                               {"stride", c.stride}});
  }
  arch_j["dense_widths"] = arch.dense_widths;
  j["arch"] = arch_j;
  j["tap_shape"] = tap_shape;
  j["num_classes"] = num_classes;
  j["temperature"] = temperature;
  j["threshold"] = threshold;
  j["c1"] = own_flops;
  j["c2"] = fallback_flops;
  j["val_cache_accuracy"] = val_cache_accuracy;
  if (!hit_curve.empty()) {
    json curve = json::array();
    for (const auto& [th, hr] : hit_curve) curve.push_back(json::array({th, hr}));
    j["hit_curve"] = curve;
  }
  j["backbone_hash"] = backbone_hash;
  j["weights"] = blob_name;

  std::ofstream f(json_path);
  if (!f) throw error("cannot write " + json_path.string());
  f << j.dump(2) << "\n";
  write_f32_blob(dir / blob_name, net.flat_params());
}

cache_model cache_model::load(const std::filesystem::path& json_path) {
  std::ifstream f(json_path);
  if (!f) throw missing_blob_error("cannot open " + json_path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw parse_error(json_path.string() + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "layercache-cache/1") {
      throw parse_error(json_path.string() + ": unsupported format");
    }
    cache_model m;
    m.target_layer = j.at("layer").get<std::string>();
    m.ordinal = j.at("ordinal").get<std::size_t>();
    for (const auto& cj : j.at("arch").at("convs")) {
      m.arch.convs.push_back({cj.at("channels").get<std::size_t>(),
                              cj.at("kernel").get<std::size_t>(),
                              cj.at("stride").get<std::size_t>()});
    }
    m.arch.dense_widths = j.at("arch").at("dense_widths").get<std::vector<std::size_t>>();
    m.tap_shape = j.at("tap_shape").get<std::vector<std::size_t>>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.temperature = j.at("temperature").get<float>();
    m.threshold = j.at("threshold").get<float>();
    m.own_flops = j.at("c1").get<std::uint64_t>();
    m.fallback_flops = j.at("c2").get<std::uint64_t>();
    m.val_cache_accuracy = j.at("val_cache_accuracy").get<float>();
    if (j.contains("hit_curve")) {
      for (const auto& pt : j.at("hit_curve")) {
        m.hit_curve.emplace_back(pt.at(0).get<float>(), pt.at(1).get<float>());
      }
    }
    m.backbone_hash = j.at("backbone_hash").get<std::string>();

    m.net = sequential::create(m.arch.materialize(m.tap_shape, m.num_classes), 0);
    const auto blob_name = j.value("weights", json_path.stem().string() + ".bin");
    m.net.set_flat_params(read_f32_blob(json_path.parent_path() / blob_name));
    return m;
  } catch (const json::exception& e) {
    throw parse_error(json_path.string() + ": " + e.what());
  }
}

}  // namespace layercache
