#include "layercache/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "layercache/calibration.hpp"
#include "layercache/errors.hpp"
#include "layercache/medial.hpp"
#include "layercache/subset.hpp"

namespace layercache {

using nlohmann::json;

namespace {

json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw missing_blob_error("cannot open " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw parse_error(path.string() + ": " + e.what());
  }
  return j;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw error("cannot write " + path.string());
  f << text;
}

void require_artifact(const std::filesystem::path& path, const std::string& stage) {
  if (!std::filesystem::exists(path)) {
    throw precondition_error("missing " + path.string() + "; run `layercache " + stage +
                             "` first");
  }
}

// artifact layout under cfg.artifacts
struct layout {
  std::filesystem::path root;
  explicit layout(const pipeline_config& cfg) : root(cfg.artifacts) {}
  std::filesystem::path candidates() const { return root / "candidates.json"; }
  std::filesystem::path medial(const std::string& layer) const {
    return root / "medial" / (layer + ".mdl");
  }
  std::filesystem::path search_report() const { return root / "search" / "report.json"; }
  std::filesystem::path selected_archs() const { return root / "search" / "selected.json"; }
  std::filesystem::path cache(const std::string& layer) const {
    return root / "caches" / (layer + ".json");
  }
  std::filesystem::path histories() const { return root / "caches" / "history.json"; }
  std::filesystem::path calib(const std::string& layer) const {
    return root / "calibration" / (layer + ".json");
  }
  std::filesystem::path calib_csv(const std::string& layer) const {
    return root / "calibration" / (layer + ".csv");
  }
  std::filesystem::path subset_choice() const { return root / "subset" / "selected.json"; }
  std::filesystem::path score_table() const { return root / "subset" / "score_table.csv"; }
  std::filesystem::path state() const { return root / "state.json"; }
  std::filesystem::path eval_dir() const { return root / "evaluation"; }
};

train_config train_from_json(const json& j, train_config base) {
  if (j.contains("epochs")) base.max_epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("learning_rate")) base.learning_rate = j["learning_rate"].get<float>();
  if (j.contains("momentum")) base.momentum = j["momentum"].get<float>();
  if (j.contains("patience")) base.patience = j["patience"].get<std::size_t>();
  if (j.contains("seed")) base.seed = j["seed"].get<std::uint32_t>();
  if (j.contains("optimizer")) {
    const auto name = j["optimizer"].get<std::string>();
    if (name == "adam") {
      base.optimizer = optimizer_kind::adam;
    } else if (name == "sgd-momentum") {
      base.optimizer = optimizer_kind::sgd_momentum;
    } else {
      throw parse_error("unknown optimizer '" + name + "'");
    }
  }
  return base;
}

struct loaded_candidates {
  std::string backbone_hash;
  std::vector<candidate_layer> list;
};

loaded_candidates load_candidates(const layout& lay) {
  require_artifact(lay.candidates(), "candidates");
  const json j = read_json(lay.candidates());
  loaded_candidates out;
  out.backbone_hash = j.at("backbone_hash").get<std::string>();
  for (const auto& cj : j.at("candidates")) {
    candidate_layer c;
    c.node = cj.at("layer").get<std::string>();
    c.ordinal = cj.at("ordinal").get<std::size_t>();
    c.tap_shape = cj.at("tap_shape").get<std::vector<std::size_t>>();
    c.cumulative_flops = cj.at("cumulative_flops").get<std::uint64_t>();
    c.fallback_flops = cj.at("fallback_flops").get<std::uint64_t>();
    out.list.push_back(std::move(c));
  }
  return out;
}

medial_dataset load_medial_checked(const layout& lay, const std::string& layer,
                                   const backbone_graph& graph) {
  require_artifact(lay.medial(layer), "collect");
  medial_dataset md = medial_dataset::load(lay.medial(layer));
  if (is_stale(md, graph)) {
    std::fprintf(stderr,
                 "warning: medial data for '%s' was collected from a different backbone\n",
                 layer.c_str());
  }
  return md;
}

std::uint32_t mix_seed(std::uint32_t seed, std::size_t ordinal) {
  return seed ^ (0x85ebca6bu * static_cast<std::uint32_t>(ordinal + 1));
}

}  // namespace

pipeline_config pipeline_config::load(const std::filesystem::path& path) {
  const json j = read_json(path);
  const auto dir = std::filesystem::absolute(path).parent_path();
  auto resolve = [&dir](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : dir / fp;
  };

  pipeline_config cfg;
  try {
    cfg.backbone = resolve(j.at("backbone").get<std::string>());
    cfg.stream = resolve(j.at("stream").get<std::string>());
    cfg.artifacts = resolve(j.at("artifacts").get<std::string>());
    cfg.tolerance = j.value("tolerance", cfg.tolerance);
    if (cfg.tolerance < 0.0 || cfg.tolerance >= 1.0) {
      throw precondition_error("tolerance must be in [0, 1)");
    }
    cfg.skip_last_k = j.value("skip_last_k", cfg.skip_last_k);
    if (j.contains("split")) {
      const auto& s = j["split"];
      cfg.split_train = s.value("train", cfg.split_train);
      cfg.split_val = s.value("val", cfg.split_val);
      cfg.split_test = s.value("test", cfg.split_test);
      cfg.split_seed = s.value("seed", cfg.split_seed);
    }
    if (j.contains("menus")) {
      const auto& m = j["menus"];
      if (m.contains("conv_channels"))m["conv_channels"].get_to(cfg.menus.conv_channels);
      if (m.contains("conv_kernels")) m["conv_kernels"].get_to(cfg.menus.conv_kernels);
      if (m.contains("conv_strides")) m["conv_strides"].get_to(cfg.menus.conv_strides);
      if (m.contains("dense_widths")) m["dense_widths"].get_to(cfg.menus.dense_widths);
      cfg.menus.max_convs = m.value("max_convs", cfg.menus.max_convs);
      cfg.menus.max_dense = m.value("max_dense", cfg.menus.max_dense);
    }
    cfg.search_train.max_epochs = 30;
    if (j.contains("search")) {
      cfg.search_train = train_from_json(j["search"], cfg.search_train);
      cfg.accuracy_slack = j["search"].value("accuracy_slack", cfg.accuracy_slack);
      cfg.convergence_margin = j["search"].value("convergence_margin", cfg.convergence_margin);
    }
    cfg.full_train = j.contains("train") ? train_from_json(j["train"], cfg.full_train)
                                         : cfg.full_train;
    cfg.collect_batch = j.value("collect_batch", cfg.collect_batch);
    if (j.contains("maintenance")) {
      cfg.drift_fraction = j["maintenance"].value("drift_fraction", cfg.drift_fraction);
    }
    if (j.contains("serve")) {
      cfg.serve_port = j["serve"].value("port", cfg.serve_port);
      cfg.serve_max_frame_mb = j["serve"].value("max_frame_mb", cfg.serve_max_frame_mb);
    }
    if (j.contains("evaluate")) {
      const auto& e = j["evaluate"];
      cfg.latency.measure = e.value("measure_latency", cfg.latency.measure);
      cfg.latency.repetitions = e.value("latency_repetitions", cfg.latency.repetitions);
      cfg.latency.warmup = e.value("latency_warmup", cfg.latency.warmup);
      cfg.latency.batch = e.value("latency_batch", cfg.latency.batch);
    }
  } catch (const json::exception& e) {
    throw parse_error(path.string() + ": " + e.what());
  }
  return cfg;
}

maintenance_state maintenance_state::load(const std::filesystem::path& path) {
  maintenance_state st;
  if (!std::filesystem::exists(path)) return st;
  const json j = read_json(path);
  st.last_build_count = j.value("last_build_count", std::uint64_t{0});
  st.current_count = j.value("current_count", std::uint64_t{0});
  st.last_build_hash = j.value("last_build_hash", std::string{});
  return st;
}

void maintenance_state::save(const std::filesystem::path& path) const {
  write_json(path, json{{"last_build_count", last_build_count},
                        {"current_count", current_count},
                        {"last_build_hash", last_build_hash}});
}

const char* trigger_name(trigger_kind t) {
  switch (t) {
    case trigger_kind::none: return "none";
    case trigger_kind::data_drift: return "data-drift";
    case trigger_kind::backbone_changed: return "backbone-changed";
  }
  return "?";
}

trigger_kind check_retrain_trigger(const maintenance_state& state,
                                   const std::string& current_hash, double drift_fraction) {
  if (state.last_build_hash.empty()) return trigger_kind::none;
  if (state.last_build_hash != current_hash) return trigger_kind::backbone_changed;
  if (state.current_count > 0) {
    const double fresh = static_cast<double>(state.current_count - state.last_build_count) /
                         static_cast<double>(state.current_count);
    if (fresh >= drift_fraction) return trigger_kind::data_drift;
  }
  return trigger_kind::none;
}

void run_candidates(const pipeline_config& cfg) {
  const layout lay(cfg);
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  const auto cands = graph.identify_candidates(cfg.skip_last_k);

  json j;
  j["backbone_hash"] = graph.content_hash();
  j["skip_last_k"] = cfg.skip_last_k;
  j["total_flops"] = graph.total_flops();
  j["candidates"] = json::array();
  for (const auto& c : cands) {
    j["candidates"].push_back({{"layer", c.node},
                               {"ordinal", c.ordinal},
                               {"tap_shape", c.tap_shape},
                               {"cumulative_flops", c.cumulative_flops},
                               {"fallback_flops", c.fallback_flops}});
  }
  write_json(lay.candidates(), j);
}

void run_collect(const pipeline_config& cfg) {
  const layout lay(cfg);
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  const auto cands = load_candidates(lay);
  if (cands.backbone_hash != graph.content_hash()) {
    throw precondition_error("candidate list is stale; run `layercache candidates` first");
  }
  const sample_set stream = sample_set::load(cfg.stream);

  auto datasets = collect(graph, stream, cands.list, cfg.collect_batch);
  std::filesystem::create_directories(lay.root / "medial");
  for (auto& md : datasets) {
    assign_splits(md, cfg.split_train, cfg.split_val, cfg.split_test, cfg.split_seed);
    md.save(lay.medial(md.layer));
  }

  maintenance_state st = maintenance_state::load(lay.state());
  if (stream.size() < st.current_count) {
    throw precondition_error("collected-sample count shrank from " +
                             std::to_string(st.current_count) + " to " +
                             std::to_string(stream.size()) + "; counts are append-only");
  }
  st.current_count = stream.size();
  st.save(lay.state());
}

void run_search(const pipeline_config& cfg) {
  const layout lay(cfg);
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  const auto cands = load_candidates(lay);

  json report, selected;
  report["layers"] = json::object();
  selected["backbone_hash"] = graph.content_hash();
  selected["layers"] = json::object();
  selected["discarded"] = json::array();

  for (const auto& cand : cands.list) {
    const medial_dataset md = load_medial_checked(lay, cand.node, graph);
    train_config cfg_arch = cfg.search_train;
    cfg_arch.seed = mix_seed(cfg.search_train.seed, cand.ordinal);
    const auto outcome =
        search(cand, md, cfg.menus, cfg_arch, cfg.accuracy_slack, cfg.convergence_margin);

    json rows = json::array();
    for (const auto& r : outcome.report) {
      rows.push_back({{"arch", r.arch},
                      {"cache_accuracy", r.accuracy},
                      {"c1", r.c1},
                      {"converged", r.converged},
                      {"selected", r.selected}});
    }
    report["layers"][cand.node] = rows;

    if (outcome.best) {
      const auto& arch = outcome.best->model.arch;
      json aj;
      aj["ordinal"] = cand.ordinal;
      aj["convs"] = json::array();
      for (const auto& c : arch.convs) {
        aj["convs"].push_back(
            {{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}});
      }
      aj["dense_widths"] = arch.dense_widths;
      aj["search_accuracy"] = outcome.best->model.val_cache_accuracy;
      selected["layers"][cand.node] = aj;
    } else {
      selected["discarded"].push_back(cand.node);
    }
  }
  write_json(lay.search_report(), report);
  write_json(lay.selected_archs(), selected);
}

void run_train_caches(const pipeline_config& cfg) {
  const layout lay(cfg);
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  const auto cands = load_candidates(lay);
  require_artifact(lay.selected_archs(), "search");
  const json selected = read_json(lay.selected_archs());

  const std::string hash_before = graph.content_hash();
  std::filesystem::create_directories(lay.root / "caches");
  json histories = json::object();
  for (const auto& cand : cands.list) {
    if (!selected.at("layers").contains(cand.node)) continue;
    const auto& aj = selected["layers"][cand.node];
    cache_architecture arch;
    for (const auto& cj : aj.at("convs")) {
      arch.convs.push_back({cj.at("channels").get<std::size_t>(),
                            cj.at("kernel").get<std::size_t>(),
                            cj.at("stride").get<std::size_t>()});
    }
    arch.dense_widths = aj.at("dense_widths").get<std::vector<std::size_t>>();

    const medial_dataset md = load_medial_checked(lay, cand.node, graph);
    train_config tc = cfg.full_train;
    tc.seed = mix_seed(cfg.full_train.seed, cand.ordinal);
    trained_cache tc_out = train_cache(arch, md, cand, tc);
    tc_out.model.save(lay.cache(cand.node));
    histories[cand.node] = {{"train_loss", tc_out.history.train_loss},
                            {"val_loss", tc_out.history.val_loss},
                            {"best_epoch", tc_out.history.best_epoch},
                            {"epochs_run", tc_out.history.epochs_run}};
  }
  if (graph.content_hash() != hash_before) {
    throw error("backbone weights changed during cache training; freeze contract broken");
  }
  write_json(lay.histories(), histories);
}

namespace {

// caches on disk in ascending ordinal order
std::vector<cache_model> load_built_caches(const layout& lay, const json& selected) {
  std::vector<cache_model> caches;
  for (const auto& [layer, aj] : selected.at("layers").items()) {
    (void)aj;
    require_artifact(lay.cache(layer), "train-caches");
    caches.push_back(cache_model::load(lay.cache(layer)));
  }
  std::sort(caches.begin(), caches.end(),
            [](const cache_model& a, const cache_model& b) { return a.ordinal < b.ordinal; });
  return caches;
}

}  // namespace

void run_calibrate(const pipeline_config& cfg) {
  const layout lay(cfg);
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  require_artifact(lay.selected_archs(), "search");
  const json selected = read_json(lay.selected_archs());
  auto caches = load_built_caches(lay, selected);

  for (auto& cache : caches) {
    const medial_dataset md = load_medial_checked(lay, cache.target_layer, graph);
    const medial_dataset val = md.view(split_kind::val);

    cache.temperature = 1.0f;  // re-calibration starts from scratch
    const double pre_ece = cache_ece(cache, val);
    calibrate_cache(cache, val);
    const double post_ece = cache_ece(cache, val);
    const threshold_report rep = assign_cache_threshold(cache, val, cfg.tolerance);
    cache.save(lay.cache(cache.target_layer));

    json j;
    j["layer"] = cache.target_layer;
    j["ordinal"] = cache.ordinal;
    j["temperature"] = cache.temperature;
    j["pre_ece"] = pre_ece;
    j["post_ece"] = post_ece;
    j["tolerance"] = rep.tolerance;
    j["budget"] = rep.budget;
    j["assigned_theta"] = rep.assigned;
    j["grid"] = json::array();
    std::ostringstream csv;
    csv << "theta,hit_rate,cache_accuracy,bound\n";
    for (std::size_t i = 0; i < rep.grid.size(); ++i) {
      j["grid"].push_back({{"theta", rep.grid[i]},
                           {"hit_rate", rep.hit_rate[i]},
                           {"cache_accuracy", rep.accuracy[i]},
                           {"bound", rep.bound[i]}});
      csv << rep.grid[i] << "," << rep.hit_rate[i] << "," << rep.accuracy[i] << ","
          << rep.bound[i] << "\n";
    }
    write_json(lay.calib(cache.target_layer), j);
    write_text(lay.calib_csv(cache.target_layer), csv.str());
  }
}

void run_optimize(const pipeline_config& cfg) {
  const layout lay(cfg);
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  require_artifact(lay.selected_archs(), "search");
  const json selected = read_json(lay.selected_archs());
  auto caches = load_built_caches(lay, selected);

  std::vector<medial_dataset> vals;
  for (const auto& cache : caches) {
    require_artifact(lay.calib(cache.target_layer), "calibrate");
    vals.push_back(load_medial_checked(lay, cache.target_layer, graph).view(split_kind::val));
  }

  json choice;
  choice["backbone_hash"] = graph.content_hash();
  if (caches.empty()) {
    choice["ordinals"] = json::array();
    choice["layers"] = json::array();
    choice["score"] = 0;
    write_json(lay.subset_choice(), choice);
    write_text(lay.score_table(), "mask,subset,hits,misses,score\n");
  } else {
    const val_record rec = record_val_predictions(caches, vals);
    const optimize_result res = optimize(rec);

    std::ostringstream csv;
    csv << "mask,subset,hits,misses,score\n";
    auto join = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ';';
        s += std::to_string(v[i]);
      }
      return s;
    };
    for (const auto& row : res.table) {
      csv << row.mask << "," << join(row.subset) << "," << join(row.hit_counts) << ","
          << join(row.miss_counts) << "," << row.score << "\n";
    }
    write_text(lay.score_table(), csv.str());

    json layers = json::array();
    for (std::size_t o : res.best) {
      for (const auto& c : caches) {
        if (c.ordinal == o) layers.push_back(c.target_layer);
      }
    }
    choice["ordinals"] = res.best;
    choice["layers"] = layers;
    choice["score"] = res.best_score;
    write_json(lay.subset_choice(), choice);
  }

  maintenance_state st = maintenance_state::load(lay.state());
  st.last_build_count = st.current_count;
  st.last_build_hash = graph.content_hash();
  st.save(lay.state());
}

cache_enabled_model load_enabled_model(const pipeline_config& cfg) {
  const layout lay(cfg);
  backbone_graph graph = backbone_graph::load(cfg.backbone);
  require_artifact(lay.subset_choice(), "optimize");
  const json choice = read_json(lay.subset_choice());
  std::vector<cache_model> enabled;
  for (const auto& layer : choice.at("layers")) {
    enabled.push_back(cache_model::load(lay.cache(layer.get<std::string>())));
  }
  return cache_enabled_model(std::move(graph), std::move(enabled), cfg.tolerance);
}

evaluation_report run_evaluate(const pipeline_config& cfg) {
  const layout lay(cfg);
  cache_enabled_model model = load_enabled_model(cfg);
  sample_set stream = sample_set::load(cfg.stream);
  if (!stream.has_labels()) {
    throw data_error("evaluation needs ground-truth labels; stream file has none");
  }

  // evaluate on the held-out test split, which is shared across layers
  const auto cands = load_candidates(lay);
  sample_set test = stream;
  if (!cands.list.empty()) {
    const medial_dataset md =
        medial_dataset::load(lay.medial(cands.list.front().node));
    if (md.split_assigned && md.size() == stream.size()) {
      test = stream.subset(md.split_indices(split_kind::test));
    }
  }

  const evaluation_report rep = evaluate(model, test, cfg.latency);
  write_text(lay.eval_dir() / "report.txt", rep.text());
  write_json(lay.eval_dir() / "report.json", rep.to_json());
  write_text(lay.eval_dir() / "exits.csv", rep.csv());
  return rep;
}

std::string run_report(const pipeline_config& cfg) {
  const layout lay(cfg);
  std::ostringstream os;
  const backbone_graph graph = backbone_graph::load(cfg.backbone);
  os << "backbone: " << cfg.backbone.string() << "\n";
  os << "  nodes: " << graph.nodes().size() << ", classes: " << graph.num_classes()
     << ", flops/sample: " << graph.total_flops() << "\n";
  os << "  hash: " << graph.content_hash() << "\n";

  auto mark = [](bool present) { return present ? "done" : "pending"; };
  const bool have_cands = std::filesystem::exists(lay.candidates());
  os << "stages:\n";
  os << "  candidates:   " << mark(have_cands) << "\n";
  bool have_medial = false;
  if (have_cands) {
    const auto cands = load_candidates(lay);
    have_medial = !cands.list.empty();
    for (const auto& c : cands.list) {
      have_medial = have_medial && std::filesystem::exists(lay.medial(c.node));
    }
    os << "  collect:      " << mark(have_medial) << "\n";
    os << "  search:       " << mark(std::filesystem::exists(lay.selected_archs())) << "\n";
    bool have_caches = std::filesystem::exists(lay.selected_archs());
    bool have_calib = have_caches;
    if (have_caches) {
      const json selected = read_json(lay.selected_archs());
      for (const auto& [layer, aj] : selected.at("layers").items()) {
        (void)aj;
        have_caches = have_caches && std::filesystem::exists(lay.cache(layer));
        have_calib = have_calib && std::filesystem::exists(lay.calib(layer));
      }
    }
    os << "  train-caches: " << mark(have_caches) << "\n";
    os << "  calibrate:    " << mark(have_calib) << "\n";
    os << "  optimize:     " << mark(std::filesystem::exists(lay.subset_choice())) << "\n";
    os << "  evaluate:     "
       << mark(std::filesystem::exists(lay.eval_dir() / "report.json")) << "\n";
  }

  if (std::filesystem::exists(lay.candidates())) {
    const auto cands = load_candidates(lay);
    os << "candidates:\n";
    for (const auto& c : cands.list) {
      os << "  #" << c.ordinal << " " << c.node << " tap " << tensor::shape_str(c.tap_shape)
         << " fallback-flops " << c.fallback_flops << "\n";
    }
  }
  if (std::filesystem::exists(lay.subset_choice())) {
    const json choice = read_json(lay.subset_choice());
    os << "enabled subset: " << choice.at("layers").dump()
       << " (score " << choice.at("score").dump() << ")\n";
  }
  if (std::filesystem::exists(lay.eval_dir() / "report.json")) {
    const json ev = read_json(lay.eval_dir() / "report.json");
    os << "last evaluation: base acc " << ev.at("base_accuracy").dump() << ", cache-enabled acc "
       << ev.at("cache_enabled_accuracy").dump() << ", flops reduction "
       << ev.at("flops").at("reduction").dump() << "\n";
  }

  const maintenance_state st = maintenance_state::load(lay.state());
  const auto trig = check_retrain_trigger(st, graph.content_hash(), cfg.drift_fraction);
  os << "maintenance: collected " << st.current_count << ", last build "
     << st.last_build_count << ", trigger: " << trigger_name(trig) << "\n";
  return os.str();
}

}  // namespace layercache
