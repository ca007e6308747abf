#include "layercache/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "layercache/calibration.hpp"
#include "layercache/errors.hpp"

namespace layercache {

using nlohmann::json;

namespace {

std::int64_t now_us() {
  return std::chrono::duration_cast<std::chrono::microseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

}  // namespace

cache_enabled_model::cache_enabled_model(backbone_graph graph,
                                         std::vector<cache_model> enabled,
                                         double tolerance)
    : graph_(std::move(graph)), caches_(std::move(enabled)), tolerance_(tolerance) {
  std::sort(caches_.begin(), caches_.end(),
            [](const cache_model& a, const cache_model& b) { return a.ordinal < b.ordinal; });
  std::uint64_t c1_prefix = 0;
  for (std::size_t i = 0; i < caches_.size(); ++i) {
    const auto& c = caches_[i];
    if (i > 0 && caches_[i - 1].ordinal == c.ordinal) {
      throw precondition_error("two caches share ordinal " + std::to_string(c.ordinal));
    }
    if (!graph_.has_node(c.target_layer) || c.num_classes != graph_.num_classes() ||
        graph_.node_shape(c.target_layer) != c.tap_shape ||
        !graph_.dominates_output(c.target_layer)) {
      throw precondition_error("cache target '" + c.target_layer +
                               "' is not a valid candidate of this backbone");
    }
    if (!cache_by_node_.emplace(c.target_layer, i).second) {
      throw precondition_error("two caches target layer '" + c.target_layer + "'");
    }
    c1_prefix += c.own_flops;
    early_flops_.push_back(graph_.cumulative_flops(c.target_layer) + c1_prefix);
  }
  // ordinal order must agree with topological order or the walk is ill-defined
  for (std::size_t i = 1; i < caches_.size(); ++i) {
    const auto pos = [&](const std::string& n) {
      const auto& topo = graph_.topo_order();
      return std::find(topo.begin(), topo.end(), graph_.node_index(n)) - topo.begin();
    };
    if (pos(caches_[i - 1].target_layer) >= pos(caches_[i].target_layer)) {
      throw precondition_error("cache ordinals disagree with topological order");
    }
  }
}

std::uint64_t cache_enabled_model::final_path_flops() const {
  std::uint64_t f = graph_.total_flops();
  for (const auto& c : caches_) f += c.own_flops;
  return f;
}

std::uint64_t cache_enabled_model::early_path_flops(std::size_t idx) const {
  return early_flops_.at(idx);
}

std::vector<exit_record> cache_enabled_model::infer_batch(const sample_set& batch,
                                                          const resolve_fn& resolve) const {
  return infer_batch(batch.inputs, batch.ids, resolve);
}

std::vector<exit_record> cache_enabled_model::infer_batch(const tensor& inputs,
                                                          const std::vector<std::string>& ids,
                                                          const resolve_fn& resolve) const {
  const std::size_t n = inputs.rows();
  if (n == 0) throw precondition_error("infer_batch: empty batch");
  if (ids.size() != n) throw precondition_error("infer_batch: id count mismatch");
  if (inputs.sample_shape() != graph_.input_shape()) {
    throw shape_error("batch sample shape " + tensor::shape_str(inputs.sample_shape()) +
                      " does not match backbone input " +
                      tensor::shape_str(graph_.input_shape()));
  }

  std::vector<exit_record> records;
  records.reserve(n);
  auto emit = [&](exit_record rec) {
    if (resolve) {
      try {
        resolve(rec);
      } catch (const std::exception& e) {
        throw error("resolve callback failed for sample '" + rec.sample_id +
                    "': " + e.what());
      }
    }
    records.push_back(std::move(rec));
  };

  const auto& nodes = graph_.nodes();
  const auto& preds = graph_.preds();
  std::vector<tensor> acts(nodes.size());
  std::vector<char> computed(nodes.size(), 0);
  std::vector<std::string> live_ids = ids;

  for (std::size_t topo_pos = 0; topo_pos < graph_.topo_order().size(); ++topo_pos) {
    const std::size_t i = graph_.topo_order()[topo_pos];
    tensor in;
    if (preds[i].empty()) {
      in = inputs;
    } else if (preds[i].size() == 1) {
      in = acts[preds[i][0]];
    } else {
      in = acts[preds[i][0]];
      for (std::size_t p = 1; p < preds[i].size(); ++p) {
        const tensor& other = acts[preds[i][p]];
        for (std::size_t v = 0; v < in.size(); ++v) in[v] += other[v];
      }
    }
    acts[i] = forward(nodes[i].spec, nodes[i].params, in);
    computed[i] = 1;

    const auto cit = cache_by_node_.find(nodes[i].name);
    if (cit == cache_by_node_.end()) continue;
    const std::size_t ci = cit->second;
    const cache_model& cache = caches_[ci];
    if (threshold_is_disabled(cache.threshold)) continue;

    const auto preds_out = cache.predict(acts[i]);
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < live_ids.size(); ++r) {
      if (preds_out.confidence[r] >= cache.threshold) {
        exit_record rec;
        rec.sample_id = live_ids[r];
        rec.early = true;
        rec.exit_ordinal = cache.ordinal;
        rec.predicted = preds_out.classes[r];
        rec.confidence = preds_out.confidence[r];
        rec.path_flops = early_flops_[ci];
        rec.timestamp_us = now_us();
        emit(std::move(rec));
      } else {
        keep.push_back(r);
      }
    }
    if (keep.size() == live_ids.size()) continue;
    if (keep.empty()) return records;  // whole batch resolved early

    // shrink every live activation to the surviving rows; all of them sit on
    // paths through this dominator, so row alignment is preserved
    std::vector<std::string> next_ids;
    next_ids.reserve(keep.size());
    for (std::size_t r : keep) next_ids.push_back(std::move(live_ids[r]));
    live_ids = std::move(next_ids);
    for (std::size_t nidx = 0; nidx < nodes.size(); ++nidx) {
      if (computed[nidx]) acts[nidx] = acts[nidx].select_rows(keep);
    }
  }

  const tensor& pd = acts[graph_.node_index(graph_.output_node())];
  const std::uint64_t final_flops = final_path_flops();
  for (std::size_t r = 0; r < live_ids.size(); ++r) {
    const float* row = pd.row(r);
    std::size_t best = 0;
    for (std::size_t k = 1; k < pd.row_size(); ++k) {
      if (row[k] > row[best]) best = k;
    }
    exit_record rec;
    rec.sample_id = live_ids[r];
    rec.early = false;
    rec.predicted = static_cast<std::int32_t>(best);
    rec.confidence = row[best];
    rec.path_flops = final_flops;
    rec.timestamp_us = now_us();
    emit(std::move(rec));
  }
  return records;
}

void cache_enabled_model::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir / "caches");
  graph_.save(dir / "backbone.json");
  json j;
  j["format"] = "layercache-model/1";
  j["tolerance"] = tolerance_;
  j["caches"] = json::array();
  for (const auto& c : caches_) {
    c.save(dir / "caches" / (c.target_layer + ".json"));
    j["caches"].push_back(c.target_layer);
  }
  std::ofstream f(dir / "model.json");
  if (!f) throw error("cannot write " + (dir / "model.json").string());
  f << j.dump(2) << "\n";
}

cache_enabled_model cache_enabled_model::load(const std::filesystem::path& dir) {
  std::ifstream f(dir / "model.json");
  if (!f) throw missing_blob_error("cannot open " + (dir / "model.json").string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw parse_error((dir / "model.json").string() + ": " + e.what());
  }
  backbone_graph g = backbone_graph::load(dir / "backbone.json");
  std::vector<cache_model> caches;
  for (const auto& name : j.at("caches")) {
    caches.push_back(cache_model::load(dir / "caches" / (name.get<std::string>() + ".json")));
  }
  return cache_enabled_model(std::move(g), std::move(caches), j.at("tolerance").get<double>());
}

flops_summary average_flops(const cache_enabled_model& model, const sample_set& data) {
  if (data.size() == 0) throw precondition_error("average_flops: empty dataset");
  const auto records = model.infer_batch(data.inputs, data.ids);
  flops_summary s;
  s.base_total = model.graph().total_flops() * data.size();
  for (const auto& r : records) s.cache_total += r.path_flops;
  s.base_avg = static_cast<double>(s.base_total) / static_cast<double>(data.size());
  s.cache_avg = static_cast<double>(s.cache_total) / static_cast<double>(data.size());
  s.reduction = 1.0 - s.cache_avg / s.base_avg;
  return s;
}

evaluation_report evaluate(const cache_enabled_model& model, const sample_set& labeled,
                           const latency_options& lat) {
  const std::size_t n = labeled.size();
  if (n == 0) throw precondition_error("evaluate: empty dataset");
  if (!labeled.has_labels()) throw precondition_error("evaluate: dataset has no labels");

  evaluation_report rep;
  rep.samples = n;

  // plain backbone predictions double as the base-accuracy run
  const tensor base_pd = model.graph().forward(labeled.inputs);
  const auto base_cls = argmax_rows(base_pd);
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < n; ++i) pos[labeled.ids[i]] = i;

  const auto records = model.infer_batch(labeled.inputs, labeled.ids);

  std::size_t base_ok = 0, cache_ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (base_cls[i] == labeled.labels[i]) ++base_ok;
  }

  // bucket exit records per enabled cache, final exit last
  const auto& caches = model.caches();
  std::vector<std::vector<const exit_record*>> per_exit(caches.size());
  std::vector<const exit_record*> final_records;
  for (const auto& r : records) {
    if (r.predicted == labeled.labels[pos.at(r.sample_id)]) ++cache_ok;
    if (r.early) {
      std::size_t idx = caches.size();
      for (std::size_t c = 0; c < caches.size(); ++c) {
        if (caches[c].ordinal == r.exit_ordinal) idx = c;
      }
      per_exit.at(idx).push_back(&r);
    } else {
      final_records.push_back(&r);
    }
  }

  std::size_t reached = n;
  std::size_t early_hits = 0;
  for (std::size_t c = 0; c < caches.size(); ++c) {
    exit_stats st;
    st.ordinal = caches[c].ordinal;
    st.layer = caches[c].target_layer;
    st.reached = reached;
    st.hits = per_exit[c].size();
    st.hit_rate = reached == 0 ? 0.0
                               : static_cast<double>(st.hits) / static_cast<double>(reached);
    std::size_t agree = 0, gt = 0, fixes = 0, breaks = 0;
    for (const auto* r : per_exit[c]) {
      const std::size_t i = pos.at(r->sample_id);
      const bool b_ok = base_cls[i] == labeled.labels[i];
      const bool c_ok = r->predicted == labeled.labels[i];
      if (r->predicted == base_cls[i]) ++agree;
      if (c_ok) ++gt;
      if (c_ok && !b_ok) ++fixes;
      if (!c_ok && b_ok) ++breaks;
    }
    if (st.hits > 0) {
      st.cache_accuracy = static_cast<double>(agree) / static_cast<double>(st.hits);
      st.gt_accuracy = static_cast<double>(gt) / static_cast<double>(st.hits);
    }
    st.effect = (static_cast<double>(fixes) - static_cast<double>(breaks)) /
                static_cast<double>(n);
    rep.exits.push_back(st);
    reached -= st.hits;
    early_hits += st.hits;
  }

  rep.final_exit.reached = reached;
  rep.final_exit.hits = final_records.size();
  rep.final_exit.hit_rate =
      reached == 0 ? 0.0
                   : static_cast<double>(final_records.size()) / static_cast<double>(reached);
  {
    std::size_t gt = 0;
    for (const auto* r : final_records) {
      if (r->predicted == labeled.labels[pos.at(r->sample_id)]) ++gt;
    }
    if (!final_records.empty()) {
      rep.final_exit.gt_accuracy =
          static_cast<double>(gt) / static_cast<double>(final_records.size());
      rep.final_exit.cache_accuracy = 1.0;  // the final exit is the backbone
    }
  }

  rep.base_accuracy = static_cast<double>(base_ok) / static_cast<double>(n);
  rep.cache_enabled_accuracy = static_cast<double>(cache_ok) / static_cast<double>(n);
  rep.overall_hit_rate = static_cast<double>(early_hits) / static_cast<double>(n);
  rep.flops = average_flops(model, labeled);

  if (lat.measure) {
    const std::size_t bs = std::min(lat.batch == 0 ? n : lat.batch, n);
    std::vector<std::size_t> idx(bs);
    std::iota(idx.begin(), idx.end(), 0);
    const sample_set probe = labeled.subset(idx);
    rep.latency_batch = bs;
    auto time_runs = [&](auto&& fn) {
      double total = 0.0;
      for (std::size_t r = 0; r < lat.repetitions + lat.warmup; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        if (r >= lat.warmup) {
          total += std::chrono::duration<double, std::milli>(t1 - t0).count();
        }
      }
      return total / static_cast<double>(lat.repetitions);
    };
    rep.latency_base_ms = time_runs([&] { model.graph().forward(probe.inputs); });
    rep.latency_cache_ms = time_runs([&] { model.infer_batch(probe); });
  }
  return rep;
}

std::string evaluation_report::text() const {
  std::ostringstream os;
  os << "samples: " << samples << "\n";
  os << "base accuracy:          " << base_accuracy << "\n";
  os << "cache-enabled accuracy: " << cache_enabled_accuracy << "\n";
  os << "overall hit rate:       " << overall_hit_rate << "\n";
  os << "avg flops (base):       " << flops.base_avg << "\n";
  os << "avg flops (cached):     " << flops.cache_avg << "\n";
  os << "flops reduction:        " << flops.reduction * 100.0 << "%\n";
  if (latency_batch > 0) {
    os << "latency/batch[" << latency_batch << "] base:   " << latency_base_ms << " ms\n";
    os << "latency/batch[" << latency_batch << "] cached: " << latency_cache_ms << " ms\n";
  }
  os << "exit  layer            reached  hits  hit-rate  cache-acc  gt-acc  effect\n";
  auto row = [&os](const exit_stats& e, const std::string& name) {
    os << "  " << e.ordinal << "   " << name;
    for (std::size_t p = name.size(); p < 17; ++p) os << ' ';
    os << e.reached << "  " << e.hits << "  " << e.hit_rate << "  " << e.cache_accuracy
       << "  " << e.gt_accuracy << "  " << e.effect << "\n";
  };
  for (const auto& e : exits) row(e, e.layer);
  row(final_exit, "(final)");
  return os.str();
}

json evaluation_report::to_json() const {
  json j;
  j["samples"] = samples;
  j["base_accuracy"] = base_accuracy;
  j["cache_enabled_accuracy"] = cache_enabled_accuracy;
  j["overall_hit_rate"] = overall_hit_rate;
  j["flops"] = {{"base_total", flops.base_total},
                {"cache_total", flops.cache_total},
                {"base_avg", flops.base_avg},
                {"cache_avg", flops.cache_avg},
                {"reduction", flops.reduction}};
  auto exit_j = [](const exit_stats& e) {
    return json{{"ordinal", e.ordinal},     {"layer", e.layer},
                {"reached", e.reached},     {"hits", e.hits},
                {"hit_rate", e.hit_rate},   {"cache_accuracy", e.cache_accuracy},
                {"gt_accuracy", e.gt_accuracy}, {"effect", e.effect}};
  };
  j["exits"] = json::array();
  for (const auto& e : exits) j["exits"].push_back(exit_j(e));
  j["final_exit"] = exit_j(final_exit);
  if (latency_batch > 0) {
    j["latency"] = {{"batch", latency_batch},
                    {"base_ms", latency_base_ms},
                    {"cache_ms", latency_cache_ms}};
  }
  return j;
}

std::string evaluation_report::csv() const {
  std::ostringstream os;
  os << "ordinal,layer,reached,hits,hit_rate,cache_accuracy,gt_accuracy,effect\n";
  auto row = [&os](const exit_stats& e, const std::string& name) {
    os << e.ordinal << "," << name << "," << e.reached << "," << e.hits << ","
       << e.hit_rate << "," << e.cache_accuracy << "," << e.gt_accuracy << ","
       << e.effect << "\n";
  };
  for (const auto& e : exits) row(e, e.layer);
  row(final_exit, "final");
  return os.str();
}

}  // namespace layercache
