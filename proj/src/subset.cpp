#include "layercache/subset.hpp"

#include <algorithm>

#include "layercache/engine.hpp"
#include "layercache/errors.hpp"

namespace layercache {

std::size_t val_record::index_of(std::size_t ordinal) const {
  for (std::size_t i = 0; i < ordinals.size(); ++i) {
    if (ordinals[i] == ordinal) return i;
  }
  throw precondition_error("no recorded cache with ordinal " + std::to_string(ordinal));
}

val_record record_val_predictions(const std::vector<cache_model>& caches,
                                  const std::vector<medial_dataset>& val_splits) {
  if (caches.empty() || caches.size() != val_splits.size()) {
    throw precondition_error("record_val_predictions: need one val split per cache");
  }
  std::vector<std::size_t> order(caches.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return caches[a].ordinal < caches[b].ordinal;
  });

  val_record rec;
  rec.sample_ids = val_splits[order[0]].ids;
  for (std::size_t oi : order) {
    const cache_model& c = caches[oi];
    const medial_dataset& md = val_splits[oi];
    if (md.layer != c.target_layer) {
      throw precondition_error("val split for layer '" + md.layer +
                               "' paired with cache for '" + c.target_layer + "'");
    }
    if (md.ids != rec.sample_ids) {
      throw precondition_error("sample ids disagree across layers at '" + md.layer + "'");
    }
    const auto preds = c.predict(md.activations);
    rec.ordinals.push_back(c.ordinal);
    rec.thresholds.push_back(c.threshold);
    rec.c1.push_back(c.own_flops);
    rec.c2.push_back(c.fallback_flops);
    rec.confidence.push_back(preds.confidence);
    rec.predicted.push_back(preds.classes);
  }
  return rec;
}

replay_lists replay_subset(const val_record& rec, const std::vector<std::size_t>& subset) {
  std::vector<std::size_t> members;
  for (std::size_t o : subset) members.push_back(rec.index_of(o));
  std::sort(members.begin(), members.end());

  replay_lists out;
  out.hits.resize(members.size());
  out.misses.resize(members.size());
  std::vector<std::uint32_t> alive(rec.num_samples());
  for (std::uint32_t i = 0; i < alive.size(); ++i) alive[i] = i;

  for (std::size_t m = 0; m < members.size(); ++m) {
    const std::size_t ci = members[m];
    std::vector<std::uint32_t> next;
    for (std::uint32_t s : alive) {
      if (rec.confidence[ci][s] >= rec.thresholds[ci]) {
        out.hits[m].push_back(s);
      } else {
        out.misses[m].push_back(s);
        next.push_back(s);
      }
    }
    alive = std::move(next);
  }
  return out;
}

std::int64_t score_subset(const replay_lists& lists, const std::vector<std::uint64_t>& c1,
                          const std::vector<std::uint64_t>& c2) {
  if (lists.hits.size() != c1.size() || c1.size() != c2.size()) {
    throw precondition_error("score_subset: list/cost arity mismatch");
  }
  std::int64_t k = 0;
  for (std::size_t m = 0; m < c1.size(); ++m) {
    const auto h = static_cast<std::int64_t>(lists.hits[m].size());
    const auto mi = static_cast<std::int64_t>(lists.misses[m].size());
    k += h * (static_cast<std::int64_t>(c2[m]) - static_cast<std::int64_t>(c1[m])) -
         mi * static_cast<std::int64_t>(c1[m]);
  }
  return k;
}

optimize_result optimize(const val_record& rec) {
  const std::size_t n = rec.num_caches();
  if (n > 20) {
    throw precondition_error("optimize: exhaustive search capped at 20 caches, got " +
                             std::to_string(n));
  }
  optimize_result res;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    subset_score_row row;
    row.mask = mask;
    std::vector<std::uint64_t> c1, c2;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask & (1u << i)) {
        row.subset.push_back(rec.ordinals[i]);
        c1.push_back(rec.c1[i]);
        c2.push_back(rec.c2[i]);
      }
    }
    const auto lists = replay_subset(rec, row.subset);
    for (std::size_t m = 0; m < row.subset.size(); ++m) {
      row.hit_counts.push_back(lists.hits[m].size());
      row.miss_counts.push_back(lists.misses[m].size());
    }
    row.score = score_subset(lists, c1, c2);

    const bool better =
        res.table.empty() || row.score > res.best_score ||
        (row.score == res.best_score &&
         (row.subset.size() < res.best.size() ||
          (row.subset.size() == res.best.size() && row.subset < res.best)));
    if (better) {
      res.best = row.subset;
      res.best_score = row.score;
    }
    res.table.push_back(std::move(row));
  }
  return res;
}

std::vector<std::size_t> oracle_optimize(const backbone_graph& graph,
                                         const std::vector<cache_model>& caches,
                                         const sample_set& val_inputs,
                                         std::int64_t* best_score_out) {
  const std::size_t n = caches.size();
  if (n > 12) throw precondition_error("oracle_optimize is for desk-scale fixtures only");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return caches[a].ordinal < caches[b].ordinal;
  });

  std::vector<std::size_t> best;
  std::int64_t best_score = 0;
  bool have_best = false;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    std::vector<cache_model> enabled;
    std::vector<std::size_t> subset;
    for (std::size_t i : order) {
      if (mask & (1u << i)) {
        enabled.push_back(caches[i]);
        subset.push_back(caches[i].ordinal);
      }
    }
    const cache_enabled_model model(graph, enabled, 0.0);
    const auto records = model.infer_batch(val_inputs.inputs, val_inputs.ids);
    // K = flops saved vs the plain backbone, summed over samples
    const std::int64_t base =
        static_cast<std::int64_t>(graph.total_flops()) *
        static_cast<std::int64_t>(val_inputs.size());
    std::int64_t spent = 0;
    for (const auto& r : records) spent += static_cast<std::int64_t>(r.path_flops);
    const std::int64_t k = base - spent;

    const bool better = !have_best || k > best_score ||
                        (k == best_score && (subset.size() < best.size() ||
                                             (subset.size() == best.size() && subset < best)));
    if (better) {
      best = subset;
      best_score = k;
      have_best = true;
    }
  }
  if (best_score_out) *best_score_out = best_score;
  return best;
}

}  // namespace layercache
