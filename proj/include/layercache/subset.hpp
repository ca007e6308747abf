#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layercache/cache_builder.hpp"
#include "layercache/medial.hpp"

namespace layercache {

// recorded per-cache validation predictions; replaying these answers every
// "which subset is best" question without re-running any model
struct val_record {
  std::vector<std::string> sample_ids;      // shared order across caches
  std::vector<std::size_t> ordinals;        // ascending
  std::vector<float> thresholds;            // aligned with ordinals
  std::vector<std::uint64_t> c1, c2;        // aligned costs
  // [cache][sample] confidence; prediction classes are irrelevant to scoring
  std::vector<std::vector<float>> confidence;
  std::vector<std::vector<std::int32_t>> predicted;

  std::size_t num_caches() const { return ordinals.size(); }
  std::size_t num_samples() const { return sample_ids.size(); }
  std::size_t index_of(std::size_t ordinal) const;
};

// one pass per cache over its val split; caches must already carry their
// calibrated temperature and assigned threshold
val_record record_val_predictions(const std::vector<cache_model>& caches,
                                  const std::vector<medial_dataset>& val_splits);

struct replay_lists {
  // per subset member, ascending ordinal: indices into the sample order
  std::vector<std::vector<std::uint32_t>> hits, misses;
};

// walk caches in ascending ordinal; a sample hits the first cache whose
// confidence clears its threshold and stops participating afterwards
replay_lists replay_subset(const val_record& rec, const std::vector<std::size_t>& subset);

// exact integer score: sum over members of |H|*(c2-c1) - |M|*c1
std::int64_t score_subset(const replay_lists& lists, const std::vector<std::uint64_t>& c1,
                          const std::vector<std::uint64_t>& c2);

struct subset_score_row {
  std::uint32_t mask = 0;                    // bit i = i-th recorded cache included
  std::vector<std::size_t> subset;           // ordinals
  std::vector<std::size_t> hit_counts, miss_counts;
  std::int64_t score = 0;
};

struct optimize_result {
  std::vector<std::size_t> best;  // ordinals; empty = run uncached
  std::int64_t best_score = 0;
  std::vector<subset_score_row> table;
};

// exhaustive enumeration of all subsets (guarded at 20 caches); ties prefer
// fewer caches, then the lexicographically smallest ordinal set
optimize_result optimize(const val_record& rec);

// brute-force alternative that actually runs the cache-enabled forward pass
// per subset; exists to cross-check replay_subset in tests
std::vector<std::size_t> oracle_optimize(const backbone_graph& graph,
                                         const std::vector<cache_model>& caches,
                                         const sample_set& val_inputs,
                                         std::int64_t* best_score = nullptr);

}  // namespace layercache
