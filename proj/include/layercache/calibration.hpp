#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "layercache/cache_builder.hpp"
#include "layercache/medial.hpp"

namespace layercache {

// argmax per row; ties go to the lowest index
std::vector<std::int32_t> argmax_rows(const tensor& rows);

// mean negative log-likelihood of labels under softmax(logits / t)
double scaled_nll(const tensor& logits, const std::vector<std::int32_t>& labels, double t);

// nll-minimizing temperature on [0.05, 20] by golden-section search; the
// result never beats t=1 by accident only: whichever of the two scores the
// lower nll wins
float fit_temperature(const tensor& logits, const std::vector<std::int32_t>& labels);

// max of softmax(logits / t) per row
std::vector<float> scaled_confidences(const tensor& logits, double t);

// standard equal-width-binned expected calibration error
double expected_calibration_error(const std::vector<float>& confidence,
                                  const std::vector<bool>& correct, std::size_t bins = 15);

struct threshold_report {
  std::string layer;
  std::size_t ordinal = 0;
  std::vector<float> grid;        // 0.00 .. 1.00 step 0.01
  std::vector<double> hit_rate;   // fraction with confidence >= theta
  std::vector<double> accuracy;   // agreement with backbone among those
  std::vector<double> bound;      // hit_rate * (1 - accuracy)
  float assigned = disabled_threshold;
  double budget = 0.0;            // tolerance / 2^ordinal
  double tolerance = 0.0;
};

// smallest grid theta whose bound fits the budget t / 2^ordinal; the
// disabled sentinel when none does
threshold_report assign_threshold(const std::vector<float>& confidences,
                                  const std::vector<bool>& agrees, double tolerance,
                                  std::size_t ordinal);

// --- cache-model wrappers over the medial val split ---

// fits and stores the temperature; pseudo-labels are the backbone argmax
float calibrate_cache(cache_model& cache, const medial_dataset& md_val);

double cache_ece(const cache_model& cache, const medial_dataset& md_val,
                 std::size_t bins = 15);

// assigns and stores the threshold plus the hit-rate curve
threshold_report assign_cache_threshold(cache_model& cache, const medial_dataset& md_val,
                                        double tolerance);

// ground-truth bookkeeping for one cache at one threshold (evaluation only)
struct accuracy_effect {
  // hits partitioned by (backbone correct?, cache correct?, agreement)
  std::size_t both_correct = 0;        // backbone right, cache right
  std::size_t agree_wrong = 0;         // both wrong, same class
  std::size_t backbone_only = 0;       // backbone right, cache wrong (hurts)
  std::size_t cache_only = 0;          // cache right, backbone wrong (helps)
  std::size_t disagree_wrong = 0;      // both wrong, different classes
  std::size_t hits = 0;
  std::size_t total = 0;
  double effect = 0.0;  // (cache_only - backbone_only) / total
};

accuracy_effect actual_accuracy_effect(const std::vector<std::int32_t>& cache_classes,
                                       const std::vector<float>& cache_confidence,
                                       const std::vector<std::int32_t>& backbone_classes,
                                       const std::vector<std::int32_t>& labels, float theta);

}  // namespace layercache
