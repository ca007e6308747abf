#include "layercache/calibration.hpp"

#include <algorithm>
#include <cmath>

#include "layercache/errors.hpp"

namespace layercache {

std::vector<std::int32_t> argmax_rows(const tensor& rows) {
  const std::size_t n = rows.rows(), k = rows.row_size();
  std::vector<std::int32_t> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const float* x = rows.row(r);
    std::size_t best = 0;
    for (std::size_t i = 1; i < k; ++i) {
      if (x[i] > x[best]) best = i;
    }
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

double scaled_nll(const tensor& logits, const std::vector<std::int32_t>& labels, double t) {
  const std::size_t n = logits.rows(), k = logits.row_size();
  if (labels.size() != n) throw precondition_error("scaled_nll: label count mismatch");
  if (n == 0) throw precondition_error("scaled_nll: empty batch");
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const float* x = logits.row(r);
    double mx = -1e300;
    for (std::size_t i = 0; i < k; ++i) mx = std::max(mx, static_cast<double>(x[i]) / t);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(x[i]) / t - mx);
    const double lse = mx + std::log(sum);
    total -= static_cast<double>(x[labels[r]]) / t - lse;
  }
  return total / static_cast<double>(n);
}

float fit_temperature(const tensor& logits, const std::vector<std::int32_t>& labels) {
  double lo = 0.05, hi = 20.0;
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = hi - gr * (hi - lo);
  double b = lo + gr * (hi - lo);
  double fa = scaled_nll(logits, labels, a);
  double fb = scaled_nll(logits, labels, b);
  for (int it = 0; it < 80 && hi - lo > 1e-5; ++it) {
    if (fa < fb) {
      hi = b;
      b = a;
      fb = fa;
      a = hi - gr * (hi - lo);
      fa = scaled_nll(logits, labels, a);
    } else {
      lo = a;
      a = b;
      fa = fb;
      b = lo + gr * (hi - lo);
      fb = scaled_nll(logits, labels, b);
    }
  }
  const double t_star = (lo + hi) / 2.0;
  // golden section assumes unimodality; guarantee we never regress past the
  // uncalibrated baseline
  if (scaled_nll(logits, labels, 1.0) <= scaled_nll(logits, labels, t_star)) {
    return 1.0f;
  }
  return static_cast<float>(t_star);
}

std::vector<float> scaled_confidences(const tensor& logits, double t) {
  const std::size_t n = logits.rows(), k = logits.row_size();
  std::vector<float> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const float* x = logits.row(r);
    double mx = -1e300;
    for (std::size_t i = 0; i < k; ++i) mx = std::max(mx, static_cast<double>(x[i]) / t);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += std::exp(static_cast<double>(x[i]) / t - mx);
    out[r] = static_cast<float>(1.0 / sum);
  }
  return out;
}

double expected_calibration_error(const std::vector<float>& confidence,
                                  const std::vector<bool>& correct, std::size_t bins) {
  if (bins == 0) throw precondition_error("ece: need at least one bin");
  if (confidence.size() != correct.size() || confidence.empty()) {
    throw precondition_error("ece: confidence/correct size mismatch or empty");
  }
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < confidence.size(); ++i) {
    std::size_t b = static_cast<std::size_t>(confidence[i] * static_cast<float>(bins));
    if (b >= bins) b = bins - 1;  // confidence 1.0 lands in the top bin
    conf_sum[b] += confidence[i];
    acc_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  double ece = 0.0;
  const double n = static_cast<double>(confidence.size());
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double c = static_cast<double>(count[b]);
    ece += (c / n) * std::abs(conf_sum[b] / c - acc_sum[b] / c);
  }
  return ece;
}

threshold_report assign_threshold(const std::vector<float>& confidences,
                                  const std::vector<bool>& agrees, double tolerance,
                                  std::size_t ordinal) {
  if (confidences.empty() || confidences.size() != agrees.size()) {
    throw precondition_error("assign_threshold: empty or mismatched inputs");
  }
  if (tolerance < 0.0 || tolerance >= 1.0) {
    throw precondition_error("assign_threshold: tolerance must be in [0, 1)");
  }
  threshold_report rep;
  rep.ordinal = ordinal;
  rep.tolerance = tolerance;
  rep.budget = tolerance / std::pow(2.0, static_cast<double>(ordinal));
  const double n = static_cast<double>(confidences.size());

  for (int step = 0; step <= 100; ++step) {
    const float theta = static_cast<float>(step) / 100.0f;
    std::size_t hit = 0, agree = 0;
    for (std::size_t i = 0; i < confidences.size(); ++i) {
      if (confidences[i] >= theta) {
        ++hit;
        if (agrees[i]) ++agree;
      }
    }
    const double hr = static_cast<double>(hit) / n;
    // no hits -> vacuous bound of zero
    const double ca = hit == 0 ? 1.0 : static_cast<double>(agree) / static_cast<double>(hit);
    rep.grid.push_back(theta);
    rep.hit_rate.push_back(hr);
    rep.accuracy.push_back(ca);
    rep.bound.push_back(hr * (1.0 - ca));
  }
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    if (rep.bound[i] <= rep.budget) {
      rep.assigned = rep.grid[i];
      break;
    }
  }
  return rep;
}

float calibrate_cache(cache_model& cache, const medial_dataset& md_val) {
  if (md_val.size() == 0) throw precondition_error("calibrate_cache: empty val split");
  const tensor lg = cache.logits(md_val.activations);
  const auto pseudo = argmax_rows(md_val.teachers);
  cache.temperature = fit_temperature(lg, pseudo);
  return cache.temperature;
}

double cache_ece(const cache_model& cache, const medial_dataset& md_val, std::size_t bins) {
  const tensor lg = cache.logits(md_val.activations);
  const auto pseudo = argmax_rows(md_val.teachers);
  const auto mine = argmax_rows(lg);
  const auto conf = scaled_confidences(lg, cache.temperature);
  std::vector<bool> correct(mine.size());
  for (std::size_t i = 0; i < mine.size(); ++i) correct[i] = mine[i] == pseudo[i];
  return expected_calibration_error(conf, correct, bins);
}

threshold_report assign_cache_threshold(cache_model& cache, const medial_dataset& md_val,
                                        double tolerance) {
  if (md_val.size() == 0) throw precondition_error("assign_cache_threshold: empty val split");
  const tensor lg = cache.logits(md_val.activations);
  const auto pseudo = argmax_rows(md_val.teachers);
  const auto mine = argmax_rows(lg);
  const auto conf = scaled_confidences(lg, cache.temperature);
  std::vector<bool> agrees(mine.size());
  for (std::size_t i = 0; i < mine.size(); ++i) agrees[i] = mine[i] == pseudo[i];

  threshold_report rep = assign_threshold(conf, agrees, tolerance, cache.ordinal);
  rep.layer = cache.target_layer;
  cache.threshold = rep.assigned;
  cache.hit_curve.clear();
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    cache.hit_curve.emplace_back(rep.grid[i], static_cast<float>(rep.hit_rate[i]));
  }
  return rep;
}

accuracy_effect actual_accuracy_effect(const std::vector<std::int32_t>& cache_classes,
                                       const std::vector<float>& cache_confidence,
                                       const std::vector<std::int32_t>& backbone_classes,
                                       const std::vector<std::int32_t>& labels, float theta) {
  const std::size_t n = labels.size();
  if (cache_classes.size() != n || cache_confidence.size() != n ||
      backbone_classes.size() != n) {
    throw precondition_error("actual_accuracy_effect: input sizes disagree");
  }
  if (n == 0) throw precondition_error("actual_accuracy_effect: empty evaluation set");
  accuracy_effect out;
  out.total = n;
  for (std::size_t i = 0; i < n; ++i) {
    if (cache_confidence[i] < theta) continue;
    ++out.hits;
    const bool b_ok = backbone_classes[i] == labels[i];
    const bool c_ok = cache_classes[i] == labels[i];
    if (b_ok && c_ok) {
      ++out.both_correct;
    } else if (b_ok) {
      ++out.backbone_only;
    } else if (c_ok) {
      ++out.cache_only;
    } else if (cache_classes[i] == backbone_classes[i]) {
      ++out.agree_wrong;
    } else {
      ++out.disagree_wrong;
    }
  }
  out.effect = (static_cast<double>(out.cache_only) - static_cast<double>(out.backbone_only)) /
               static_cast<double>(n);
  return out;
}

}  // namespace layercache
