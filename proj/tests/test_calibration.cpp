#include <doctest.h>

#include <cmath>
#include <vector>

#include "layercache/calibration.hpp"
#include "layercache/errors.hpp"
#include "support.hpp"

using namespace layercache;
using testsup::random_tensor;

TEST_CASE("argmax breaks ties toward the lowest index") {
  tensor t({2, 3});
  t.data()[0] = 1.0f; t.data()[1] = 3.0f; t.data()[2] = 3.0f;
  t.data()[3] = 5.0f; t.data()[4] = 2.0f; t.data()[5] = 5.0f;
  const auto cls = argmax_rows(t);
  CHECK(cls == std::vector<std::int32_t>{1, 0});
}

TEST_CASE("scaled nll matches a hand computation") {
  tensor logits({2, 2});
  logits.data()[0] = 2.0f; logits.data()[1] = 0.0f;
  logits.data()[2] = 1.0f; logits.data()[3] = 3.0f;
  const std::vector<std::int32_t> labels = {0, 0};

  auto nll_at = [&](double t) {
    const double p0 = 1.0 / (1.0 + std::exp(-(2.0 - 0.0) / t));   // row 0 label prob
    const double p1 = 1.0 / (1.0 + std::exp(-(1.0 - 3.0) / t));   // row 1 label prob
    return -(std::log(p0) + std::log(p1)) / 2.0;
  };
  CHECK(scaled_nll(logits, labels, 1.0) == doctest::Approx(nll_at(1.0)).epsilon(1e-6));
  CHECK(scaled_nll(logits, labels, 2.5) == doctest::Approx(nll_at(2.5)).epsilon(1e-6));
}

namespace {

// draw labels from the softmax of the logits themselves: perfectly calibrated
void calibrated_data(std::size_t n, std::size_t k, std::uint32_t seed, tensor& logits,
                     std::vector<std::int32_t>& labels) {
  rng gen(seed);
  logits = random_tensor({n, k}, gen, -2.0f, 2.0f);
  const tensor pd = forward(layer_spec::softmax(), {}, logits);
  labels.clear();
  for (std::size_t r = 0; r < n; ++r) {
    const float u = gen.next_float();
    float acc = 0.0f;
    std::int32_t pick = static_cast<std::int32_t>(k) - 1;
    for (std::size_t i = 0; i < k; ++i) {
      acc += pd.row(r)[i];
      if (u < acc) {
        pick = static_cast<std::int32_t>(i);
        break;
      }
    }
    labels.push_back(pick);
  }
}

}  // namespace

TEST_CASE("temperature fitting near-recovers already-calibrated data") {
  tensor logits;
  std::vector<std::int32_t> labels;
  calibrated_data(3000, 5, 77, logits, labels);
  const float t = fit_temperature(logits, labels);
  CHECK(t > 0.8f);
  CHECK(t < 1.25f);
}

TEST_CASE("temperature fitting softens overconfident logits") {
  // correct class gets a huge margin but the labels are wrong 30% of the time
  rng gen(78);
  const std::size_t n = 800, k = 4;
  tensor logits({n, k});
  std::vector<std::int32_t> labels;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t c = gen.index(k);
    for (std::size_t i = 0; i < k; ++i) {
      logits.data()[r * k + i] = (i == c ? 9.0f : 0.0f) + 0.1f * gen.normal();
    }
    const bool flip = gen.next_float() < 0.3f;
    labels.push_back(static_cast<std::int32_t>(flip ? (c + 1) % k : c));
  }
  const float t = fit_temperature(logits, labels);
  CHECK(t > 2.0f);

  // and never ends worse than the untempered baseline
  CHECK(scaled_nll(logits, labels, t) <= scaled_nll(logits, labels, 1.0) + 1e-9);
}

TEST_CASE("fitted temperature never loses to t=1") {
  for (std::uint32_t seed = 1; seed <= 8; ++seed) {
    rng gen(seed);
    const tensor logits = random_tensor({200, 6}, gen, -4.0f, 4.0f);
    std::vector<std::int32_t> labels;
    for (std::size_t i = 0; i < 200; ++i) {
      labels.push_back(static_cast<std::int32_t>(gen.index(6)));
    }
    const float t = fit_temperature(logits, labels);
    CHECK(t >= 0.05f);
    CHECK(t <= 20.0f);
    CHECK(scaled_nll(logits, labels, t) <= scaled_nll(logits, labels, 1.0) + 1e-9);
  }
}

TEST_CASE("temperature scaling never changes the argmax") {
  rng gen(79);
  const tensor logits = random_tensor({300, 7}, gen, -3.0f, 3.0f);
  const auto base = argmax_rows(logits);
  for (const double t : {0.05, 0.37, 2.0, 19.0}) {
    tensor scaled({300, 7});
    for (std::size_t i = 0; i < scaled.size(); ++i) {
      scaled.data()[i] = static_cast<float>(logits.data()[i] / t);
    }
    CHECK(argmax_rows(scaled) == base);
  }
}

TEST_CASE("expected calibration error on hand-built cases") {
  SUBCASE("perfectly confident and right") {
    const std::vector<float> conf(10, 1.0f);
    const std::vector<bool> correct(10, true);
    CHECK(expected_calibration_error(conf, correct) == doctest::Approx(0.0));
  }
  SUBCASE("perfectly confident and wrong") {
    const std::vector<float> conf(10, 1.0f);
    const std::vector<bool> correct(10, false);
    CHECK(expected_calibration_error(conf, correct) == doctest::Approx(1.0));
  }
  SUBCASE("one bin with a gap of 0.2") {
    const std::vector<float> conf(4, 0.95f);
    const std::vector<bool> correct = {true, true, true, false};
    CHECK(expected_calibration_error(conf, correct) == doctest::Approx(0.2));
  }
  SUBCASE("two equally filled bins average their gaps") {
    // bin of 0.95 conf / all wrong (gap .95), bin of 0.05 conf / all right (gap .95)
    const std::vector<float> conf = {0.95f, 0.95f, 0.05f, 0.05f};
    const std::vector<bool> correct = {false, false, true, true};
    CHECK(expected_calibration_error(conf, correct) == doctest::Approx(0.95));
  }
}

TEST_CASE("threshold assignment walks the grid to the smallest feasible theta") {
  const std::vector<float> conf = {0.99f, 0.98f, 0.90f, 0.50f};
  const std::vector<bool> agrees = {true, true, false, true};

  // budget = 0.04 / 2^1 = 0.02; any theta <= 0.90 keeps the disagreement:
  // bound >= 0.75 * (1/3) = 0.25. first feasible grid point is 0.91.
  const auto rep = assign_threshold(conf, agrees, 0.04, 1);
  CHECK(rep.budget == doctest::Approx(0.02));
  CHECK(rep.assigned == doctest::Approx(0.91f));
  REQUIRE(rep.grid.size() == 101);
  for (std::size_t i = 0; i < rep.grid.size(); ++i) {
    CHECK(rep.grid[i] == doctest::Approx(static_cast<float>(i) / 100.0f));
  }
  // spot-check the curve rows used above
  CHECK(rep.hit_rate[0] == doctest::Approx(1.0));
  CHECK(rep.accuracy[0] == doctest::Approx(0.75));
  CHECK(rep.hit_rate[91] == doctest::Approx(0.5));
  CHECK(rep.accuracy[91] == doctest::Approx(1.0));
  CHECK(rep.bound[91] == doctest::Approx(0.0));
}

TEST_CASE("an empty hit set counts as perfectly accurate") {
  const std::vector<float> conf = {0.30f, 0.30f};
  const std::vector<bool> agrees = {false, false};
  const auto rep = assign_threshold(conf, agrees, 0.001, 1);
  // disagreements make every hitting theta infeasible; the first theta with
  // zero hits (0.31) gets accuracy := 1 and bound 0
  CHECK(rep.assigned == doctest::Approx(0.31f));
  CHECK(rep.accuracy[31] == doctest::Approx(1.0));
  CHECK(rep.bound[31] == doctest::Approx(0.0));
}

TEST_CASE("perfect agreement pins the threshold at zero even with zero budget") {
  const std::vector<float> conf = {1.0f, 0.9f, 0.2f};
  const std::vector<bool> agrees = {true, true, true};
  const auto rep = assign_threshold(conf, agrees, 0.0, 3);
  CHECK(rep.budget == doctest::Approx(0.0));
  CHECK(rep.assigned == doctest::Approx(0.0f));
}

TEST_CASE("an unsatisfiable budget disables the cache") {
  const std::vector<float> conf(8, 1.0f);
  std::vector<bool> agrees(8, true);
  for (std::size_t i = 0; i < 4; ++i) agrees[i] = false;
  const auto rep = assign_threshold(conf, agrees, 0.001, 1);
  CHECK(threshold_is_disabled(rep.assigned));
}

TEST_CASE("tolerance must live in [0, 1)") {
  const std::vector<float> conf = {0.5f};
  const std::vector<bool> agrees = {true};
  CHECK_THROWS_AS((void)assign_threshold(conf, agrees, 1.0, 1), precondition_error);
  CHECK_THROWS_AS((void)assign_threshold(conf, agrees, -0.2, 1), precondition_error);
  CHECK_NOTHROW((void)assign_threshold(conf, agrees, 0.0, 1));
}

TEST_CASE("hit rate is non-increasing along the grid") {
  rng gen(81);
  std::vector<float> conf;
  std::vector<bool> agrees;
  for (int i = 0; i < 500; ++i) {
    conf.push_back(gen.next_float());
    agrees.push_back(gen.next_float() < 0.7f);
  }
  const auto rep = assign_threshold(conf, agrees, 0.05, 2);
  for (std::size_t i = 1; i < rep.hit_rate.size(); ++i) {
    CHECK(rep.hit_rate[i] <= rep.hit_rate[i - 1]);
  }
  // the budget halves with depth
  CHECK(assign_threshold(conf, agrees, 0.05, 1).budget == doctest::Approx(0.025));
  CHECK(assign_threshold(conf, agrees, 0.05, 2).budget == doctest::Approx(0.0125));
  CHECK(assign_threshold(conf, agrees, 0.05, 3).budget == doctest::Approx(0.00625));
}

namespace {

// identity cache over a vector tap: logits == activations
cache_model identity_cache(std::size_t k) {
  cache_model cache;
  cache.target_layer = "act1";
  cache.ordinal = 1;
  cache.tap_shape = {k};
  cache.num_classes = k;
  cache.net = sequential::create(
      {layer_spec::dense(k, k), layer_spec::log_softmax()}, 1);
  std::vector<float> flat(k * k + k, 0.0f);
  for (std::size_t i = 0; i < k; ++i) flat[i * k + i] = 1.0f;
  cache.net.set_flat_params(flat);
  return cache;
}

// overconfident medial val data: logits have a huge margin toward a class the
// teacher only agrees with 70% of the time
medial_dataset overconfident_val(std::size_t n, std::size_t k, std::uint32_t seed) {
  rng gen(seed);
  medial_dataset md;
  md.layer = "act1";
  md.tap_shape = {k};
  md.num_classes = k;
  md.activations = tensor({n, k});
  md.teachers = tensor({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    md.ids.push_back("v" + std::to_string(i));
    const std::size_t c = gen.index(k);
    for (std::size_t j = 0; j < k; ++j) {
      md.activations.data()[i * k + j] = (j == c ? 7.0f : 0.0f) + 0.05f * gen.normal();
    }
    const std::size_t t = gen.next_float() < 0.7f ? c : (c + 1) % k;
    for (std::size_t j = 0; j < k; ++j) {
      md.teachers.data()[i * k + j] = (j == t) ? 0.95f : 0.05f / (k - 1);
    }
  }
  return md;
}

}  // namespace

TEST_CASE("cache calibration lowers the calibration error and keeps argmax") {
  auto cache = identity_cache(4);
  const auto val = overconfident_val(600, 4, 83);

  const auto before_cls = cache.predict(val.activations).classes;
  const double pre = cache_ece(cache, val);
  const float t = calibrate_cache(cache, val);
  CHECK(t == cache.temperature);
  CHECK(t > 1.5f);  // had to soften
  const double post = cache_ece(cache, val);
  CHECK(post <= pre + 1e-6);

  const auto after_cls = cache.predict(val.activations).classes;
  CHECK(before_cls == after_cls);
}

TEST_CASE("assigning a cache threshold stores the curve on the model") {
  auto cache = identity_cache(4);
  const auto val = overconfident_val(600, 4, 84);
  calibrate_cache(cache, val);
  const auto rep = assign_cache_threshold(cache, val, 0.05);
  CHECK(rep.layer == "act1");
  CHECK(rep.ordinal == 1);
  CHECK(cache.threshold == rep.assigned);
  REQUIRE(cache.hit_curve.size() == 101);
  for (std::size_t i = 0; i < 101; ++i) {
    CHECK(cache.hit_curve[i].first == rep.grid[i]);
    CHECK(cache.hit_curve[i].second == doctest::Approx(rep.hit_rate[i]));
  }
}

TEST_CASE("ground-truth effect bookkeeping on a hand-built batch") {
  const std::vector<std::int32_t> cache_cls = {0, 1, 0, 1, 0, 0};
  const std::vector<float> conf = {0.9f, 0.9f, 0.85f, 0.95f, 0.7f, 0.9f};
  const std::vector<std::int32_t> back_cls = {0, 1, 1, 0, 0, 1};
  const std::vector<std::int32_t> labels = {0, 2, 1, 1, 0, 2};

  const auto eff = actual_accuracy_effect(cache_cls, conf, back_cls, labels, 0.8f);
  CHECK(eff.total == 6);
  CHECK(eff.hits == 5);  // sample 5 stays below theta
  CHECK(eff.both_correct == 1);    // sample 1
  CHECK(eff.agree_wrong == 1);     // sample 2
  CHECK(eff.backbone_only == 1);   // sample 3: backbone right, cache wrong
  CHECK(eff.cache_only == 1);      // sample 4: cache right, backbone wrong
  CHECK(eff.disagree_wrong == 1);  // sample 6
  CHECK(eff.effect == doctest::Approx(0.0));

  // losing the harmful hit makes the net effect positive
  auto conf2 = conf;
  conf2[2] = 0.7f;
  const auto eff2 = actual_accuracy_effect(cache_cls, conf2, back_cls, labels, 0.8f);
  CHECK(eff2.backbone_only == 0);
  CHECK(eff2.effect == doctest::Approx(1.0 / 6.0));
}
