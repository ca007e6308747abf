#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "layercache/calibration.hpp"
#include "layercache/engine.hpp"
#include "layercache/errors.hpp"
#include "support.hpp"

using namespace layercache;

namespace {

sample_set cluster_stream(std::size_t n, std::size_t dim, std::size_t classes,
                          std::uint32_t seed, bool with_labels) {
  rng gen(seed);
  sample_set s;
  s.inputs = tensor({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    s.ids.push_back("e" + std::to_string(i));
    const std::size_t c = gen.index(classes);
    if (with_labels) s.labels.push_back(static_cast<std::int32_t>(c));
    for (std::size_t d = 0; d < dim; ++d) {
      s.inputs.data()[i * dim + d] = 0.5f * gen.normal() + (d == c ? 2.0f : 0.0f);
    }
  }
  return s;
}

struct engine_fixture {
  backbone_graph graph;
  std::vector<cache_model> caches;  // act1, act2
  sample_set stream;
};

engine_fixture build_fixture(std::uint32_t seed) {
  engine_fixture fx{testsup::mlp_chain(3, 6, 8, 3, seed), {},
                    cluster_stream(48, 6, 3, seed + 1, true)};
  const auto cands = fx.graph.identify_candidates(1);
  auto mds = collect(fx.graph, fx.stream, cands, 64);
  for (std::size_t i = 0; i < mds.size(); ++i) {
    assign_splits(mds[i], 0.6, 0.2, 0.2, 5);
    cache_architecture arch;
    arch.dense_widths = {8};
    train_config cfg;
    cfg.max_epochs = 8;
    cfg.seed = seed + 2;
    fx.caches.push_back(train_cache(arch, mds[i], cands[i], cfg).model);
  }
  return fx;
}

// midpoint threshold guaranteeing both hits and misses
float split_threshold(const std::vector<float>& conf) {
  const auto [lo, hi] = std::minmax_element(conf.begin(), conf.end());
  REQUIRE(*lo < *hi);
  return 0.5f * (*lo + *hi);
}

std::filesystem::path fresh_dir(const char* leaf) {
  const auto dir = std::filesystem::temp_directory_path() / leaf;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("path costs accumulate cache overheads in walk order") {
  auto fx = build_fixture(401);
  const std::uint64_t c1a = fx.caches[0].own_flops;
  const std::uint64_t c1b = fx.caches[1].own_flops;
  CHECK(fx.caches[0].fallback_flops == fx.graph.fallback_flops("act1"));
  CHECK(fx.caches[1].fallback_flops == fx.graph.fallback_flops("act2"));

  cache_enabled_model model(fx.graph, fx.caches, 0.05);
  CHECK(model.tolerance() == 0.05);
  CHECK(model.early_path_flops(0) == fx.graph.cumulative_flops("act1") + c1a);
  CHECK(model.early_path_flops(1) == fx.graph.cumulative_flops("act2") + c1a + c1b);
  CHECK(model.final_path_flops() == fx.graph.total_flops() + c1a + c1b);

  cache_enabled_model bare(fx.graph, {}, 0.0);
  CHECK(bare.final_path_flops() == fx.graph.total_flops());
}

TEST_CASE("the constructor rejects inconsistent cache sets") {
  auto fx = build_fixture(403);

  SUBCASE("duplicate ordinal") {
    auto dup = fx.caches;
    dup[1].ordinal = dup[0].ordinal;
    CHECK_THROWS_AS(cache_enabled_model(fx.graph, dup, 0.0), precondition_error);
  }
  SUBCASE("duplicate target layer") {
    auto dup = fx.caches;
    dup[1] = dup[0];
    dup[1].ordinal = 7;
    CHECK_THROWS_AS(cache_enabled_model(fx.graph, dup, 0.0), precondition_error);
  }
  SUBCASE("unknown target layer") {
    auto bad = fx.caches;
    bad[0].target_layer = "nowhere";
    CHECK_THROWS_AS(cache_enabled_model(fx.graph, bad, 0.0), precondition_error);
  }
  SUBCASE("ordinals must follow topological order") {
    auto swapped = fx.caches;
    std::swap(swapped[0].ordinal, swapped[1].ordinal);
    CHECK_THROWS_AS(cache_enabled_model(fx.graph, swapped, 0.0), precondition_error);
  }
}

TEST_CASE("disabled thresholds reproduce the plain backbone bit for bit") {
  auto fx = build_fixture(405);
  for (auto& c : fx.caches) c.threshold = disabled_threshold;
  cache_enabled_model model(fx.graph, fx.caches, 0.0);

  const tensor pd = fx.graph.forward(fx.stream.inputs);
  const auto cls = argmax_rows(pd);
  const auto records = model.infer_batch(fx.stream);
  REQUIRE(records.size() == fx.stream.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    // resolution order degenerates to batch order
    CHECK(records[i].sample_id == fx.stream.ids[i]);
    CHECK_FALSE(records[i].early);
    CHECK(records[i].predicted == cls[i]);
    CHECK(records[i].confidence == pd.row(i)[static_cast<std::size_t>(cls[i])]);
    // in-model caches charge their overhead even when never hitting
    CHECK(records[i].path_flops == model.final_path_flops());
  }
}

TEST_CASE("a zero threshold resolves the whole batch at the first cache") {
  auto fx = build_fixture(407);
  fx.caches[0].threshold = 0.0f;
  fx.caches[1].threshold = 0.0f;
  cache_enabled_model model(fx.graph, fx.caches, 0.0);

  std::map<std::string, tensor> taps;
  fx.graph.forward_with_taps(fx.stream.inputs, {"act1"}, taps);
  const auto direct = model.caches()[0].predict(taps.at("act1"));

  const auto records = model.infer_batch(fx.stream);
  REQUIRE(records.size() == fx.stream.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    CHECK(records[i].sample_id == fx.stream.ids[i]);
    CHECK(records[i].early);
    CHECK(records[i].exit_ordinal == model.caches()[0].ordinal);
    CHECK(records[i].predicted == direct.classes[i]);
    CHECK(records[i].confidence == direct.confidence[i]);
    CHECK(records[i].path_flops == model.early_path_flops(0));
  }
}

TEST_CASE("thresholds split the batch exactly as the confidences dictate") {
  auto fx = build_fixture(409);

  std::map<std::string, tensor> taps;
  const tensor pd = fx.graph.forward_with_taps(fx.stream.inputs, {"act1", "act2"}, taps);
  const auto cls = argmax_rows(pd);
  const auto p1 = fx.caches[0].predict(taps.at("act1"));
  const auto p2 = fx.caches[1].predict(taps.at("act2"));
  fx.caches[0].threshold = split_threshold(p1.confidence);
  fx.caches[1].threshold = split_threshold(p2.confidence);
  cache_enabled_model model(fx.graph, fx.caches, 0.0);

  // expected stage per sample: 1, 2, or 3 (final)
  const std::size_t n = fx.stream.size();
  std::vector<int> stage(n);
  std::vector<std::string> expect_order;
  for (std::size_t i = 0; i < n; ++i) {
    stage[i] = p1.confidence[i] >= fx.caches[0].threshold   ? 1
               : p2.confidence[i] >= fx.caches[1].threshold ? 2
                                                            : 3;
  }
  for (int s : {1, 2, 3}) {
    for (std::size_t i = 0; i < n; ++i) {
      if (stage[i] == s) expect_order.push_back(fx.stream.ids[i]);
    }
  }

  std::vector<std::string> callback_order;
  const auto records = model.infer_batch(fx.stream, [&](const exit_record& r) {
    callback_order.push_back(r.sample_id);
  });
  REQUIRE(records.size() == n);
  CHECK(callback_order == expect_order);

  std::set<std::string> seen;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& rec = records[k];
    CHECK(rec.sample_id == expect_order[k]);
    CHECK(seen.insert(rec.sample_id).second);  // exactly once
    std::size_t i = 0;
    while (fx.stream.ids[i] != rec.sample_id) ++i;
    switch (stage[i]) {
      case 1:
        CHECK(rec.early);
        CHECK(rec.exit_ordinal == fx.caches[0].ordinal);
        CHECK(rec.predicted == p1.classes[i]);
        CHECK(rec.confidence == p1.confidence[i]);
        CHECK(rec.path_flops == model.early_path_flops(0));
        break;
      case 2:
        CHECK(rec.early);
        CHECK(rec.exit_ordinal == fx.caches[1].ordinal);
        // the shrunk batch must not perturb the cache's arithmetic
        CHECK(rec.predicted == p2.classes[i]);
        CHECK(rec.confidence == p2.confidence[i]);
        CHECK(rec.path_flops == model.early_path_flops(1));
        break;
      default:
        CHECK_FALSE(rec.early);
        CHECK(rec.predicted == cls[i]);
        CHECK(rec.path_flops == model.final_path_flops());
    }
  }
  CHECK(seen.size() == n);
}

TEST_CASE("singleton batches reproduce the batched results bit for bit") {
  auto fx = build_fixture(411);
  std::map<std::string, tensor> taps;
  fx.graph.forward_with_taps(fx.stream.inputs, {"act1", "act2"}, taps);
  fx.caches[0].threshold = split_threshold(fx.caches[0].predict(taps.at("act1")).confidence);
  fx.caches[1].threshold = split_threshold(fx.caches[1].predict(taps.at("act2")).confidence);
  cache_enabled_model model(fx.graph, fx.caches, 0.0);

  std::map<std::string, exit_record> batched;
  for (const auto& r : model.infer_batch(fx.stream)) batched[r.sample_id] = r;

  const std::size_t dim = fx.stream.inputs.row_size();
  for (std::size_t i = 0; i < fx.stream.size(); ++i) {
    tensor one({1, dim});
    std::copy_n(fx.stream.inputs.row(i), dim, one.data());
    const auto recs = model.infer_batch(one, {fx.stream.ids[i]});
    REQUIRE(recs.size() == 1);
    const auto& a = recs[0];
    const auto& b = batched.at(fx.stream.ids[i]);
    CHECK(a.early == b.early);
    CHECK(a.exit_ordinal == b.exit_ordinal);
    CHECK(a.predicted == b.predicted);
    CHECK(a.confidence == b.confidence);
    CHECK(a.path_flops == b.path_flops);
  }
}

TEST_CASE("a cached dominator before a fork keeps every branch row-aligned") {
  rng gen(421);
  const auto fc1 = layer_spec::dense(6, 8);
  const auto br = layer_spec::dense(8, 8);
  const auto head = layer_spec::dense(8, 3);
  std::vector<graph_node> nodes = {
      {"fc1", fc1, init_params(fc1, gen), false},
      {"act1", layer_spec::relu(), {}, true},
      {"left", br, init_params(br, gen), false},
      {"right", br, init_params(br, gen), false},
      {"head", head, init_params(head, gen), false},
      {"prob", layer_spec::softmax(), {}, false},
  };
  auto graph = backbone_graph::build(std::move(nodes),
                                     {{"fc1", "act1"},
                                      {"act1", "left"},
                                      {"act1", "right"},
                                      {"left", "head"},
                                      {"right", "head"},
                                      {"head", "prob"}},
                                     "fc1", "prob", 3, {6});

  const auto cands = graph.identify_candidates(0);
  REQUIRE(cands.size() == 1);
  REQUIRE(cands[0].node == "act1");

  auto stream = cluster_stream(40, 6, 3, 423, false);
  auto mds = collect(graph, stream, cands, 64);
  assign_splits(mds[0], 0.6, 0.2, 0.2, 5);
  cache_architecture arch;
  arch.dense_widths = {8};
  train_config cfg;
  cfg.max_epochs = 8;
  cfg.seed = 425;
  auto cache = train_cache(arch, mds[0], cands[0], cfg).model;

  std::map<std::string, tensor> taps;
  const tensor pd = graph.forward_with_taps(stream.inputs, {"act1"}, taps);
  const auto direct = cache.predict(taps.at("act1"));
  const auto cls = argmax_rows(pd);
  cache.threshold = split_threshold(direct.confidence);

  SUBCASE("branch nodes are rejected as cache targets") {
    auto rogue = cache;
    rogue.target_layer = "left";
    CHECK_THROWS_AS(cache_enabled_model(graph, {rogue}, 0.0), precondition_error);
  }

  cache_enabled_model model(graph, {cache}, 0.0);
  std::size_t finals = 0;
  for (const auto& rec : model.infer_batch(stream)) {
    std::size_t i = 0;
    while (stream.ids[i] != rec.sample_id) ++i;
    if (rec.early) {
      CHECK(rec.predicted == direct.classes[i]);
      CHECK(rec.confidence == direct.confidence[i]);
    } else {
      ++finals;
      // the merge downstream of the shrink must still line up row for row
      CHECK(rec.predicted == cls[i]);
      CHECK(rec.confidence == pd.row(i)[static_cast<std::size_t>(cls[i])]);
    }
  }
  CHECK(finals > 0);
}

TEST_CASE("malformed batches are rejected up front") {
  auto fx = build_fixture(427);
  cache_enabled_model model(fx.graph, fx.caches, 0.0);
  CHECK_THROWS_AS((void)model.infer_batch(tensor({0, 6}), {}), precondition_error);
  CHECK_THROWS_AS((void)model.infer_batch(fx.stream.inputs, {"just-one"}),
                  precondition_error);
  CHECK_THROWS_AS((void)model.infer_batch(tensor({4, 5}), {"a", "b", "c", "d"}),
                  shape_error);
}

TEST_CASE("models survive a save/load round trip") {
  auto fx = build_fixture(431);
  std::map<std::string, tensor> taps;
  fx.graph.forward_with_taps(fx.stream.inputs, {"act1", "act2"}, taps);
  fx.caches[0].threshold = split_threshold(fx.caches[0].predict(taps.at("act1")).confidence);
  fx.caches[1].threshold = split_threshold(fx.caches[1].predict(taps.at("act2")).confidence);
  cache_enabled_model model(fx.graph, fx.caches, 0.02);

  const auto dir = fresh_dir("layercache_engine_rt");
  model.save(dir);
  const auto back = cache_enabled_model::load(dir);
  CHECK(back.tolerance() == 0.02);
  REQUIRE(back.caches().size() == 2);
  CHECK(back.final_path_flops() == model.final_path_flops());
  CHECK(back.graph().content_hash() == fx.graph.content_hash());

  const auto before = model.infer_batch(fx.stream);
  const auto after = back.infer_batch(fx.stream);
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(after[i].sample_id == before[i].sample_id);
    CHECK(after[i].early == before[i].early);
    CHECK(after[i].exit_ordinal == before[i].exit_ordinal);
    CHECK(after[i].predicted == before[i].predicted);
    CHECK(after[i].confidence == before[i].confidence);
    CHECK(after[i].path_flops == before[i].path_flops);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("per-sample flop totals are exact sums") {
  auto fx = build_fixture(433);
  std::map<std::string, tensor> taps;
  fx.graph.forward_with_taps(fx.stream.inputs, {"act1", "act2"}, taps);
  fx.caches[0].threshold = split_threshold(fx.caches[0].predict(taps.at("act1")).confidence);
  fx.caches[1].threshold = split_threshold(fx.caches[1].predict(taps.at("act2")).confidence);
  cache_enabled_model model(fx.graph, fx.caches, 0.0);

  std::uint64_t expect = 0;
  for (const auto& rec : model.infer_batch(fx.stream)) expect += rec.path_flops;

  const auto s = average_flops(model, fx.stream);
  const std::size_t n = fx.stream.size();
  CHECK(s.base_total == fx.graph.total_flops() * n);
  CHECK(s.cache_total == expect);
  CHECK(s.base_avg == doctest::Approx(double(s.base_total) / double(n)));
  CHECK(s.cache_avg == doctest::Approx(double(s.cache_total) / double(n)));
  CHECK(s.reduction == doctest::Approx(1.0 - s.cache_avg / s.base_avg));
}

TEST_CASE("ground-truth evaluation recomputes from first principles") {
  auto fx = build_fixture(437);
  std::map<std::string, tensor> taps;
  const tensor pd = fx.graph.forward_with_taps(fx.stream.inputs, {"act1", "act2"}, taps);
  const auto base_cls = argmax_rows(pd);
  fx.caches[0].threshold = split_threshold(fx.caches[0].predict(taps.at("act1")).confidence);
  fx.caches[1].threshold = split_threshold(fx.caches[1].predict(taps.at("act2")).confidence);
  cache_enabled_model model(fx.graph, fx.caches, 0.0);

  latency_options lat;
  lat.measure = false;
  const auto rep = evaluate(model, fx.stream, lat);

  const std::size_t n = fx.stream.size();
  const auto records = model.infer_batch(fx.stream);

  std::size_t base_ok = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (base_cls[i] == fx.stream.labels[i]) ++base_ok;
  }
  std::size_t cache_ok = 0, early = 0;
  std::vector<std::size_t> hits(2, 0), agree(2, 0);
  std::vector<double> effect(2, 0.0);
  for (const auto& rec : records) {
    std::size_t i = 0;
    while (fx.stream.ids[i] != rec.sample_id) ++i;
    const bool right = rec.predicted == fx.stream.labels[i];
    if (right) ++cache_ok;
    if (!rec.early) continue;
    ++early;
    const std::size_t c = rec.exit_ordinal == fx.caches[0].ordinal ? 0 : 1;
    ++hits[c];
    if (rec.predicted == base_cls[i]) ++agree[c];
    const bool base_right = base_cls[i] == fx.stream.labels[i];
    if (right && !base_right) effect[c] += 1.0;
    if (!right && base_right) effect[c] -= 1.0;
  }

  CHECK(rep.samples == n);
  CHECK(rep.base_accuracy == doctest::Approx(double(base_ok) / double(n)));
  CHECK(rep.cache_enabled_accuracy == doctest::Approx(double(cache_ok) / double(n)));
  CHECK(rep.overall_hit_rate == doctest::Approx(double(early) / double(n)));

  REQUIRE(rep.exits.size() == 2);
  CHECK(rep.exits[0].reached == n);
  CHECK(rep.exits[0].hits == hits[0]);
  CHECK(rep.exits[1].reached == n - hits[0]);
  CHECK(rep.exits[1].hits == hits[1]);
  CHECK(rep.final_exit.reached == n - hits[0] - hits[1]);
  CHECK(rep.final_exit.hits == rep.final_exit.reached);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(rep.exits[c].hit_rate ==
          doctest::Approx(double(hits[c]) / double(rep.exits[c].reached)));
    if (hits[c] > 0) {
      CHECK(rep.exits[c].cache_accuracy == doctest::Approx(double(agree[c]) / double(hits[c])));
    }
    CHECK(rep.exits[c].effect == doctest::Approx(effect[c] / double(n)));
  }

  const auto fl = average_flops(model, fx.stream);
  CHECK(rep.flops.cache_total == fl.cache_total);
  CHECK(rep.flops.base_total == fl.base_total);
  CHECK(rep.latency_batch == 0);

  // render paths stay consistent with the numbers
  const auto j = rep.to_json();
  CHECK(j.at("samples").get<std::size_t>() == n);
  CHECK(j.at("exits").size() == 2);
  CHECK(j.count("latency") == 0);
  const std::string csv = rep.csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);  // header + 2 exits + final
  CHECK(rep.text().find("flops reduction") != std::string::npos);

  sample_set unlabeled = fx.stream;
  unlabeled.labels.clear();
  CHECK_THROWS_AS((void)evaluate(model, unlabeled, lat), precondition_error);
}
