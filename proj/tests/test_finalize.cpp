#include <doctest.h>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "forge/finalize.hpp"

using namespace forge;
using testing::blobs;
using testing::QuietLogs;

namespace {

Network small_mlp(std::uint64_t seed = 0) {
  const std::vector<std::size_t> dims{2, 12, 3};
  return build_mlp(dims, seed);
}

FinalizeConfig retrain(int epochs) {
  FinalizeConfig cfg;
  cfg.retrain_epochs = epochs;
  cfg.lr.base_lr = 0.02;
  cfg.train.batch_size = 16;
  return cfg;
}

}  // namespace

TEST_CASE("prune finalize without retraining equals the projection") {
  const Dataset d = blobs(60, 1);
  Network net = small_mlp();
  const Tensor w1 = net.weight("fc1"), w2 = net.weight("fc2");
  CompressionState state;
  const ConstraintMap cons{{"fc1", Cardinality{5}}, {"fc2", ColumnGroup{4}}};
  const FinalizeResult r = finalize_prune(net, cons, d, &d, retrain(0), state);
  CHECK(net.weight("fc1") == project_cardinality(w1, 5));
  CHECK(net.weight("fc2") == project_columns(w2, 4));
  CHECK(r.retrain_accuracy.empty());
  CHECK(r.accuracy_final == r.accuracy_projected);
  CHECK(count_nonzero(state.pruned.at("fc1")) == w1.numel() - 5);
  CHECK(state.constraints.size() == 2);
  CHECK(feasibility_violations(net, state).empty());
}

TEST_CASE("masked retraining keeps pruned weights at exactly zero") {
  const Dataset d = blobs(150, 2);
  Network net = small_mlp(1);
  CompressionState state;
  const Tensor fc2_before = net.weight("fc2");
  const QuietLogs quiet;
  const FinalizeResult r = finalize_prune(net, {{"fc1", Cardinality{6}}}, d, &d, retrain(4), state);
  CHECK(r.retrain_accuracy.size() == 4);
  const Mask& m = state.pruned.at("fc1");
  std::size_t kept = 0;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i]) CHECK(net.weight("fc1")[i] == 0.0f);
    kept += !m[i];
  }
  CHECK(kept == 6);
  CHECK(count_nonzero(net.weight("fc1")) <= 6);
  // unconstrained layers keep training
  CHECK_FALSE(net.weight("fc2") == fc2_before);
}

TEST_CASE("a second prune step never revives pinned weights") {
  const Dataset d = blobs(90, 3);
  Network net = small_mlp(2);
  CompressionState state;
  const QuietLogs quiet;
  finalize_prune(net, {{"fc1", Cardinality{12}}}, d, nullptr, retrain(1), state);
  const Mask first = state.pruned.at("fc1");
  finalize_prune(net, {{"fc1", Cardinality{6}}}, d, nullptr, retrain(1), state);
  const Mask& second = state.pruned.at("fc1");
  for (std::size_t i = 0; i < first.numel(); ++i) {
    if (first[i]) CHECK(second[i]);
  }
  CHECK(count_nonzero(net.weight("fc1")) <= 6);
}

TEST_CASE("infinite epsilon freezes everything: quantize equals project_levels") {
  const Dataset d = blobs(60, 4);
  Network net = small_mlp(3);
  const Tensor w = net.weight("fc1");
  const Levels expect = make_levels(w, 3, true);
  FinalizeConfig cfg = retrain(2);
  cfg.epsilon = std::numeric_limits<double>::infinity();
  CompressionState state;
  const QuietLogs quiet;
  const FinalizeResult r = finalize_quant(net, {{"fc1", LevelGrid{3, true}}}, d, &d, cfg, state);
  CHECK(state.levels.at("fc1") == expect);
  CHECK(net.weight("fc1") == project_levels(w, expect));
  CHECK(r.frozen_in_phase1.at("fc1") == w.numel());
  CHECK(feasibility_violations(net, state).empty());
}

TEST_CASE("epsilon = 0 freezes only weights already on the grid") {
  const Dataset d = blobs(60, 5);
  Network net = small_mlp(4);
  Tensor& w = net.weight("fc1");
  // 0.25 multiples in [-0.75, 0.75] fit a 3-bit zero grid at scale 0.25 exactly
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0.25f * static_cast<float>(static_cast<int>(i % 7) - 3);
  w[1] = 0.3f;
  w[5] = -0.6f;
  const Levels lv = make_levels(w, 3, true);
  std::size_t on_grid = 0;
  for (std::size_t i = 0; i < w.numel(); ++i) on_grid += lv.contains(w[i]);

  FinalizeConfig cfg = retrain(0);
  cfg.epsilon = 0.0;
  CompressionState state;
  const Tensor w0 = w;
  const FinalizeResult r = finalize_quant(net, {{"fc1", LevelGrid{3, true}}}, d, nullptr, cfg, state);
  CHECK(r.frozen_in_phase1.at("fc1") == on_grid);
  CHECK(on_grid < w.numel());
  CHECK(net.weight("fc1") == project_levels(w0, lv));
}

TEST_CASE("snapped weights hold their level through retraining") {
  const Dataset d = blobs(120, 6);
  Network net = small_mlp(5);
  const Tensor w = net.weight("fc1");
  const Levels lv = make_levels(w, 2, true);
  FinalizeConfig cfg = retrain(3);
  cfg.epsilon = 0.25 * lv.spacing();
  CompressionState state;
  const QuietLogs quiet;
  const FinalizeResult r = finalize_quant(net, {{"fc1", LevelGrid{2, true}}}, d, &d, cfg, state);
  CHECK(r.epsilon.at("fc1") == cfg.epsilon);
  CHECK(r.retrain_accuracy.size() == 3);
  const Tensor q = project_levels(w, lv);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (std::abs(double(w[i]) - double(q[i])) <= *cfg.epsilon) CHECK(net.weight("fc1")[i] == q[i]);
  }
  CHECK(feasibility_violations(net, state).empty());
}

TEST_CASE("default epsilon is a fifth of the level spacing") {
  const Dataset d = blobs(30, 7);
  Network net = small_mlp(6);
  const Levels lv = make_levels(net.weight("fc2"), 4, true);
  CompressionState state;
  const FinalizeResult r = finalize_quant(net, {{"fc2", LevelGrid{4, true}}}, d, nullptr, retrain(0), state);
  CHECK(r.epsilon.at("fc2") == doctest::Approx(0.2 * lv.spacing()));
}

TEST_CASE("quantizing a pruned layer keeps its zeros, even on a grid without zero") {
  const Dataset d = blobs(90, 8);
  Network net = small_mlp(7);
  CompressionState state;
  const QuietLogs quiet;
  finalize_prune(net, {{"fc1", Cardinality{9}}}, d, nullptr, retrain(1), state);
  finalize_quant(net, {{"fc1", LevelGrid{2, false}}}, d, nullptr, retrain(2), state);
  const Mask& m = state.pruned.at("fc1");
  const Levels& lv = state.levels.at("fc1");
  CHECK(lv.values.size() == 4);
  CHECK_FALSE(lv.contains(0.0f));
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i]) {
      CHECK(net.weight("fc1")[i] == 0.0f);
    } else {
      CHECK(lv.contains(net.weight("fc1")[i]));
    }
  }
  CHECK(count_nonzero(net.weight("fc1")) <= 9);
  CHECK(feasibility_violations(net, state).empty());

  // a later step on another layer leaves this one untouched
  const Tensor fc1 = net.weight("fc1");
  finalize_prune(net, {{"fc2", Cardinality{10}}}, d, nullptr, retrain(2), state);
  CHECK(net.weight("fc1") == fc1);
}

TEST_CASE("feasibility checks report violations") {
  const Dataset d = blobs(30, 9);
  Network net = small_mlp(8);
  CompressionState state;
  finalize_prune(net, {{"fc1", Cardinality{4}}}, d, nullptr, retrain(0), state);
  finalize_quant(net, {{"fc2", LevelGrid{2, true}}}, d, nullptr, retrain(0), state);
  REQUIRE(feasibility_violations(net, state).empty());
  CHECK_NOTHROW(require_feasible(net, state));

  Network bad = net;
  const Mask& m = state.pruned.at("fc1");
  std::size_t i = 0;
  while (!m[i]) ++i;
  bad.weight("fc1")[i] = 0.5f;
  bad.weight("fc2")[0] = 1e-3f + state.levels.at("fc2").values.back();
  const auto v = feasibility_violations(bad, state);
  CHECK(v.size() == 2);
  CHECK_THROWS_AS(require_feasible(bad, state), FeasibilityError);
}

TEST_CASE("finalize rejects the wrong constraint kind") {
  const Dataset d = blobs(30, 10);
  Network net = small_mlp();
  CompressionState state;
  CHECK_THROWS_AS(finalize_prune(net, {{"fc1", LevelGrid{2, true}}}, d, nullptr, retrain(0), state), ConfigError);
  CHECK_THROWS_AS(finalize_quant(net, {{"fc1", Cardinality{2}}}, d, nullptr, retrain(0), state), ConfigError);
  FinalizeConfig neg = retrain(0);
  neg.epsilon = -1.0;
  CHECK_THROWS_AS(finalize_quant(net, {{"fc1", LevelGrid{2, true}}}, d, nullptr, neg, state), ConfigError);
}

TEST_CASE("frozen masks cover pruned entries and whole quantized layers") {
  Network net = small_mlp();
  CompressionState state;
  Mask m(net.weight("fc1").shape());
  m[3] = 1;
  state.pruned["fc1"] = m;
  state.levels["fc2"] = levels_for_scale(0.5, 2, true);
  const MaskSet f = state.frozen_masks(net);
  CHECK(f.at("fc1") == m);
  CHECK(count_nonzero(f.at("fc2")) == net.weight("fc2").numel());
}
