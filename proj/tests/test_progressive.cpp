#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "forge/progressive.hpp"

using namespace forge;
using testing::blobs;
using testing::QuietLogs;

namespace {

Network mlp3(std::uint64_t seed = 0) {
  const std::vector<std::size_t> dims{2, 12, 12, 3};
  return build_mlp(dims, seed);
}

StepSettings quick_settings() {
  StepSettings s;
  s.admm.rho = RhoSchedule{0.05, 2.0, 3, 1.0};
  s.admm.epochs_per_iter = 1;
  s.admm.lr = 0.05;
  s.admm.train.batch_size = 16;
  s.finalize.retrain_epochs = 2;
  s.finalize.lr.base_lr = 0.02;
  s.finalize.train.batch_size = 16;
  return s;
}

std::size_t alpha_of(const PlanStep& step, const std::string& layer) {
  return std::get<Cardinality>(step.constraints.at(layer)).alpha;
}

std::size_t total_alpha(const PlanStep& step) {
  std::size_t n = 0;
  for (const auto& [layer, spec] : step.constraints) n += std::get<Cardinality>(spec).alpha;
  return n;
}

}  // namespace

TEST_CASE("LeNet-5 prior rates of 12.5x give steps at 18.75x and 37.5x") {
  const Network net = build_lenet5(0);
  const CompressionPlan plan = make_prune_plan(net, {12.5, lenet5_prior_rates(), 2}, StepSettings{});
  REQUIRE(plan.steps.size() == 2);
  CHECK(plan.steps[0].target_rate == doctest::Approx(18.75));
  CHECK(plan.steps[1].target_rate == doctest::Approx(37.5));
  CHECK(total_alpha(plan.steps[0]) == 22960);  // round(430500 / 18.75)
  CHECK(total_alpha(plan.steps[1]) == 11480);  // round(430500 / 37.5)
  const auto prior = lenet5_prior_rates();
  for (const auto& step : plan.steps) {
    // one common scale factor: alpha_i * prior_i / numel_i is the same for every layer
    const double ref = alpha_of(step, "fc1") * prior.at("fc1") / 400000.0;
    for (const auto& [layer, rate] : prior) {
      const double numel = static_cast<double>(net.weight(layer).numel());
      CHECK(alpha_of(step, layer) * rate / numel == doctest::Approx(ref).epsilon(1.0 / alpha_of(step, layer) + 1e-6));
    }
  }
  for (const auto& [layer, rate] : prior) CHECK(alpha_of(plan.steps[1], layer) <= alpha_of(plan.steps[0], layer));
}

TEST_CASE("r_prior = 1 gives 1.5x then 3x") {
  const Network net = build_lenet5(0);
  const CompressionPlan plan = make_prune_plan(net, {1.0, {}, 2}, StepSettings{});
  CHECK(plan.steps[0].target_rate == 1.5);
  CHECK(plan.steps[1].target_rate == 3.0);
  CHECK(total_alpha(plan.steps[0]) == 287000);
  CHECK(total_alpha(plan.steps[1]) == 143500);
  CHECK_THROWS_AS(make_prune_plan(net, {0.5, {}, 2}, StepSettings{}), ConfigError);
}

TEST_CASE("uniform priors give uniform per-layer rates") {
  const Network net = build_lenet5(0);
  const auto alphas = scaled_layer_alphas(net, {{"conv1", 2.0}, {"conv2", 2.0}, {"fc1", 2.0}, {"fc2", 2.0}}, 20.0);
  for (const auto& [layer, a] : alphas) {
    CHECK(std::abs(static_cast<double>(a) - net.weight(layer).numel() / 20.0) <= 1.0);
  }
}

TEST_CASE("scaled alphas sum to the budget for any target") {
  const Network net = build_lenet5(0);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> rate(1.0, 90.0);
  for (int t = 0; t < 40; ++t) {
    const double r = rate(rng);
    const auto alphas = scaled_layer_alphas(net, lenet5_prior_rates(), r);
    std::size_t sum = 0;
    for (const auto& [layer, a] : alphas) {
      CHECK(a >= 1);
      CHECK(a <= net.weight(layer).numel());
      sum += a;
    }
    CHECK(sum == static_cast<std::size_t>(std::round(430500.0 / r)));
  }
}

TEST_CASE("conv layers are floored at 1% and dense layers pay for it") {
  const Network net = build_lenet5(0);
  const auto alphas = scaled_layer_alphas(net, lenet5_prior_rates(), 246.0);
  CHECK(alphas.at("conv2") == 250);  // unclamped it would keep about 145 of 25000
  CHECK(alphas.at("conv1") >= 5);
  std::size_t sum = 0;
  for (const auto& [layer, a] : alphas) sum += a;
  CHECK(sum == static_cast<std::size_t>(std::round(430500.0 / 246.0)));

  // a conv layer too big for its dense partner to absorb the floor
  Network tiny("tiny",
               {LayerSpec::conv("conv1", 1, 100, 5), LayerSpec::flatten("flatten"), LayerSpec::dense("fc1", 100, 2)},
               {1, 5, 5}, 2);
  CHECK_THROWS_WITH_AS(scaled_layer_alphas(tiny, {{"conv1", 1.0}, {"fc1", 1.0}}, 200.0), doctest::Contains("fc1"),
                       ConfigError);
  CHECK_THROWS_AS(scaled_layer_alphas(tiny, {{"flatten", 1.0}}, 2.0), ConfigError);
  CHECK_THROWS_AS(scaled_layer_alphas(tiny, {{"nope", 1.0}}, 2.0), ConfigError);
}

TEST_CASE("quantization plan splits middle layers from the ends") {
  const Network net = build_lenet5(0);
  const CompressionPlan plan = make_quant_plan(net, 1, false, StepSettings{});
  REQUIRE(plan.steps.size() == 2);
  CHECK(plan.steps[0].constraints.size() == 2);
  CHECK(plan.steps[0].constraints.count("conv2"));
  CHECK(plan.steps[0].constraints.count("fc1"));
  CHECK(plan.steps[1].constraints.count("conv1"));
  CHECK(plan.steps[1].constraints.count("fc2"));
  CHECK(plan.steps[1].frozen_layers == std::set<std::string>{"conv2", "fc1"});

  const std::vector<std::size_t> dims{4, 3, 2};
  const CompressionPlan small = make_quant_plan(build_mlp(dims, 0), 2, true, StepSettings{});
  REQUIRE(small.steps.size() == 1);
  CHECK(small.steps[0].constraints.size() == 2);
  CHECK_THROWS_AS(make_quant_plan(net, 9, true, StepSettings{}), ConfigError);
}

TEST_CASE("plan validation") {
  const Network net = mlp3();
  CompressionPlan p;
  p.steps.resize(2);
  p.steps[0].constraints["fc1"] = Cardinality{5};
  p.steps[1].constraints["fc1"] = Cardinality{6};
  CHECK_THROWS_WITH_AS(p.validate(net), doctest::Contains("grows"), ConfigError);
  p.steps[1].constraints["fc1"] = Cardinality{4};
  CHECK_NOTHROW(p.validate(net));
  p.steps[1].constraints["fc2"] = LevelGrid{2, true};
  CHECK_THROWS_AS(p.validate(net), ConfigError);
  p.steps[1].constraints.erase("fc2");
  p.steps[1].frozen_layers = {"fc1"};
  CHECK_THROWS_AS(p.validate(net), ConfigError);
  p.steps[1].frozen_layers.clear();
  p.steps[1].constraints["relu1"] = Cardinality{1};
  CHECK_THROWS_AS(p.validate(net), ConfigError);
}

TEST_CASE("a one-step plan equals ADMM followed by finalize") {
  const Dataset d = blobs(120, 1);
  const QuietLogs quiet;
  const StepSettings s = quick_settings();
  Network a = mlp3(1), b = mlp3(1);
  const CompressionPlan plan = one_shot_prune_plan(a, 4.0, {}, s);
  CompressionState sa, sb;
  CompressionReport report;
  run_plan(a, plan, d, &d, sa, report);

  run_admm(b, d, &d, plan.steps[0].constraints, s.admm, &sb.pruned, nullptr);
  finalize_prune(b, plan.steps[0].constraints, d, &d, s.finalize, sb);
  for (const auto& l : a.compressible_layers()) CHECK(a.weight(l) == b.weight(l));
  CHECK(sa == sb);
  REQUIRE(report.steps.size() == 1);
  CHECK(report.overall_rate == doctest::Approx(4.0).epsilon(0.02));
  CHECK(report.error.empty());
}

TEST_CASE("two-step pruning keeps earlier zeros and every constraint so far") {
  const Dataset d = blobs(120, 2);
  const QuietLogs quiet;
  Network net = mlp3(2);
  const CompressionPlan plan = make_prune_plan(net, {2.0, {}, 2}, quick_settings());
  CompressionState state;
  CompressionReport report;
  std::vector<MaskSet> masks;
  PlanHooks hooks;
  hooks.after_step = [&](const StepReport& sr, const Network& n, const CompressionState& st) {
    CHECK(feasibility_violations(n, st).empty());
    for (int s = 0; s <= sr.index; ++s) {
      for (const auto& [layer, spec] : plan.steps[s].constraints) {
        CHECK(count_nonzero(n.weight(layer)) <= std::get<Cardinality>(spec).alpha);
      }
    }
    masks.push_back(st.pruned);
  };
  run_plan(net, plan, d, &d, state, report, hooks);
  REQUIRE(masks.size() == 2);
  for (const auto& [layer, m] : masks[0]) {
    for (std::size_t i = 0; i < m.numel(); ++i) {
      if (m[i]) CHECK(masks[1].at(layer)[i]);
    }
  }
  CHECK(report.steps[0].overall_rate == doctest::Approx(3.0).epsilon(0.02));
  CHECK(report.steps[1].overall_rate == doctest::Approx(6.0).epsilon(0.02));

  // report rates agree with a direct recount
  std::size_t numel = 0, nnz = 0;
  for (const auto& l : net.compressible_layers()) {
    numel += net.weight(l).numel();
    nnz += count_nonzero(net.weight(l));
  }
  CHECK(report.overall_rate == static_cast<double>(numel) / static_cast<double>(nnz));
  for (const auto& s : report.layers) CHECK(s.rate == static_cast<double>(s.numel) / static_cast<double>(s.nonzero));
}

TEST_CASE("layers quantized in step 1 are bit-identical through step 2") {
  const Dataset d = blobs(90, 3);
  const QuietLogs quiet;
  Network net = mlp3(3);
  const CompressionPlan plan = make_quant_plan(net, 2, true, quick_settings());
  CompressionState state;
  CompressionReport report;
  Tensor fc2_after_step1;
  PlanHooks hooks;
  hooks.after_step = [&](const StepReport& sr, const Network& n, const CompressionState&) {
    if (sr.index == 0) fc2_after_step1 = n.weight("fc2");
  };
  run_plan(net, plan, d, &d, state, report, hooks);
  CHECK(net.weight("fc2") == fc2_after_step1);
  CHECK(state.levels.size() == 3);
  for (const auto& s : report.layers) {
    CHECK(s.bits == 2);
    CHECK(s.levels == 3);
  }
  CHECK(feasibility_violations(net, state).empty());
}

TEST_CASE("prune then quantize: every weight is zero or on the grid") {
  const Dataset d = blobs(120, 4);
  const QuietLogs quiet;
  Network net = mlp3(4);
  const StepSettings s = quick_settings();
  const CompressionPlan prune = prune_plan_for_target(net, 6.0, {}, s);
  CompressionState state;
  CompressionReport report;
  run_prune_then_quantize(net, prune, 3, false, s, d, &d, state, report);
  CHECK(report.steps.size() == 4);
  for (const auto& l : net.compressible_layers()) {
    const Levels& lv = state.levels.at(l);
    CHECK(lv.values.size() == 8);
    const Mask& m = state.pruned.at(l);
    for (std::size_t i = 0; i < m.numel(); ++i) {
      const float w = net.weight(l)[i];
      CHECK((m[i] ? w == 0.0f : lv.contains(w)));
    }
  }
  CHECK(report.overall_rate == doctest::Approx(6.0).epsilon(0.02));
  for (const auto& ls : report.layers) CHECK(ls.bits == 3);
  CHECK(feasibility_violations(net, state).empty());
}

TEST_CASE("prune-then-quantize with no pruning steps equals the quantization plan") {
  const Dataset d = blobs(60, 5);
  const QuietLogs quiet;
  const StepSettings s = quick_settings();
  Network a = mlp3(5), b = mlp3(5);
  CompressionState sa, sb;
  CompressionReport ra, rb;
  run_prune_then_quantize(a, CompressionPlan{}, 2, true, s, d, &d, sa, ra);
  run_plan(b, make_quant_plan(b, 2, true, s), d, &d, sb, rb);
  for (const auto& l : a.compressible_layers()) CHECK(a.weight(l) == b.weight(l));
  CHECK(sa == sb);
}

TEST_CASE("reports are deterministic under a fixed seed") {
  const Dataset d = blobs(60, 6);
  const QuietLogs quiet;
  auto run = [&] {
    Network net = mlp3(6);
    CompressionState st;
    CompressionReport r;
    run_plan(net, make_prune_plan(net, {2.0, {}, 2}, quick_settings()), d, &d, st, r);
    return r;
  };
  const CompressionReport a = run(), b = run();
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].trace.to_csv() == b.steps[i].trace.to_csv());
    CHECK(a.steps[i].finalize.retrain_accuracy == b.steps[i].finalize.retrain_accuracy);
    CHECK(a.steps[i].overall_rate == b.steps[i].overall_rate);
  }
}

TEST_CASE("a failing step leaves the completed steps in the report") {
  const Dataset d = blobs(60, 7);
  const QuietLogs quiet;
  Network net = mlp3(7);
  CompressionPlan plan = make_prune_plan(net, {2.0, {}, 2}, quick_settings());
  plan.steps[1].admm.epochs_per_iter = 0;
  CompressionState state;
  CompressionReport report;
  CHECK_THROWS_AS(run_plan(net, plan, d, &d, state, report), ConfigError);
  CHECK(report.steps.size() == 1);
  CHECK_FALSE(report.error.empty());
  CHECK(report.overall_rate == doctest::Approx(3.0).epsilon(0.02));
}

TEST_CASE("accuracy loss is measured against the baseline") {
  CompressionReport r;
  CHECK(std::isnan(r.accuracy_loss()));
  r.baseline_accuracy = 0.992;
  r.final_accuracy = 0.990;
  CHECK(r.accuracy_loss() == doctest::Approx(0.002));
}
