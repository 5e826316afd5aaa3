#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "forge/baselines.hpp"
#include "gradcheck.hpp"

using namespace forge;
using testing::blobs;
using testing::QuietLogs;

namespace {

Network mlp3(std::uint64_t seed = 0) {
  const std::vector<std::size_t> dims{2, 12, 12, 3};
  return build_mlp(dims, seed);
}

FinalizeConfig retrain(int epochs) {
  FinalizeConfig cfg;
  cfg.retrain_epochs = epochs;
  cfg.lr.base_lr = 0.02;
  cfg.train.batch_size = 16;
  return cfg;
}

TrainConfig batch16() {
  TrainConfig t;
  t.batch_size = 16;
  return t;
}

}  // namespace

TEST_CASE("method names round-trip") {
  for (auto m : {BaselineMethod::iter_magnitude, BaselineMethod::fixed_l2, BaselineMethod::fixed_l1,
                 BaselineMethod::pgd}) {
    CHECK(parse_baseline_method(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_baseline_method("admm"), ConfigError);
}

TEST_CASE("round targets interpolate the kept fraction geometrically") {
  const Network net = mlp3();  // fc1 holds 24 weights
  const ConstraintMap t{{"fc1", Cardinality{3}}};
  CHECK(std::get<Cardinality>(magnitude_round_targets(net, t, 1, 3).at("fc1")).alpha == 12);
  CHECK(std::get<Cardinality>(magnitude_round_targets(net, t, 2, 3).at("fc1")).alpha == 6);
  CHECK(std::get<Cardinality>(magnitude_round_targets(net, t, 3, 3).at("fc1")).alpha == 3);
  CHECK_THROWS_AS(magnitude_round_targets(net, t, 0, 3), ConfigError);
  CHECK_THROWS_AS(magnitude_round_targets(net, t, 1, 0), ConfigError);
}

TEST_CASE("one round without retraining is plain magnitude projection") {
  const Dataset d = blobs(60, 1);
  Network net = mlp3(1);
  const Tensor w1 = net.weight("fc1"), w2 = net.weight("fc2");
  CompressionState st;
  CompressionReport rep;
  iter_magnitude_prune(net, {{"fc1", Cardinality{5}}, {"fc2", Cardinality{20}}}, 1, retrain(0), d, &d, st, rep);
  CHECK(net.weight("fc1") == project_cardinality(w1, 5));
  CHECK(net.weight("fc2") == project_cardinality(w2, 20));
  CHECK(rep.steps.size() == 1);
}

TEST_CASE("identity targets leave the network unchanged") {
  const Dataset d = blobs(60, 2);
  Network net = mlp3(2);
  const Network before = net;
  ConstraintMap full;
  for (const auto& l : net.compressible_layers()) full[l] = Cardinality{net.weight(l).numel()};
  CompressionState st;
  CompressionReport rep;
  iter_magnitude_prune(net, full, 3, retrain(0), d, &d, st, rep);
  for (const auto& l : net.compressible_layers()) CHECK(net.weight(l) == before.weight(l));
}

TEST_CASE("iterative pruning ends feasible with monotone per-round budgets") {
  const Dataset d = blobs(120, 3);
  const QuietLogs quiet;
  Network net = mlp3(3);
  CompressionState st;
  CompressionReport rep;
  iter_magnitude_prune(net, {{"fc1", Cardinality{4}}, {"fc2", Cardinality{15}}}, 3, retrain(2), d, &d, st, rep);
  REQUIRE(rep.steps.size() == 3);
  for (std::size_t r = 1; r < rep.steps.size(); ++r) CHECK(rep.steps[r].overall_rate >= rep.steps[r - 1].overall_rate);
  CHECK(count_nonzero(net.weight("fc1")) <= 4);
  CHECK(count_nonzero(net.weight("fc2")) <= 15);
  CHECK(feasibility_violations(net, st).empty());
}

TEST_CASE("norm penalty gradients match finite differences") {
  Network net = mlp3(4);
  const std::set<std::string> layers{"fc1", "fc3"};
  const double lambda = 0.3;
  for (RegNorm norm : {RegNorm::l2, RegNorm::l1}) {
    std::vector<Tensor> grads;
    for (const auto& p : net.parameters()) grads.emplace_back(p.value.shape());
    const double value = norm_penalty_hooks(layers, lambda, norm).regularize(net, grads);
    CHECK(value == doctest::Approx(norm_penalty(net, layers, lambda, norm)));
    for (const auto& l : layers) {
      Tensor& w = net.weight(l);
      const Tensor& g = grads[*net.weight_index(l)];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const float w0 = w[i];
        if (norm == RegNorm::l2) CHECK(g[i] == doctest::Approx(2.0 * lambda * w0).epsilon(1e-6));
        const float h = 1e-3f;
        w[i] = w0 + h;
        const float up = w[i];
        const double fp = norm_penalty(net, layers, lambda, norm);
        w[i] = w0 - h;
        const float down = w[i];
        const double fm = norm_penalty(net, layers, lambda, norm);
        w[i] = w0;
        const double numeric = (fp - fm) / (double(up) - double(down));
        if (std::abs(w0) > 2 * h) CHECK(std::abs(numeric - g[i]) <= 1e-3 * std::max(1.0, std::abs(numeric)));
      }
    }
    // untouched layer gets nothing
    CHECK(squared_norm(grads[*net.weight_index("fc2")]) == 0.0);
  }
}

TEST_CASE("fixed regularization with lambda = 0 equals one round of magnitude pruning") {
  const Dataset d = blobs(90, 5);
  const QuietLogs quiet;
  const ConstraintMap t{{"fc1", Cardinality{6}}, {"fc3", Cardinality{10}}};
  Network a = mlp3(5), b = mlp3(5);
  CompressionState sa, sb;
  CompressionReport ra, rb;
  fixed_reg_prune(a, 0.0, RegNorm::l2, t, 5, LrSchedule{}, batch16(), retrain(2), d, &d, sa, ra);
  iter_magnitude_prune(b, t, 1, retrain(2), d, &d, sb, rb);
  for (const auto& l : a.compressible_layers()) CHECK(a.weight(l) == b.weight(l));
  CHECK(sa == sb);
}

TEST_CASE("fixed regularization shrinks the targeted layers before projecting") {
  const Dataset d = blobs(90, 6);
  const QuietLogs quiet;
  const ConstraintMap t{{"fc2", Cardinality{40}}};
  Network net = mlp3(6);
  const double n0 = squared_norm(net.weight("fc2"));
  CompressionState st;
  CompressionReport rep;
  TrainConfig tc = batch16();
  tc.weight_decay = 0.0;
  fixed_reg_prune(net, 0.05, RegNorm::l2, t, 6, LrSchedule{0.05, {0.5, 0.75}, 0.1}, tc, retrain(0), d, &d, st, rep);
  CHECK(squared_norm(net.weight("fc2")) < n0);
  CHECK(count_nonzero(net.weight("fc2")) <= 40);
  CHECK(feasibility_violations(net, st).empty());
  CHECK_THROWS_AS(fixed_reg_prune(net, -1.0, RegNorm::l1, t, 1, {}, tc, retrain(0), d, &d, st, rep), ConfigError);
}

TEST_CASE("PGD with identity targets is plain SGD") {
  const Dataset d = blobs(90, 7);
  const QuietLogs quiet;
  Network a = mlp3(7), b = mlp3(7);
  ConstraintMap full;
  for (const auto& l : a.compressible_layers()) full[l] = Cardinality{a.weight(l).numel()};
  const LrSchedule lr{0.05, {0.5, 0.75}, 0.1};
  CompressionState st;
  CompressionReport rep;
  pgd_prune(a, full, 4, lr, batch16(), d, &d, st, rep);
  Trainer t(b, batch16());
  for (int e = 0; e < 4; ++e) t.run_epoch(d, lr.at(e, 4));
  for (const auto& p : a.parameters()) CHECK(p.value == b.parameters()[&p - &a.parameters()[0]].value);
}

TEST_CASE("PGD stays on the cardinality set") {
  const Dataset d = blobs(120, 8);
  const QuietLogs quiet;
  Network net = mlp3(8);
  const ConstraintMap t{{"fc1", Cardinality{5}}, {"fc2", Cardinality{30}}};
  CompressionState st;
  CompressionReport rep;
  BaselineConfig cfg;
  cfg.method = BaselineMethod::pgd;
  cfg.targets = t;
  cfg.train_epochs = 3;
  cfg.train = batch16();
  run_baseline(net, cfg, d, &d, st, rep);
  CHECK(rep.method == "pgd");
  CHECK(count_nonzero(net.weight("fc1")) <= 5);
  CHECK(count_nonzero(net.weight("fc2")) <= 30);
  CHECK(rep.steps.at(0).finalize.retrain_accuracy.size() == 3);
  CHECK(feasibility_violations(net, st).empty());
}

TEST_CASE("baselines reject non-cardinality or out-of-range targets") {
  const Dataset d = blobs(30, 9);
  Network net = mlp3();
  CompressionState st;
  CompressionReport rep;
  CHECK_THROWS_AS(iter_magnitude_prune(net, {{"fc1", LevelGrid{2, true}}}, 1, retrain(0), d, &d, st, rep), ConfigError);
  CHECK_THROWS_AS(iter_magnitude_prune(net, {{"fc1", Cardinality{0}}}, 1, retrain(0), d, &d, st, rep), ConfigError);
  CHECK_THROWS_AS(pgd_prune(net, {{"fc1", Cardinality{25}}}, 1, {}, batch16(), d, &d, st, rep), ConfigError);
  CHECK_THROWS_AS(iter_magnitude_prune(net, {}, 1, retrain(0), d, &d, st, rep), ConfigError);
}
