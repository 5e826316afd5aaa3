#include <doctest.h>

#include <cmath>
#include <limits>

#include "forge/ops.hpp"
#include "forge/train.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace forge;

using testing::blobs;
using testing::xor_dataset;

TEST_CASE("lenet5 topology and parameter counts") {
  const Network net = build_lenet5(0);
  CHECK(net.weight_count() == 500 + 25000 + 400000 + 5000);
  CHECK(net.weight_count() == 430500);
  CHECK(net.parameter_count() == 430500 + 20 + 50 + 500 + 10);
  CHECK(net.compressible_layers() == std::vector<std::string>{"conv1", "conv2", "fc1", "fc2"});
  CHECK(net.weight("conv2").shape() == Shape{50, 20, 5, 5});
  CHECK(net.weight("fc1").shape() == Shape{500, 800});

  const Tensor logits = net.forward(Tensor({1, 1, 28, 28}));
  CHECK(logits.shape() == Shape{1, 10});
  for (float v : logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("same seed gives bit-identical parameters and forward output") {
  const Network a = build_lenet5(7), b = build_lenet5(7), c = build_lenet5(8);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].value == b.parameters()[i].value);
  }
  CHECK_FALSE(a.parameters()[0].value == c.parameters()[0].value);
  std::mt19937_64 rng(1);
  const Tensor x = testing::random_tensor({3, 1, 28, 28}, rng);
  CHECK(a.forward(x) == b.forward(x));
}

TEST_CASE("mlp construction") {
  const std::vector<std::size_t> d1{4, 3};
  const Network one = build_mlp(d1, 0);
  CHECK(one.parameter_count() == 15);
  CHECK(one.compressible_layers().size() == 1);
  const std::vector<std::size_t> d2{2, 2, 2};
  CHECK(build_mlp(d2, 0).compressible_layers() == std::vector<std::string>{"fc1", "fc2"});
  CHECK_THROWS_AS(build_mlp(std::vector<std::size_t>{}, 0), InputError);
  CHECK_THROWS_AS(build_mlp(std::vector<std::size_t>{5}, 0), InputError);
}

TEST_CASE("network validation") {
  CHECK_THROWS_AS(Network("dup", {LayerSpec::dense("a", 2, 2), LayerSpec::dense("a", 2, 2)}, {2}, 2), InputError);
  CHECK_THROWS_AS(Network("cls", {LayerSpec::dense("a", 2, 3)}, {2}, 2), DimensionError);
  CHECK_THROWS_AS(Network("in", {LayerSpec::dense("a", 3, 2)}, {2}, 2), DimensionError);
  LayerSpec r = LayerSpec::relu("r");
  r.compressible = true;
  CHECK_THROWS_AS(Network("cmp", {LayerSpec::dense("a", 2, 2), r}, {2}, 2), InputError);
  CHECK(parse_layer_kind("maxpool") == LayerKind::maxpool);
  CHECK_THROWS_AS(parse_layer_kind("lstm"), FormatError);
}

TEST_CASE("tape gradients agree with finite differences of the float network") {
  Network net("tiny",
              {LayerSpec::conv("c1", 1, 3, 3), LayerSpec::relu("r1"), LayerSpec::maxpool("p1", 2, 2),
               LayerSpec::flatten("f"), LayerSpec::dense("d1", 12, 4)},
              {1, 6, 6}, 4);
  net.initialize(5);
  std::mt19937_64 rng(9);
  const Tensor x = testing::random_tensor({2, 1, 6, 6}, rng);
  const std::vector<int> y{1, 3};
  GradTape tape;
  const auto lg = ops::softmax_cross_entropy(net.forward(x, tape), y);
  tape.backward(lg.dlogits);
  REQUIRE(tape.grads().size() == net.parameters().size());
  std::size_t checked = 0;
  for (std::size_t p = 0; p < net.parameters().size(); ++p) {
    Tensor& v = net.parameters()[p].value;
    CHECK(tape.grads()[p].shape() == v.shape());
    for (std::size_t i = 0; i < v.numel(); ++i) {
      auto central = [&](float h) {
        const float orig = v[i];
        v[i] = orig + h;
        const double up = ops::softmax_cross_entropy(net.forward(x), y).loss;
        v[i] = orig - h;
        const double down = ops::softmax_cross_entropy(net.forward(x), y).loss;
        v[i] = orig;
        return (up - down) / (2.0 * static_cast<double>(h));
      };
      const double fd = central(4e-3f), fd_half = central(2e-3f);
      // A step that crosses a relu or pooling kink makes the two estimates disagree.
      if (std::abs(fd - fd_half) > 1e-2 * std::abs(fd) + 1e-4) continue;
      INFO(net.parameters()[p].name << "[" << i << "]");
      CHECK(tape.grads()[p][i] == doctest::Approx(fd).epsilon(1e-2).scale(1e-2));
      ++checked;
    }
  }
  CHECK(checked > 50);
}

TEST_CASE("xor trains to 100% with seed 0") {
  const Dataset d = xor_dataset();
  const std::vector<std::size_t> dims{2, 8, 2};
  Network net = build_mlp(dims, 0);
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.batch_size = 4;
  cfg.lr.base_lr = 0.1;
  cfg.weight_decay = 0.0;
  cfg.seed = 0;
  set_log_level(0);
  const TrainResult r = train(net, d, d, cfg);
  set_log_level(1);
  CHECK(r.final_accuracy() == 1.0);
}

TEST_CASE("training bookkeeping") {
  const Dataset d = blobs(300, 1);
  const std::vector<std::size_t> dims{2, 16, 3};
  Network net = build_mlp(dims, 1);
  const Network init = net;

  TrainConfig zero;
  zero.epochs = 0;
  const TrainResult none = train(net, d, d, zero);
  CHECK(none.test_accuracy.empty());
  for (std::size_t i = 0; i < net.parameters().size(); ++i) CHECK(net.parameters()[i].value == init.parameters()[i].value);

  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 16;
  set_log_level(0);
  const TrainResult r = train(net, d, d, cfg);
  set_log_level(1);
  REQUIRE(r.best_accuracy.size() == 8);
  for (std::size_t e = 1; e < r.best_accuracy.size(); ++e) {
    CHECK(r.best_accuracy[e] >= r.best_accuracy[e - 1]);
    CHECK(r.best_accuracy[e] >= r.test_accuracy[e]);
  }
  CHECK(r.final_accuracy() > 0.9);

  const double a = evaluate(net, d, 1), b = evaluate(net, d, 7), c = evaluate(net, d, 1000);
  CHECK(a == b);
  CHECK(a == c);
}

TEST_CASE("divergence surfaces the epoch index") {
  const Dataset d = blobs(30, 2);
  const std::vector<std::size_t> dims{2, 4, 3};
  Network net = build_mlp(dims, 0);
  net.weight("fc2")[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 2;
  set_log_level(0);
  try {
    train(net, d, d, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
  set_log_level(1);
}

TEST_CASE("lr schedule steps at 50% and 75%") {
  const LrSchedule s;
  CHECK(s.at(0, 20) == doctest::Approx(0.01));
  CHECK(s.at(9, 20) == doctest::Approx(0.01));
  CHECK(s.at(10, 20) == doctest::Approx(0.001));
  CHECK(s.at(15, 20) == doctest::Approx(0.0001));
}

TEST_CASE("frozen weights do not move during training") {
  const Dataset d = blobs(60, 3);
  const std::vector<std::size_t> dims{2, 6, 3};
  Network net = build_mlp(dims, 0);
  MaskSet frozen;
  Mask m(net.weight("fc1").shape());
  for (std::size_t i = 0; i < m.numel(); i += 2) m[i] = 1;
  frozen["fc1"] = m;
  const Tensor before = net.weight("fc1");
  Trainer t(net, TrainConfig{});
  StepHooks hooks;
  hooks.frozen = &frozen;
  t.run_epoch(d, 0.05, hooks);
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i]) CHECK(net.weight("fc1")[i] == before[i]);
  }
  CHECK_FALSE(net.weight("fc1") == before);
}

TEST_CASE("samples_per_epoch caps the draws of each epoch") {
  const Dataset d = blobs(40, 4);
  const std::vector<std::size_t> dims{2, 8, 3};
  Network net = build_mlp(dims, 4);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.samples_per_epoch = 10;
  Trainer t(net, cfg);
  CHECK(t.run_epoch(d, 0.01).steps == 3);
  cfg.samples_per_epoch = 1000;  // larger than the set: a full pass
  Trainer full(net, cfg);
  CHECK(full.run_epoch(d, 0.01).steps == 10);
}
