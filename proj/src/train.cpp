#include "forge/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "forge/ops.hpp"
#include "forge/sgd.hpp"

namespace forge {

namespace {
std::atomic<int> g_log_level{1};
}

void set_log_level(int level) { g_log_level = level; }
int log_level() { return g_log_level; }

void log_info(const std::string& msg) {
  if (g_log_level > 0) std::fprintf(stderr, "[forge] %s\n", msg.c_str());
}

double LrSchedule::at(int epoch, int total_epochs) const {
  double lr = base_lr;
  for (double m : milestones) {
    if (epoch >= static_cast<int>(std::lround(m * total_epochs))) lr *= factor;
  }
  return lr;
}

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("ADMM_FORGE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

void apply_mask(Tensor& grads, const Mask& mask) {
  if (grads.shape() != mask.shape()) throw DimensionError("apply_mask: mask shape mismatch");
  for (std::size_t i = 0; i < grads.numel(); ++i) {
    if (mask[i]) grads[i] = 0.0f;
  }
}

Trainer::Trainer(Network& net, const TrainConfig& cfg) : net_(net), cfg_(cfg), rng_(cfg.seed) {
  if (cfg_.batch_size == 0) throw InputError("batch size must be positive");
  reset_velocity();
}

void Trainer::reset_velocity() {
  velocity_.clear();
  for (const auto& p : net_.parameters()) velocity_.emplace_back(p.value.shape());
}

EpochStats Trainer::run_epoch(const Dataset& train, double lr, const StepHooks& hooks) {
  if (train.size() == 0) throw InputError("training set is empty");
  auto& params = net_.parameters();

  std::vector<const Mask*> frozen(params.size(), nullptr);
  if (hooks.frozen) {
    for (const auto& [layer, mask] : *hooks.frozen) {
      const auto wi = net_.weight_index(layer);
      if (!wi) throw InputError("mask for layer without weights: " + layer);
      if (mask.shape() != params[*wi].value.shape()) throw DimensionError("mask shape mismatch for " + layer);
      frozen[*wi] = &mask;
    }
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);
  if (cfg_.samples_per_epoch > 0 && cfg_.samples_per_epoch < order.size()) order.resize(cfg_.samples_per_epoch);

  EpochStats stats;
  GradTape tape;
  for (std::size_t begin = 0; begin < order.size(); begin += cfg_.batch_size) {
    const std::size_t n = std::min(cfg_.batch_size, order.size() - begin);
    const std::span<const std::size_t> rows(order.data() + begin, n);
    const Tensor x = train.gather_images(rows);
    const std::vector<int> y = train.gather_labels(rows);

    const Tensor logits = net_.forward(x, tape);
    auto lg = ops::softmax_cross_entropy(logits, y);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("loss diverged (non-finite) at epoch " + std::to_string(epochs_run_) + ", step " +
                         std::to_string(stats.steps));
    }
    tape.backward(lg.dlogits);
    auto& grads = tape.grads();
    double extra = 0.0;
    if (hooks.regularize) extra = hooks.regularize(net_, grads);

    for (std::size_t i = 0; i < params.size(); ++i) {
      if (frozen[i]) apply_mask(grads[i], *frozen[i]);
      sgd_step(params[i].value, grads[i], velocity_[i], lr, cfg_.momentum, cfg_.weight_decay, frozen[i],
               params[i].name);
    }
    if (hooks.after_step) hooks.after_step(net_);

    stats.task_loss += lg.loss;
    stats.extra_loss += extra;
    ++stats.steps;
  }
  stats.task_loss /= static_cast<double>(stats.steps);
  stats.extra_loss /= static_cast<double>(stats.steps);
  ++epochs_run_;
  return stats;
}

TrainResult train(Network& net, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                  const StepHooks& hooks) {
  TrainResult result;
  if (cfg.epochs <= 0) return result;
  Trainer trainer(net, cfg);
  for (int e = 0; e < cfg.epochs; ++e) {
    const double lr = cfg.lr.at(e, cfg.epochs);
    const EpochStats st = trainer.run_epoch(train_set, lr, hooks);
    const double acc = evaluate(net, test_set);
    result.train_loss.push_back(st.task_loss);
    result.test_accuracy.push_back(acc);
    result.best_accuracy.push_back(result.best_accuracy.empty() ? acc : std::max(acc, result.best_accuracy.back()));
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %d/%d lr=%.2g loss=%.4f test_acc=%.4f", e + 1, cfg.epochs, lr,
                  st.task_loss, acc);
    log_info(buf);
  }
  return result;
}

double evaluate(const Network& net, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw InputError("evaluation set is empty");
  const std::size_t batches = (data.size() + batch_size - 1) / batch_size;
  std::vector<std::size_t> correct(batches, 0);

  auto run = [&](std::size_t first, std::size_t step) {
    std::vector<std::size_t> rows;
    for (std::size_t b = first; b < batches; b += step) {
      const std::size_t begin = b * batch_size, n = std::min(batch_size, data.size() - begin);
      rows.resize(n);
      std::iota(rows.begin(), rows.end(), begin);
      const Tensor logits = net.forward(data.gather_images(rows));
      const std::size_t k = logits.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        const float* row = logits.data().data() + i * k;
        const auto pred = static_cast<int>(std::max_element(row, row + k) - row);
        correct[b] += pred == data.labels[begin + i];
      }
    }
  };

  const std::size_t threads = std::min(worker_threads(), batches);
  if (threads <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
    for (auto& th : pool) th.join();
  }
  const std::size_t total = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
  return static_cast<double>(total) / static_cast<double>(data.size());
}

}  // namespace forge
