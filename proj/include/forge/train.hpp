#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "forge/dataset.hpp"
#include "forge/network.hpp"

namespace forge {

/// Layer name -> mask over that layer's weight tensor (nonzero = frozen).
using MaskSet = std::map<std::string, Mask>;

/// Step decay: lr = base * factor^(number of milestones passed), milestones
/// given as fractions of the total epoch count.
struct LrSchedule {
  double base_lr = 0.01;
  std::vector<double> milestones{0.5, 0.75};
  double factor = 0.1;

  double at(int epoch, int total_epochs) const;
};

struct TrainConfig {
  int epochs = 20;
  LrSchedule lr;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  /// Samples drawn per epoch from a fresh shuffle; 0 means the whole set.
  std::size_t samples_per_epoch = 0;
};

struct EpochStats {
  double task_loss = 0.0;   // mean over steps
  double extra_loss = 0.0;  // mean regularizer value over steps
  std::size_t steps = 0;
};

/// Customization points of the inner SGD loop.
struct StepHooks {
  /// Runs after backprop; may add penalty gradients in place and returns the
  /// penalty value for loss reporting.
  std::function<double(const Network&, std::vector<Tensor>& grads)> regularize;
  /// Runs after every optimizer step.
  std::function<void(Network&)> after_step;
  /// Weights held fixed: their gradients are masked and they receive no update.
  const MaskSet* frozen = nullptr;
};

/// Owns the optimizer state (velocities) and the shuffling PRNG for one
/// training run over a network.
class Trainer {
 public:
  Trainer(Network& net, const TrainConfig& cfg);

  EpochStats run_epoch(const Dataset& train, double lr, const StepHooks& hooks = {});
  void reset_velocity();

  Network& network() { return net_; }
  const TrainConfig& config() const { return cfg_; }
  int epochs_run() const { return epochs_run_; }

 private:
  Network& net_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  std::vector<Tensor> velocity_;
  int epochs_run_ = 0;
};

struct TrainResult {
  std::vector<double> test_accuracy;  // after each epoch
  std::vector<double> best_accuracy;  // running maximum of test_accuracy
  std::vector<double> train_loss;

  double final_accuracy() const { return test_accuracy.empty() ? 0.0 : test_accuracy.back(); }
};

/// Plain (or hooked) training for cfg.epochs epochs with the step-decay schedule.
TrainResult train(Network& net, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                  const StepHooks& hooks = {});

/// Top-1 accuracy in [0, 1]. Batches are spread over worker_threads().
double evaluate(const Network& net, const Dataset& data, std::size_t batch_size = 1000);

/// Worker thread cap: ADMM_FORGE_THREADS if set, else hardware concurrency.
std::size_t worker_threads();

/// Zeroes `grads` wherever `mask` is set.
void apply_mask(Tensor& grads, const Mask& mask);

void set_log_level(int level);
int log_level();
void log_info(const std::string& msg);

}  // namespace forge
