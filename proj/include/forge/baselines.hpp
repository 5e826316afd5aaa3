#pragma once

#include <set>
#include <string>
#include <vector>

#include "forge/progressive.hpp"

namespace forge {

enum class BaselineMethod { iter_magnitude, fixed_l2, fixed_l1, pgd };

const char* to_string(BaselineMethod m);
BaselineMethod parse_baseline_method(std::string_view s);

enum class RegNorm { l1, l2 };

struct BaselineConfig {
  BaselineMethod method = BaselineMethod::iter_magnitude;
  ConstraintMap targets;  // Cardinality per layer
  int rounds = 3;         // iter_magnitude: prune/retrain rounds
  int train_epochs = 10;  // fixed_l1/l2: regularized epochs; pgd: all epochs
  LrSchedule lr{0.01, {0.5, 0.75}, 0.1};
  double lambda = 1e-4;     // fixed_l1/l2 strength
  FinalizeConfig finalize;  // retraining after each hard projection
  TrainConfig train;        // batch size, momentum, weight decay, seed
};

/// lambda * sum ||W_i||_1 or lambda * sum ||W_i||_F^2 over `layers`.
double norm_penalty(const Network& net, const std::set<std::string>& layers, double lambda, RegNorm norm);
/// Adds lambda * sign(W) or 2 lambda W to the weight gradients of `layers`.
StepHooks norm_penalty_hooks(std::set<std::string> layers, double lambda, RegNorm norm);

/// Per-layer kept counts for round r of `rounds`: the kept fraction is
/// interpolated geometrically from 1 to the target.
ConstraintMap magnitude_round_targets(const Network& net, const ConstraintMap& targets, int round, int rounds);

/// `rounds` rounds of magnitude projection (pinning zeros) and masked retraining.
void iter_magnitude_prune(Network& net, const ConstraintMap& targets, int rounds, const FinalizeConfig& retrain,
                          const Dataset& train, const Dataset* test, CompressionState& state,
                          CompressionReport& report);

/// Trains with a fixed L1/L2 penalty toward zero, then hard-projects and
/// retrains. lambda = 0 skips the regularized phase.
void fixed_reg_prune(Network& net, double lambda, RegNorm norm, const ConstraintMap& targets, int epochs,
                     const LrSchedule& lr, const TrainConfig& train_cfg, const FinalizeConfig& retrain,
                     const Dataset& train, const Dataset* test, CompressionState& state, CompressionReport& report);

/// SGD with every targeted layer projected onto its cardinality set after
/// each step. The support may change between steps; the final zeros are
/// recorded as pruned.
void pgd_prune(Network& net, const ConstraintMap& targets, int epochs, const LrSchedule& lr,
               const TrainConfig& train_cfg, const Dataset& train, const Dataset* test, CompressionState& state,
               CompressionReport& report);

/// Dispatches on cfg.method.
void run_baseline(Network& net, const BaselineConfig& cfg, const Dataset& train, const Dataset* test,
                  CompressionState& state, CompressionReport& report);

}  // namespace forge
