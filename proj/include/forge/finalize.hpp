#pragma once

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forge/admm.hpp"

namespace forge {

/// What has been fixed so far across compression steps.
struct CompressionState {
  MaskSet pruned;                                // true = weight pinned at zero
  std::map<std::string, Levels> levels;          // quantized layers (every weight on grid or pruned)
  std::map<std::string, ConstraintSpec> constraints;  // latest constraint per layer

  /// Masks that hold weights fixed during later training: pruned entries plus
  /// every entry of a quantized layer.
  MaskSet frozen_masks(const Network& net) const;
  bool operator==(const CompressionState&) const = default;
};

/// Every violated constraint of `state` on `net`, one line each.
std::vector<std::string> feasibility_violations(const Network& net, const CompressionState& state);

/// Throws FeasibilityError listing the violations, if any.
void require_feasible(const Network& net, const CompressionState& state);

struct FinalizeConfig {
  int retrain_epochs = 30;
  LrSchedule lr{0.001, {0.5, 0.75}, 0.1};
  TrainConfig train;
  /// Quantization freeze threshold; unset means 0.2 * level spacing.
  std::optional<double> epsilon;
};

struct FinalizeResult {
  double accuracy_projected = -1.0;  // right after the hard projection (phase 1 for quantization)
  double accuracy_final = -1.0;
  std::vector<double> retrain_accuracy;
  std::map<std::string, double> epsilon;  // quantization only
  std::map<std::string, std::size_t> frozen_in_phase1;  // quantization only
};

/// Projects every constrained layer, pins the resulting zeros, and retrains the
/// remaining weights. Updates `state` (pruned masks, constraints).
/// `extra_frozen` weights are also held during retraining.
FinalizeResult finalize_prune(Network& net, const ConstraintMap& constraints, const Dataset& train,
                              const Dataset* test, const FinalizeConfig& cfg, CompressionState& state,
                              const MaskSet* extra_frozen = nullptr);

/// Fits levels per layer, then (1) snaps weights within epsilon of a level,
/// (2) retrains the others with the snapped ones frozen, (3) maps the rest to
/// the nearest level. Pruned entries stay zero. Updates `state` (levels).
FinalizeResult finalize_quant(Network& net, const ConstraintMap& constraints, const Dataset& train,
                              const Dataset* test, const FinalizeConfig& cfg, CompressionState& state,
                              const MaskSet* extra_frozen = nullptr);

/// Retraining with masks, with the step-decay schedule of `cfg`.
std::vector<double> masked_retrain(Network& net, const Dataset& train, const Dataset* test, const FinalizeConfig& cfg,
                                   const MaskSet& frozen);

}  // namespace forge
