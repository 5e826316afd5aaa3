#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "forge/finalize.hpp"

namespace forge {

enum class StepMode { prune, quantize };

const char* to_string(StepMode mode);

/// Training budgets shared by every step a plan builder emits.
struct StepSettings {
  AdmmConfig admm;
  FinalizeConfig finalize;
};

struct PlanStep {
  StepMode mode = StepMode::prune;
  ConstraintMap constraints;
  AdmmConfig admm;  // rho restarts from rho0 in every step
  FinalizeConfig finalize;
  std::set<std::string> frozen_layers;  // held fixed in this step on top of earlier results
  double target_rate = 0.0;             // overall pruning rate this step aims at; 0 for quantize steps
};

struct CompressionPlan {
  std::vector<PlanStep> steps;

  /// Throws ConfigError on unknown or non-compressible layers, constraint kinds
  /// that do not match the step mode, or a pruning budget that grows between
  /// steps.
  void validate(const Network& net) const;
};

/// Overall prior-art rate and per-layer prior rates (numel / kept). Layers
/// without a prior rate are left unpruned; an empty map means every
/// compressible layer with prior rate 1.
struct PruneRateHeuristic {
  double r_prior = 1.0;
  std::map<std::string, double> layer_prior;
  int steps = 2;  // step s targets 1.5 * r_prior * 2^(s-1)
};

/// Published per-layer rates of magnitude pruning on LeNet-5, kept fractions
/// conv1 66%, conv2 12%, fc1 8%, fc2 19%.
std::map<std::string, double> lenet5_prior_rates();

/// Per-layer kept counts whose overall rate over the listed layers is
/// `target_rate`, obtained by scaling the prior per-layer rates by one common
/// factor. Conv layers that would keep under 1% of their weights are raised to
/// 1%, with the difference taken from dense layers in proportion to their
/// budgets; a dense layer left with fewer than one weight is a ConfigError
/// naming it.
std::map<std::string, std::size_t> scaled_layer_alphas(const Network& net,
                                                       const std::map<std::string, double>& layer_prior,
                                                       double target_rate);

CompressionPlan make_prune_plan(const Network& net, const PruneRateHeuristic& h, const StepSettings& settings);

/// Two-step plan ending at `final_rate` (r_prior = final_rate / 3).
CompressionPlan prune_plan_for_target(const Network& net, double final_rate,
                                      const std::map<std::string, double>& layer_prior,
                                      const StepSettings& settings);

/// One step straight to `final_rate`.
CompressionPlan one_shot_prune_plan(const Network& net, double final_rate,
                                    const std::map<std::string, double>& layer_prior, const StepSettings& settings);

/// Middle compressible layers first, then the first and last with the middle
/// ones frozen. Fewer than three compressible layers give one step over all.
CompressionPlan make_quant_plan(const Network& net, int bit_width, bool include_zero, const StepSettings& settings);

struct LayerStats {
  std::string layer;
  std::size_t numel = 0;
  std::size_t nonzero = 0;
  double rate = 1.0;  // numel / nonzero; infinite when nothing is left
  int bits = 32;      // ceil(log2 levels) for quantized layers
  std::size_t levels = 0;
};

/// Recount of every compressible layer from the weights alone, bits from `state`.
std::vector<LayerStats> layer_stats(const Network& net, const CompressionState* state = nullptr);
/// Total compressible weights / total nonzero among them.
double overall_rate(const std::vector<LayerStats>& stats);

struct StepReport {
  int index = 0;
  StepMode mode = StepMode::prune;
  std::map<std::string, std::string> constraints;  // layer -> describe(spec)
  double target_rate = 0.0;
  ConvergenceTrace trace;
  double accuracy_admm = -1.0;  // W after the regularized phase (ADMM or a fixed penalty), before projecting
  FinalizeResult finalize;
  std::vector<LayerStats> layers;
  double overall_rate = 1.0;
  double seconds = 0.0;
  std::string trace_file;  // where the caller wrote `trace`, if anywhere
};

struct CompressionReport {
  std::string method;
  double baseline_accuracy = -1.0;
  std::vector<StepReport> steps;
  std::vector<LayerStats> layers;  // final model
  double overall_rate = 1.0;
  double final_accuracy = -1.0;
  std::string error;  // set when a step failed; steps holds the completed ones
  std::map<std::string, std::string> config;  // effective configuration, echoed verbatim

  /// baseline - final accuracy (fractions, so 0.005 is half a point); NaN without a baseline.
  double accuracy_loss() const;
};

struct PlanHooks {
  /// Called after each completed step with the feasible network.
  std::function<void(const StepReport&, const Network&, const CompressionState&)> after_step;
};

/// Runs each step as ADMM followed by finalize, carrying pinned zeros and
/// quantized layers forward in `state`. On failure the report keeps the
/// completed steps, records the message, and the error is rethrown.
void run_plan(Network& net, const CompressionPlan& plan, const Dataset& train, const Dataset* test,
              CompressionState& state, CompressionReport& report, const PlanHooks& hooks = {});

/// Pruning plan, then the quantization plan on the surviving weights.
void run_prune_then_quantize(Network& net, const CompressionPlan& prune_plan, int bit_width, bool include_zero,
                             const StepSettings& quant_settings, const Dataset& train, const Dataset* test,
                             CompressionState& state, CompressionReport& report, const PlanHooks& hooks = {});

}  // namespace forge
