#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forge/constraints.hpp"
#include "forge/train.hpp"

namespace forge {

/// Layer name -> constraint set for that layer's weights.
using ConstraintMap = std::map<std::string, ConstraintSpec>;

/// rho_k = min(rho0 * gamma^k, rho_max).
struct RhoSchedule {
  double rho0 = 1.5e-3;
  double gamma = 2.0;
  int max_iters = 12;
  double rho_max = 2.0;

  double at(int k) const;
  void validate() const;
};

struct AdmmConfig {
  RhoSchedule rho;
  int epochs_per_iter = 10;
  double tol = 1e-2;     // stop once max_i ||W_i - Z_i|| / ||W_i|| < tol
  double lr = 0.01;      // SGD learning rate for subproblem 1 at iteration 0
  double lr_final = 0.0;  // > 0: cosine decay from lr to this over the iterations
  /// Scale U by rho_old / rho_new whenever rho grows, keeping the unscaled
  /// multiplier rho * U unchanged.
  bool rescale_dual = true;
  TrainConfig train;     // batch size, momentum, weight decay, shuffling seed
  bool evaluate = true;  // record test accuracy on W and on project(W) per iteration

  double lr_at(int k) const;
};

struct LayerAdmm {
  Tensor z;
  Tensor u;
  double rho = 0.0;
  std::optional<Levels> levels;  // levels of the latest projection, quantized layers only
};

/// Auxiliary and dual variables for the layers under ADMM; W lives in the network.
struct AdmmState {
  std::map<std::string, LayerAdmm> layers;
  int iteration = 0;
};

struct TraceRow {
  int iteration = 0;
  std::string layer;
  double gap = 0.0;  // ||W - Z||_F / ||W||_F after the Z update
  double rho = 0.0;
  double loss = 0.0;  // mean augmented loss over the iteration's SGD steps
  double accuracy_w = -1.0;     // negative when not evaluated
  double accuracy_proj = -1.0;
};

struct ConvergenceTrace {
  std::vector<TraceRow> rows;
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;

  /// Largest per-layer gap at `iteration`; throws InputError if absent.
  double max_gap(int iteration) const;
  std::vector<double> max_gaps() const;
  void write_csv(const std::filesystem::path& path) const;
  std::string to_csv() const;
};

/// Z = project(W), U = 0 for each constrained layer, rho = rho0.
AdmmState init_admm_state(const Network& net, const ConstraintMap& constraints, const RhoSchedule& rho,
                          const MaskSet* pinned_zero = nullptr);

/// Task loss plus sum_i (rho_i / 2) ||W_i - Z_i + U_i||^2 on one batch.
double augmented_loss(const Network& net, const Tensor& x, std::span<const int> labels, const AdmmState& state);

/// Sum of the quadratic penalty terms alone.
double admm_penalty_total(const Network& net, const AdmmState& state);

/// Hook that adds rho_i (W_i - Z_i + U_i) to each constrained layer's weight
/// gradient and reports the penalty value.
StepHooks penalty_hooks(const AdmmState& state);

/// SGD on the augmented loss for `epochs` epochs; returns per-epoch stats.
std::vector<EpochStats> solve_subproblem1(Trainer& trainer, const Dataset& train, const AdmmState& state, int epochs,
                                          double lr, const MaskSet* frozen = nullptr);

/// Z_i = project(W_i + U_i).
void solve_subproblem2(const Network& net, AdmmState& state, const ConstraintMap& constraints,
                       const MaskSet* pinned_zero = nullptr);

/// U_i += W_i - Z_i.
void dual_update(const Network& net, AdmmState& state);

/// ||W_i - Z_i||_F / ||W_i||_F per layer.
std::map<std::string, double> relative_gaps(const Network& net, const AdmmState& state);

struct AdmmResult {
  AdmmState state;
  ConvergenceTrace trace;
};

/// The full loop: init, then {subproblem 1, subproblem 2, dual update,
/// rho <- rho_{k+1}} until every gap is below tol or max_iters is reached.
/// Weights flagged in `pinned_zero` stay zero and receive no updates;
/// `frozen` weights keep their values. The returned W is not yet feasible.
AdmmResult run_admm(Network& net, const Dataset& train, const Dataset* test, const ConstraintMap& constraints,
                    const AdmmConfig& cfg, const MaskSet* pinned_zero = nullptr, const MaskSet* frozen = nullptr);

/// Union of two mask sets (nonzero where either is).
MaskSet merge_masks(const MaskSet* a, const MaskSet* b);

}  // namespace forge
