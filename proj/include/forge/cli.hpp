#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forge/baselines.hpp"
#include "forge/checkpoint.hpp"

namespace forge {

/// Effective settings of one run. Every field has a default except data_dir,
/// which the modes that read data require.
struct RunConfig {
  // [run]
  std::string model = "lenet5";
  std::string mode = "train";  // train|prune|quantize|progressive|prune-quant|baseline|eval
  std::uint64_t seed = 0;
  std::filesystem::path out = "forge_out";
  std::filesystem::path data_dir;
  std::filesystem::path checkpoint;  // input model; empty means <out>/baseline.afck
  bool train_first = false;
  // [train]
  int train_epochs = 20;
  double train_lr = 0.01;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t samples_per_epoch = 0;
  // [plan]
  double target_rate = 12.5;
  double prior_rate = 0.0;  // > 0 overrides target_rate: steps target 1.5 * prior * 2^(s-1)
  int steps = 2;
  int bits = 4;
  bool include_zero = false;
  // [admm]
  double rho0 = 1.5e-3;
  double gamma = 2.0;
  double rho_max = 2.0;
  int admm_iters = 12;
  int epochs_per_iter = 10;
  double admm_lr = 0.01;
  double admm_lr_final = 0.0;
  double tol = 1e-2;
  bool rescale_dual = true;
  // [finalize]
  int retrain_epochs = 30;
  double retrain_lr = 1e-3;
  std::optional<double> epsilon;
  // [baseline]
  std::string baseline = "iter_magnitude";
  int rounds = 3;
  int reg_epochs = 10;
  double lambda = 1e-4;
  double baseline_lr = 0.01;

  /// Overall pruning rate the plan ends at.
  double final_rate() const;
  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Every config key as "section.key".
const std::vector<std::string>& config_keys();

/// Sets one "section.key" from its text form; throws ConfigError on an
/// unknown key or a malformed value.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

/// Reads a sectioned key-value file ([section] then key = value lines).
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// Every key with its effective value; reloading it reproduces the run.
std::map<std::string, std::string> config_echo(const RunConfig& cfg);
std::string config_to_ini(const std::map<std::string, std::string>& echo);

Network build_model(const std::string& model, std::uint64_t seed);
/// Per-layer prior rates used to split a pruning budget for `model`.
std::map<std::string, double> model_prior_rates(const std::string& model);

StepSettings step_settings(const RunConfig& cfg);
TrainConfig baseline_train_config(const RunConfig& cfg);

struct TrainOutcome {
  Network net;
  double accuracy = 0.0;
  std::filesystem::path checkpoint;
  CompressionReport report;
};

struct CompressOutcome {
  Network net;
  CompressionState state;
  CompressionReport report;
  std::filesystem::path checkpoint;               // final model
  std::vector<std::filesystem::path> step_checkpoints;
};

struct EvalOutcome {
  double accuracy = 0.0;
  std::vector<LayerStats> layers;
  double overall_rate = 1.0;
  std::string stage;
  double saved_accuracy = -1.0;
  std::string config_hash;
  Footprint footprint;
};

/// Trains the baseline and writes <out>/baseline.afck plus <out>/train_report.{txt,tsv}.
TrainOutcome cmd_train(const RunConfig& cfg);

/// Compresses the baseline checkpoint according to cfg.mode, writing a
/// checkpoint after every completed step, one trace CSV per ADMM solve, the
/// final model and <out>/<mode>_report.{txt,tsv}. A failed step leaves the
/// earlier step checkpoints intact and the report records the error.
CompressOutcome cmd_compress(const RunConfig& cfg);

/// Recomputes accuracy, rates and feasibility from the checkpoint alone.
/// Throws FeasibilityError listing every violated constraint.
EvalOutcome cmd_eval(const std::filesystem::path& checkpoint, const Dataset& test);

std::string format_eval(const EvalOutcome& e);

/// Exit status for an exception escaping a command.
int exit_code_for(const std::exception& e);

}  // namespace forge
