// admm-forge: train, compress and inspect LeNet-5 models on MNIST.
#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "forge/cli.hpp"
#include "forge/error.hpp"
#include "forge/report.hpp"

using namespace forge;

namespace {

struct Flag {
  const char* name;
  const char* key;
  const char* help;
};

// Flags that map one-to-one onto config keys; anything given here overrides
// the config file.
const Flag kFlags[] = {
    {"--model", "run.model", "Model architecture (lenet5)"},
    {"--mode", "run.mode", "train|prune|quantize|progressive|prune-quant|baseline|eval"},
    {"--seed", "run.seed", "Seed for initialization and data shuffling"},
    {"--out", "run.out", "Output directory for checkpoints, traces and reports"},
    {"--data-dir", "run.data_dir", "Directory holding the MNIST IDX files"},
    {"--checkpoint", "run.checkpoint", "Input checkpoint (default <out>/baseline.afck)"},
    {"--train-epochs", "train.epochs", "Baseline training epochs"},
    {"--train-lr", "train.lr", "Baseline learning rate"},
    {"--batch-size", "train.batch_size", "Minibatch size"},
    {"--momentum", "train.momentum", "SGD momentum"},
    {"--weight-decay", "train.weight_decay", "L2 weight decay"},
    {"--samples-per-epoch", "train.samples_per_epoch", "Samples per epoch, 0 for the full set"},
    {"--target-rate", "plan.target_rate", "Overall pruning rate to reach"},
    {"--prior-rate", "plan.prior_rate", "Prior-art rate; step s targets 1.5 * prior * 2^(s-1)"},
    {"--steps", "plan.steps", "Progressive pruning steps"},
    {"--bits", "plan.bits", "Quantization bit width"},
    {"--rho0", "admm.rho0", "Initial ADMM penalty"},
    {"--gamma", "admm.gamma", "Penalty growth per ADMM iteration"},
    {"--rho-max", "admm.rho_max", "Penalty cap"},
    {"--admm-iters", "admm.iters", "Maximum ADMM iterations per step"},
    {"--epochs-per-iter", "admm.epochs_per_iter", "Training epochs per ADMM iteration"},
    {"--admm-lr", "admm.lr", "Learning rate during ADMM"},
    {"--admm-lr-final", "admm.lr_final", "ADMM learning rate at the last iteration (cosine decay); 0 keeps it constant"},
    {"--rescale-dual", "admm.rescale_dual", "Rescale U by rho_old/rho_new when rho grows (true|false)"},
    {"--tol", "admm.tol", "Stop once every relative gap ||W-Z||/||W|| is below this"},
    {"--retrain-epochs", "finalize.retrain_epochs", "Masked retraining epochs after each projection"},
    {"--retrain-lr", "finalize.lr", "Masked retraining learning rate"},
    {"--epsilon", "finalize.epsilon", "Quantization freeze threshold, or auto for 0.2 x level spacing"},
    {"--baseline", "baseline.method", "iter_magnitude|fixed_l2|fixed_l1|pgd"},
    {"--rounds", "baseline.rounds", "Prune/retrain rounds for iter_magnitude"},
    {"--reg-epochs", "baseline.epochs", "Regularized (fixed_l1/l2) or total (pgd) epochs"},
    {"--lambda", "baseline.lambda", "Fixed regularization strength"},
    {"--baseline-lr", "baseline.lr", "Learning rate of the baseline methods"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ADMM weight pruning and quantization for LeNet-5 on MNIST"};
  app.set_version_flag("--version", "admm-forge 1.0");
  std::string config_file;
  app.add_option("--config", config_file, "Sectioned key = value file; flags override it");
  std::map<std::string, std::string> given;
  for (const auto& f : kFlags) app.add_option(f.name, given[f.key], f.help);
  bool train_first = false, include_zero = false, quiet = false, dump = false;
  auto* tf = app.add_flag("--train-first", train_first, "Train a baseline first when no checkpoint exists");
  auto* iz = app.add_flag("--include-zero", include_zero, "Put 0 on the quantization grid");
  app.add_flag("--quiet", quiet, "Only print the final summary");
  app.add_flag("--print-config", dump, "Print the effective config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) apply_config_file(cfg, config_file);
    for (const auto& f : kFlags) {
      if (app.get_option(f.name)->count() > 0) apply_setting(cfg, f.key, given[f.key]);
    }
    if (tf->count() > 0) cfg.train_first = train_first;
    if (iz->count() > 0) cfg.include_zero = include_zero;
    cfg.validate();
    set_log_level(quiet ? 0 : 1);

    if (dump) {
      std::cout << config_to_ini(config_echo(cfg));
      return 0;
    }
    if (cfg.mode == "train") {
      const TrainOutcome o = cmd_train(cfg);
      std::cout << format_report_table(o.report) << "checkpoint: " << o.checkpoint.string() << "\n";
    } else if (cfg.mode == "eval") {
      if (cfg.data_dir.empty()) throw ConfigError("--data-dir (run.data_dir) is required for mode 'eval'");
      const auto f = MnistFiles::in_directory(cfg.data_dir);
      const Dataset test = load_mnist_idx(f.test_images, f.test_labels, Normalization::mnist(), "test");
      const auto path = cfg.checkpoint.empty() ? cfg.out / "final.afck" : cfg.checkpoint;
      std::cout << "checkpoint: " << path.string() << "\n" << format_eval(cmd_eval(path, test));
    } else {
      const CompressOutcome o = cmd_compress(cfg);
      std::cout << format_report_table(o.report) << "checkpoint: " << o.checkpoint.string() << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "admm-forge: %s\n", e.what());
    return exit_code_for(e);
  }
}
