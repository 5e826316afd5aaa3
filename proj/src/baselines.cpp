#include "forge/baselines.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace forge {

const char* to_string(BaselineMethod m) {
  switch (m) {
    case BaselineMethod::iter_magnitude: return "iter_magnitude";
    case BaselineMethod::fixed_l2: return "fixed_l2";
    case BaselineMethod::fixed_l1: return "fixed_l1";
    case BaselineMethod::pgd: return "pgd";
  }
  return "?";
}

BaselineMethod parse_baseline_method(std::string_view s) {
  for (auto m : {BaselineMethod::iter_magnitude, BaselineMethod::fixed_l2, BaselineMethod::fixed_l1,
                 BaselineMethod::pgd}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown baseline method '" + std::string(s) +
                    "' (expected iter_magnitude, fixed_l2, fixed_l1 or pgd)");
}

namespace {

const Cardinality& cardinality_of(const std::string& layer, const ConstraintSpec& spec) {
  const auto* c = std::get_if<Cardinality>(&spec);
  if (!c) throw ConfigError("baselines take cardinality targets; got " + describe(spec) + " for " + layer);
  return *c;
}

void check_targets(const Network& net, const ConstraintMap& targets) {
  if (targets.empty()) throw ConfigError("no pruning targets given");
  CompressionPlan probe;
  probe.steps.push_back(PlanStep{StepMode::prune, targets, {}, {}, {}, 0.0});
  probe.validate(net);
  for (const auto& [layer, spec] : targets) {
    const std::size_t a = cardinality_of(layer, spec).alpha;
    if (a < 1 || a > net.weight(layer).numel()) {
      throw ConfigError("target for " + layer + " keeps " + std::to_string(a) + " of " +
                        std::to_string(net.weight(layer).numel()) + " weights");
    }
  }
}

StepReport make_step(const CompressionReport& report, const ConstraintMap& cons) {
  StepReport sr;
  sr.index = static_cast<int>(report.steps.size());
  sr.mode = StepMode::prune;
  for (const auto& [layer, spec] : cons) sr.constraints[layer] = describe(spec);
  return sr;
}

void close_step(StepReport sr, const Network& net, const CompressionState& state, CompressionReport& report,
                std::chrono::steady_clock::time_point t0) {
  sr.layers = layer_stats(net, &state);
  sr.overall_rate = overall_rate(sr.layers);
  sr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report.final_accuracy = sr.finalize.accuracy_final;
  report.layers = sr.layers;
  report.overall_rate = sr.overall_rate;
  report.steps.push_back(std::move(sr));
}

double eval_or_negative(const Network& net, const Dataset* test) { return test ? evaluate(net, *test) : -1.0; }

}  // namespace

double norm_penalty(const Network& net, const std::set<std::string>& layers, double lambda, RegNorm norm) {
  double s = 0.0;
  for (const auto& l : layers) {
    const Tensor& w = net.weight(l);
    if (norm == RegNorm::l2) {
      s += squared_norm(w);
    } else {
      for (std::size_t i = 0; i < w.numel(); ++i) s += std::abs(double(w[i]));
    }
  }
  return lambda * s;
}

StepHooks norm_penalty_hooks(std::set<std::string> layers, double lambda, RegNorm norm) {
  StepHooks hooks;
  hooks.regularize = [layers = std::move(layers), lambda, norm](const Network& net, std::vector<Tensor>& grads) {
    const float lam = static_cast<float>(lambda);
    for (const auto& l : layers) {
      const Tensor& w = net.weight(l);
      Tensor& g = grads[*net.weight_index(l)];
      for (std::size_t i = 0; i < w.numel(); ++i) {
        if (norm == RegNorm::l2) {
          g[i] += 2.0f * lam * w[i];
        } else if (w[i] != 0.0f) {
          g[i] += w[i] > 0.0f ? lam : -lam;
        }
      }
    }
    return norm_penalty(net, layers, lambda, norm);
  };
  return hooks;
}

ConstraintMap magnitude_round_targets(const Network& net, const ConstraintMap& targets, int round, int rounds) {
  if (rounds < 1) throw ConfigError("iterative pruning needs at least one round");
  if (round < 1 || round > rounds) throw ConfigError("round index out of range");
  ConstraintMap out;
  for (const auto& [layer, spec] : targets) {
    const std::size_t alpha = cardinality_of(layer, spec).alpha;
    const double n = static_cast<double>(net.weight(layer).numel());
    const double frac = std::pow(static_cast<double>(alpha) / n, static_cast<double>(round) / rounds);
    const auto a = round == rounds ? alpha : std::max(alpha, static_cast<std::size_t>(std::llround(n * frac)));
    out[layer] = Cardinality{a};
  }
  return out;
}

void iter_magnitude_prune(Network& net, const ConstraintMap& targets, int rounds, const FinalizeConfig& retrain,
                          const Dataset& train, const Dataset* test, CompressionState& state,
                          CompressionReport& report) {
  check_targets(net, targets);
  if (rounds < 1) throw ConfigError("iterative pruning needs at least one round");
  for (int r = 1; r <= rounds; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const ConstraintMap cons = magnitude_round_targets(net, targets, r, rounds);
    StepReport sr = make_step(report, cons);
    log_info("magnitude pruning round " + std::to_string(r) + "/" + std::to_string(rounds));
    sr.finalize = finalize_prune(net, cons, train, test, retrain, state);
    close_step(std::move(sr), net, state, report, t0);
  }
}

void fixed_reg_prune(Network& net, double lambda, RegNorm norm, const ConstraintMap& targets, int epochs,
                     const LrSchedule& lr, const TrainConfig& train_cfg, const FinalizeConfig& retrain,
                     const Dataset& train, const Dataset* test, CompressionState& state, CompressionReport& report) {
  check_targets(net, targets);
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("regularization strength must be >= 0");
  if (epochs < 0) throw ConfigError("regularized epochs must be >= 0");
  const auto t0 = std::chrono::steady_clock::now();
  StepReport sr = make_step(report, targets);
  if (lambda > 0.0 && epochs > 0) {
    std::set<std::string> layers;
    for (const auto& [l, s] : targets) layers.insert(l);
    const StepHooks hooks = norm_penalty_hooks(layers, lambda, norm);
    Trainer trainer(net, train_cfg);
    for (int e = 0; e < epochs; ++e) {
      const EpochStats st = trainer.run_epoch(train, lr.at(e, epochs), hooks);
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s epoch %d/%d loss=%.4f penalty=%.4g", norm == RegNorm::l1 ? "l1" : "l2",
                    e + 1, epochs, st.task_loss, st.extra_loss);
      log_info(buf);
    }
  }
  sr.accuracy_admm = eval_or_negative(net, test);
  sr.finalize = finalize_prune(net, targets, train, test, retrain, state);
  close_step(std::move(sr), net, state, report, t0);
}

void pgd_prune(Network& net, const ConstraintMap& targets, int epochs, const LrSchedule& lr,
               const TrainConfig& train_cfg, const Dataset& train, const Dataset* test, CompressionState& state,
               CompressionReport& report) {
  check_targets(net, targets);
  if (epochs < 0) throw ConfigError("PGD epochs must be >= 0");
  const auto t0 = std::chrono::steady_clock::now();
  StepReport sr = make_step(report, targets);
  auto project_all = [&targets](Network& n) {
    for (const auto& [layer, spec] : targets) {
      n.weight(layer) = project_cardinality(n.weight(layer), std::get<Cardinality>(spec).alpha);
    }
  };
  project_all(net);
  sr.finalize.accuracy_projected = eval_or_negative(net, test);
  StepHooks hooks;
  hooks.after_step = project_all;
  Trainer trainer(net, train_cfg);
  for (int e = 0; e < epochs; ++e) {
    const EpochStats st = trainer.run_epoch(train, lr.at(e, epochs), hooks);
    sr.finalize.retrain_accuracy.push_back(eval_or_negative(net, test));
    char buf[160];
    std::snprintf(buf, sizeof buf, "pgd epoch %d/%d loss=%.4f test_acc=%.4f", e + 1, epochs, st.task_loss,
                  sr.finalize.retrain_accuracy.back());
    log_info(buf);
  }
  sr.finalize.accuracy_final =
      sr.finalize.retrain_accuracy.empty() ? sr.finalize.accuracy_projected : sr.finalize.retrain_accuracy.back();
  for (const auto& [layer, spec] : targets) {
    const Tensor& w = net.weight(layer);
    Mask m(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) m[i] = w[i] == 0.0f;
    state.pruned[layer] = std::move(m);
    state.constraints[layer] = spec;
  }
  require_feasible(net, state);
  close_step(std::move(sr), net, state, report, t0);
}

void run_baseline(Network& net, const BaselineConfig& cfg, const Dataset& train, const Dataset* test,
                  CompressionState& state, CompressionReport& report) {
  report.method = to_string(cfg.method);
  try {
    switch (cfg.method) {
      case BaselineMethod::iter_magnitude:
        iter_magnitude_prune(net, cfg.targets, cfg.rounds, cfg.finalize, train, test, state, report);
        break;
      case BaselineMethod::fixed_l2:
      case BaselineMethod::fixed_l1:
        fixed_reg_prune(net, cfg.lambda, cfg.method == BaselineMethod::fixed_l1 ? RegNorm::l1 : RegNorm::l2,
                        cfg.targets, cfg.train_epochs, cfg.lr, cfg.train, cfg.finalize, train, test, state, report);
        break;
      case BaselineMethod::pgd:
        pgd_prune(net, cfg.targets, cfg.train_epochs, cfg.lr, cfg.train, train, test, state, report);
        break;
    }
  } catch (const std::exception& e) {
    report.error = e.what();
    throw;
  }
}

}  // namespace forge
