#include "forge/progressive.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace forge {

const char* to_string(StepMode mode) { return mode == StepMode::prune ? "prune" : "quantize"; }

namespace {

void require_compressible(const Network& net, const std::string& layer) {
  const auto& layers = net.layers();
  const auto it = std::find_if(layers.begin(), layers.end(), [&](const LayerSpec& l) { return l.name == layer; });
  if (it == layers.end()) throw ConfigError("unknown layer " + layer);
  if (!it->compressible) throw ConfigError("layer " + layer + " is not compressible");
}

// Upper bound of a pruning constraint used for the monotonicity check.
std::optional<std::size_t> prune_budget(const ConstraintSpec& spec) {
  if (const auto* c = std::get_if<Cardinality>(&spec)) return c->alpha;
  if (const auto* c = std::get_if<ColumnGroup>(&spec)) return c->kept_columns;
  return std::nullopt;
}

MaskSet full_masks(const Network& net, const std::set<std::string>& layers) {
  MaskSet out;
  for (const auto& l : layers) out[l] = Mask(net.weight(l).shape(), 1);
  return out;
}

}  // namespace

void CompressionPlan::validate(const Network& net) const {
  std::map<std::string, std::pair<std::size_t, std::size_t>> last_budget;  // layer -> (kind index, budget)
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const PlanStep& step = steps[s];
    const std::string where = "plan step " + std::to_string(s + 1) + ": ";
    if (step.constraints.empty()) throw ConfigError(where + "no layers to compress");
    for (const auto& l : step.frozen_layers) {
      require_compressible(net, l);
      if (step.constraints.count(l)) throw ConfigError(where + "layer " + l + " is both frozen and compressed");
    }
    for (const auto& [layer, spec] : step.constraints) {
      require_compressible(net, layer);
      const bool is_quant = std::holds_alternative<LevelGrid>(spec);
      if (is_quant != (step.mode == StepMode::quantize)) {
        throw ConfigError(where + describe(spec) + " on " + layer + " does not fit a " + to_string(step.mode) + " step");
      }
      const auto budget = prune_budget(spec);
      if (!budget) continue;
      const std::size_t kind = spec.index();
      const auto it = last_budget.find(layer);
      if (it != last_budget.end() && it->second.first == kind && *budget > it->second.second) {
        throw ConfigError(where + "pruning budget of " + layer + " grows from " + std::to_string(it->second.second) +
                          " to " + std::to_string(*budget));
      }
      last_budget[layer] = {kind, *budget};
    }
    step.admm.rho.validate();
  }
}

std::map<std::string, double> lenet5_prior_rates() {
  return {{"conv1", 1.0 / 0.66}, {"conv2", 1.0 / 0.12}, {"fc1", 1.0 / 0.08}, {"fc2", 1.0 / 0.19}};
}

std::map<std::string, std::size_t> scaled_layer_alphas(const Network& net,
                                                       const std::map<std::string, double>& layer_prior,
                                                       double target_rate) {
  if (!(target_rate >= 1.0) || !std::isfinite(target_rate)) {
    throw ConfigError("target pruning rate must be a finite value >= 1");
  }
  if (layer_prior.empty()) throw ConfigError("no layers to prune");
  struct Row {
    std::string name;
    double numel, kept_prior, alpha = 0.0;
    bool conv;
  };
  std::vector<Row> rows;
  double total = 0.0;
  for (const auto& [layer, rate] : layer_prior) {
    require_compressible(net, layer);
    if (!(rate >= 1.0)) throw ConfigError("prior rate of " + layer + " must be >= 1");
    const double n = static_cast<double>(net.weight(layer).numel());
    rows.push_back({layer, n, n / rate, 0.0, net.layer(layer).kind == LayerKind::conv});
    total += n;
  }
  const double budget = std::max(std::round(total / target_rate), static_cast<double>(rows.size()));

  // sum_i clamp(kept_i / c, 1, numel_i) is nonincreasing in c; bisect on log c
  auto kept_at = [&](double c) {
    double s = 0.0;
    for (auto& r : rows) {
      r.alpha = std::clamp(r.kept_prior / c, 1.0, r.numel);
      s += r.alpha;
    }
    return s;
  };
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (kept_at(std::exp(mid)) > budget ? lo : hi) = mid;
  }
  kept_at(std::exp(hi));

  double deficit = 0.0, dense_total = 0.0;
  for (auto& r : rows) {
    if (r.conv) {
      const double floor = std::max(1.0, std::ceil(0.01 * r.numel));
      if (r.alpha < floor) {
        deficit += floor - r.alpha;
        r.alpha = floor;
      }
    } else {
      dense_total += r.alpha;
    }
  }
  if (deficit > 0.0) {
    if (dense_total <= 0.0) throw ConfigError("target rate needs conv layers below 1% and there is no dense layer");
    for (auto& r : rows) {
      if (r.conv) continue;
      r.alpha -= deficit * r.alpha / dense_total;
      if (r.alpha < 1.0) {
        throw ConfigError("target rate " + std::to_string(target_rate) + " leaves layer " + r.name +
                          " with no weights");
      }
    }
  }

  // integer kept counts summing to the budget: floor, then largest remainders
  std::vector<std::size_t> alpha(rows.size());
  double assigned = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    alpha[i] = static_cast<std::size_t>(std::floor(rows[i].alpha + 1e-9));
    assigned += static_cast<double>(alpha[i]);
  }
  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return rows[a].alpha - std::floor(rows[a].alpha) > rows[b].alpha - std::floor(rows[b].alpha);
  });
  for (std::size_t k = 0; assigned < budget && k < order.size(); ++k) {
    const std::size_t i = order[k];
    if (static_cast<double>(alpha[i]) < rows[i].numel && rows[i].alpha > std::floor(rows[i].alpha)) {
      ++alpha[i];
      assigned += 1.0;
    }
  }

  std::map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i) out[rows[i].name] = alpha[i];
  return out;
}

namespace {

std::map<std::string, double> layers_or_uniform(const Network& net, const std::map<std::string, double>& prior) {
  if (!prior.empty()) return prior;
  std::map<std::string, double> out;
  for (const auto& l : net.compressible_layers()) out[l] = 1.0;
  return out;
}

PlanStep prune_step(const Network& net, const std::map<std::string, double>& prior, double rate,
                    const StepSettings& settings) {
  PlanStep step;
  step.mode = StepMode::prune;
  step.admm = settings.admm;
  step.finalize = settings.finalize;
  step.target_rate = rate;
  for (const auto& [layer, alpha] : scaled_layer_alphas(net, prior, rate)) step.constraints[layer] = Cardinality{alpha};
  return step;
}

}  // namespace

CompressionPlan make_prune_plan(const Network& net, const PruneRateHeuristic& h, const StepSettings& settings) {
  if (!(h.r_prior >= 1.0)) throw ConfigError("prior pruning rate must be >= 1");
  if (h.steps < 1) throw ConfigError("a pruning plan needs at least one step");
  const auto prior = layers_or_uniform(net, h.layer_prior);
  CompressionPlan plan;
  double rate = 1.5 * h.r_prior;
  for (int s = 0; s < h.steps; ++s, rate *= 2.0) plan.steps.push_back(prune_step(net, prior, rate, settings));
  plan.validate(net);
  return plan;
}

CompressionPlan prune_plan_for_target(const Network& net, double final_rate,
                                      const std::map<std::string, double>& layer_prior,
                                      const StepSettings& settings) {
  if (!(final_rate >= 3.0)) throw ConfigError("a two-step plan needs a final rate >= 3");
  return make_prune_plan(net, PruneRateHeuristic{final_rate / 3.0, layer_prior, 2}, settings);
}

CompressionPlan one_shot_prune_plan(const Network& net, double final_rate,
                                    const std::map<std::string, double>& layer_prior, const StepSettings& settings) {
  CompressionPlan plan;
  plan.steps.push_back(prune_step(net, layers_or_uniform(net, layer_prior), final_rate, settings));
  plan.validate(net);
  return plan;
}

CompressionPlan make_quant_plan(const Network& net, int bit_width, bool include_zero, const StepSettings& settings) {
  if (bit_width < 1 || bit_width > 8) throw ConfigError("bit width must be in [1, 8], got " + std::to_string(bit_width));
  const auto layers = net.compressible_layers();
  if (layers.empty()) throw ConfigError("network has no compressible layers");
  const LevelGrid grid{bit_width, include_zero};
  auto base = [&] {
    PlanStep s;
    s.mode = StepMode::quantize;
    s.admm = settings.admm;
    s.finalize = settings.finalize;
    return s;
  };
  CompressionPlan plan;
  if (layers.size() < 3) {
    PlanStep s = base();
    for (const auto& l : layers) s.constraints[l] = grid;
    plan.steps.push_back(std::move(s));
  } else {
    PlanStep middle = base(), ends = base();
    for (std::size_t i = 1; i + 1 < layers.size(); ++i) {
      middle.constraints[layers[i]] = grid;
      ends.frozen_layers.insert(layers[i]);
    }
    ends.constraints[layers.front()] = grid;
    ends.constraints[layers.back()] = grid;
    plan.steps.push_back(std::move(middle));
    plan.steps.push_back(std::move(ends));
  }
  plan.validate(net);
  return plan;
}

std::vector<LayerStats> layer_stats(const Network& net, const CompressionState* state) {
  std::vector<LayerStats> out;
  for (const auto& l : net.compressible_layers()) {
    LayerStats s;
    s.layer = l;
    s.numel = net.weight(l).numel();
    s.nonzero = count_nonzero(net.weight(l));
    s.rate = s.nonzero ? static_cast<double>(s.numel) / static_cast<double>(s.nonzero)
                       : std::numeric_limits<double>::infinity();
    if (state) {
      const auto it = state->levels.find(l);
      if (it != state->levels.end()) {
        s.levels = it->second.values.size();
        s.bits = std::max(1, static_cast<int>(std::ceil(std::log2(static_cast<double>(s.levels)))));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

double overall_rate(const std::vector<LayerStats>& stats) {
  std::size_t n = 0, nz = 0;
  for (const auto& s : stats) {
    n += s.numel;
    nz += s.nonzero;
  }
  return nz ? static_cast<double>(n) / static_cast<double>(nz) : std::numeric_limits<double>::infinity();
}

double CompressionReport::accuracy_loss() const {
  if (baseline_accuracy < 0.0) return std::numeric_limits<double>::quiet_NaN();
  return baseline_accuracy - final_accuracy;
}

void run_plan(Network& net, const CompressionPlan& plan, const Dataset& train, const Dataset* test,
              CompressionState& state, CompressionReport& report, const PlanHooks& hooks) {
  try {
    plan.validate(net);
    for (const PlanStep& step : plan.steps) {
      const auto t0 = std::chrono::steady_clock::now();
      StepReport sr;
      sr.index = static_cast<int>(report.steps.size());
      sr.mode = step.mode;
      sr.target_rate = step.target_rate;
      for (const auto& [layer, spec] : step.constraints) sr.constraints[layer] = describe(spec);
      log_info("step " + std::to_string(sr.index + 1) + " (" + to_string(step.mode) + ")");

      const MaskSet extra = full_masks(net, step.frozen_layers);
      const MaskSet earlier = state.frozen_masks(net);
      const MaskSet held = merge_masks(&earlier, &extra);
      AdmmResult admm = run_admm(net, train, test, step.constraints, step.admm, &state.pruned, &held);
      sr.trace = std::move(admm.trace);
      if (!sr.trace.rows.empty() && sr.trace.rows.back().accuracy_w >= 0.0) {
        sr.accuracy_admm = sr.trace.rows.back().accuracy_w;
      } else if (test) {
        sr.accuracy_admm = evaluate(net, *test);
      }

      sr.finalize = step.mode == StepMode::prune
                        ? finalize_prune(net, step.constraints, train, test, step.finalize, state, &extra)
                        : finalize_quant(net, step.constraints, train, test, step.finalize, state, &extra);
      sr.layers = layer_stats(net, &state);
      sr.overall_rate = overall_rate(sr.layers);
      sr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

      char buf[160];
      std::snprintf(buf, sizeof buf, "step %d done: rate %.2fx, accuracy %.4f (%.0f s)", sr.index + 1,
                    sr.overall_rate, sr.finalize.accuracy_final, sr.seconds);
      log_info(buf);
      report.steps.push_back(std::move(sr));
      report.final_accuracy = report.steps.back().finalize.accuracy_final;
      if (hooks.after_step) hooks.after_step(report.steps.back(), net, state);
    }
  } catch (const std::exception& e) {
    report.error = e.what();
    report.layers = layer_stats(net, &state);
    report.overall_rate = overall_rate(report.layers);
    throw;
  }
  report.layers = layer_stats(net, &state);
  report.overall_rate = overall_rate(report.layers);
}

void run_prune_then_quantize(Network& net, const CompressionPlan& prune_plan, int bit_width, bool include_zero,
                             const StepSettings& quant_settings, const Dataset& train, const Dataset* test,
                             CompressionState& state, CompressionReport& report, const PlanHooks& hooks) {
  const CompressionPlan quant = make_quant_plan(net, bit_width, include_zero, quant_settings);
  run_plan(net, prune_plan, train, test, state, report, hooks);
  run_plan(net, quant, train, test, state, report, hooks);
}

}  // namespace forge
