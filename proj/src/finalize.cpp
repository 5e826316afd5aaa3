#include "forge/finalize.hpp"

#include <cmath>
#include <cstdio>

namespace forge {

namespace {

const Mask* find_mask(const MaskSet& set, const std::string& layer) {
  const auto it = set.find(layer);
  return it == set.end() ? nullptr : &it->second;
}

double eval_or_negative(const Network& net, const Dataset* test) { return test ? evaluate(net, *test) : -1.0; }

}  // namespace

MaskSet CompressionState::frozen_masks(const Network& net) const {
  MaskSet out = pruned;
  for (const auto& [layer, lv] : levels) out[layer] = Mask(net.weight(layer).shape(), 1);
  return out;
}

std::vector<std::string> feasibility_violations(const Network& net, const CompressionState& state) {
  std::vector<std::string> out;
  for (const auto& [layer, spec] : state.constraints) {
    const Tensor& w = net.weight(layer);
    const auto lv = state.levels.find(layer);
    const Levels* levels = lv == state.levels.end() ? nullptr : &lv->second;
    if (auto v = check_feasible(w, spec, levels, find_mask(state.pruned, layer))) out.push_back(layer + ": " + *v);
  }
  for (const auto& [layer, mask] : state.pruned) {
    if (state.constraints.count(layer)) continue;
    if (auto v = check_feasible(net.weight(layer), Cardinality{net.weight(layer).numel()}, nullptr, &mask)) {
      out.push_back(layer + ": " + *v);
    }
  }
  return out;
}

void require_feasible(const Network& net, const CompressionState& state) {
  const auto v = feasibility_violations(net, state);
  if (v.empty()) return;
  std::string msg = "constraint violation";
  for (const auto& s : v) msg += "\n  " + s;
  throw FeasibilityError(msg);
}

std::vector<double> masked_retrain(Network& net, const Dataset& train, const Dataset* test, const FinalizeConfig& cfg,
                                   const MaskSet& frozen) {
  std::vector<double> acc;
  if (cfg.retrain_epochs <= 0) return acc;
  Trainer trainer(net, cfg.train);
  StepHooks hooks;
  hooks.frozen = &frozen;
  for (int e = 0; e < cfg.retrain_epochs; ++e) {
    const double lr = cfg.lr.at(e, cfg.retrain_epochs);
    const EpochStats st = trainer.run_epoch(train, lr, hooks);
    acc.push_back(eval_or_negative(net, test));
    char buf[160];
    std::snprintf(buf, sizeof buf, "retrain %d/%d lr=%.2g loss=%.4f test_acc=%.4f", e + 1, cfg.retrain_epochs, lr,
                  st.task_loss, acc.back());
    log_info(buf);
  }
  return acc;
}

FinalizeResult finalize_prune(Network& net, const ConstraintMap& constraints, const Dataset& train,
                              const Dataset* test, const FinalizeConfig& cfg, CompressionState& state,
                              const MaskSet* extra_frozen) {
  for (const auto& [layer, spec] : constraints) {
    if (std::holds_alternative<LevelGrid>(spec)) throw ConfigError("finalize_prune given a level constraint for " + layer);
    Tensor& w = net.weight(layer);
    const Mask* prior = find_mask(state.pruned, layer);
    w = project(w, spec, prior).value;
    Mask mask(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) mask[i] = w[i] == 0.0f || (prior && (*prior)[i]);
    state.pruned[layer] = std::move(mask);
    state.constraints[layer] = spec;
  }
  FinalizeResult res;
  res.accuracy_projected = eval_or_negative(net, test);
  const MaskSet earlier = state.frozen_masks(net);
  res.retrain_accuracy = masked_retrain(net, train, test, cfg, merge_masks(&earlier, extra_frozen));
  res.accuracy_final = res.retrain_accuracy.empty() ? res.accuracy_projected : res.retrain_accuracy.back();
  require_feasible(net, state);
  return res;
}

FinalizeResult finalize_quant(Network& net, const ConstraintMap& constraints, const Dataset& train,
                              const Dataset* test, const FinalizeConfig& cfg, CompressionState& state,
                              const MaskSet* extra_frozen) {
  FinalizeResult res;
  std::map<std::string, Levels> fitted;
  MaskSet phase1;
  Network fully_projected = net;
  for (const auto& [layer, spec] : constraints) {
    const auto* grid = std::get_if<LevelGrid>(&spec);
    if (!grid) throw ConfigError("finalize_quant needs a level constraint for " + layer);
    Tensor& w = net.weight(layer);
    const Mask* pinned = find_mask(state.pruned, layer);
    Levels lv = make_levels(w, grid->bit_width, grid->include_zero, pinned);
    if (lv.degenerate) log_info("layer " + layer + " has no nonzero weights; level scale defaulted to 1");
    const double eps = cfg.epsilon.value_or(0.2 * lv.spacing());
    if (eps < 0.0) throw ConfigError("quantization threshold epsilon must be >= 0");

    const Tensor q = project_levels(w, lv);
    Mask freeze(w.shape());
    std::size_t snapped = 0;
    Tensor& full = fully_projected.weight(layer);
    for (std::size_t i = 0; i < w.numel(); ++i) {
      if (pinned && (*pinned)[i]) {
        w[i] = 0.0f;
        full[i] = 0.0f;
        freeze[i] = 1;
        continue;
      }
      full[i] = q[i];
      if (std::abs(double(w[i]) - double(q[i])) <= eps) {
        w[i] = q[i];
        freeze[i] = 1;
        ++snapped;
      }
    }
    res.epsilon[layer] = eps;
    res.frozen_in_phase1[layer] = snapped;
    phase1[layer] = std::move(freeze);
    fitted[layer] = std::move(lv);
  }
  res.accuracy_projected = eval_or_negative(fully_projected, test);

  const MaskSet earlier = state.frozen_masks(net);
  MaskSet all_frozen = merge_masks(&phase1, &earlier);
  all_frozen = merge_masks(&all_frozen, extra_frozen);
  res.retrain_accuracy = masked_retrain(net, train, test, cfg, all_frozen);

  for (const auto& [layer, spec] : constraints) {
    Tensor& w = net.weight(layer);
    const Mask* pinned = find_mask(state.pruned, layer);
    const Tensor q = project_levels(w, fitted.at(layer));
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = (pinned && (*pinned)[i]) ? 0.0f : q[i];
    state.levels[layer] = fitted.at(layer);
    state.constraints[layer] = spec;
  }
  res.accuracy_final = eval_or_negative(net, test);
  require_feasible(net, state);
  return res;
}

}  // namespace forge
