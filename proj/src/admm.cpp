#include "forge/admm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "forge/ops.hpp"

namespace forge {

double RhoSchedule::at(int k) const { return std::min(rho0 * std::pow(gamma, k), rho_max); }

void RhoSchedule::validate() const {
  if (!(rho0 > 0.0)) throw ConfigError("rho0 must be positive");
  if (!(gamma >= 1.0)) throw ConfigError("rho growth factor gamma must be >= 1");
  if (max_iters < 0) throw ConfigError("ADMM iteration count must be >= 0");
  if (!(rho_max >= rho0)) throw ConfigError("rho cap must be >= rho0");
}

double ConvergenceTrace::max_gap(int iteration) const {
  double m = -1.0;
  for (const auto& r : rows) {
    if (r.iteration == iteration) m = std::max(m, r.gap);
  }
  if (m < 0.0) throw InputError("trace has no rows for iteration " + std::to_string(iteration));
  return m;
}

std::vector<double> ConvergenceTrace::max_gaps() const {
  std::vector<double> out;
  for (int k = 0; k < iterations; ++k) out.push_back(max_gap(k));
  return out;
}

std::string ConvergenceTrace::to_csv() const {
  std::ostringstream os;
  os << "iteration,layer,r,rho,loss,accuracy_w,accuracy_proj\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.9g,%.9g,%.9g,%.6f,%.6f\n", r.iteration, r.layer.c_str(), r.gap, r.rho,
                  r.loss, r.accuracy_w, r.accuracy_proj);
    os << buf;
  }
  return os.str();
}

void ConvergenceTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write trace to " + path.string());
  f << to_csv();
  if (!f) throw IoError("write failed for " + path.string());
}

namespace {

const Mask* mask_for(const MaskSet* set, const std::string& layer) {
  if (!set) return nullptr;
  const auto it = set->find(layer);
  return it == set->end() ? nullptr : &it->second;
}

const Tensor& checked_weight(const Network& net, const std::string& layer, const LayerAdmm& st) {
  const Tensor& w = net.weight(layer);
  if (w.shape() != st.z.shape() || w.shape() != st.u.shape()) {
    throw StateError("ADMM state for " + layer + " has shape " + to_string(st.z.shape()) + ", weight is " +
                     to_string(w.shape()));
  }
  return w;
}

}  // namespace

MaskSet merge_masks(const MaskSet* a, const MaskSet* b) {
  MaskSet out;
  if (a) out = *a;
  if (b) {
    for (const auto& [layer, m] : *b) {
      auto [it, inserted] = out.emplace(layer, m);
      if (inserted) continue;
      if (it->second.shape() != m.shape()) throw DimensionError("mask shape mismatch for " + layer);
      for (std::size_t i = 0; i < m.numel(); ++i) it->second[i] = it->second[i] || m[i];
    }
  }
  return out;
}

AdmmState init_admm_state(const Network& net, const ConstraintMap& constraints, const RhoSchedule& rho,
                          const MaskSet* pinned_zero) {
  AdmmState state;
  for (const auto& [layer, spec] : constraints) {
    if (!net.layer(layer).compressible) throw ConfigError("layer " + layer + " is not compressible");
    const Tensor& w = net.weight(layer);
    Projection p = project(w, spec, mask_for(pinned_zero, layer));
    state.layers[layer] = LayerAdmm{std::move(p.value), Tensor(w.shape()), rho.at(0), std::move(p.levels)};
  }
  return state;
}

double admm_penalty_total(const Network& net, const AdmmState& state) {
  double total = 0.0;
  for (const auto& [layer, st] : state.layers) {
    total += ops::admm_penalty(checked_weight(net, layer, st), st.z, st.u, st.rho);
  }
  return total;
}

double augmented_loss(const Network& net, const Tensor& x, std::span<const int> labels, const AdmmState& state) {
  const double task = ops::softmax_cross_entropy(net.forward(x), labels).loss;
  return task + admm_penalty_total(net, state);
}

StepHooks penalty_hooks(const AdmmState& state) {
  StepHooks hooks;
  hooks.regularize = [&state](const Network& net, std::vector<Tensor>& grads) {
    double total = 0.0;
    for (const auto& [layer, st] : state.layers) {
      const Tensor& w = checked_weight(net, layer, st);
      Tensor& g = grads[*net.weight_index(layer)];
      const float rho = static_cast<float>(st.rho);
      double sq = 0.0;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        const float d = w[i] - st.z[i] + st.u[i];
        g[i] += rho * d;
        sq += static_cast<double>(d) * d;
      }
      total += 0.5 * st.rho * sq;
    }
    return total;
  };
  return hooks;
}

std::vector<EpochStats> solve_subproblem1(Trainer& trainer, const Dataset& train, const AdmmState& state, int epochs,
                                          double lr, const MaskSet* frozen) {
  if (epochs < 1) throw ConfigError("epochs per ADMM iteration must be >= 1");
  for (const auto& [layer, st] : state.layers) checked_weight(trainer.network(), layer, st);
  StepHooks hooks = penalty_hooks(state);
  hooks.frozen = frozen;
  std::vector<EpochStats> out;
  for (int e = 0; e < epochs; ++e) {
    try {
      out.push_back(trainer.run_epoch(train, lr, hooks));
    } catch (const NumericError& err) {
      throw NumericError("ADMM iteration " + std::to_string(state.iteration) + ": " + err.what());
    }
  }
  return out;
}

void solve_subproblem2(const Network& net, AdmmState& state, const ConstraintMap& constraints,
                       const MaskSet* pinned_zero) {
  for (auto& [layer, st] : state.layers) {
    const auto it = constraints.find(layer);
    if (it == constraints.end()) throw ConfigError("no constraint given for layer " + layer);
    Tensor v = checked_weight(net, layer, st);
    v += st.u;
    Projection p = project(v, it->second, mask_for(pinned_zero, layer));
    st.z = std::move(p.value);
    st.levels = std::move(p.levels);
  }
}

double AdmmConfig::lr_at(int k) const {
  if (lr_final <= 0.0 || rho.max_iters <= 1) return lr;
  const double t = static_cast<double>(std::min(k, rho.max_iters - 1)) / (rho.max_iters - 1);
  return lr_final + 0.5 * (lr - lr_final) * (1.0 + std::cos(std::numbers::pi * t));
}

void dual_update(const Network& net, AdmmState& state) {
  for (auto& [layer, st] : state.layers) {
    const Tensor& w = checked_weight(net, layer, st);
    for (std::size_t i = 0; i < w.numel(); ++i) st.u[i] += w[i] - st.z[i];
  }
}

std::map<std::string, double> relative_gaps(const Network& net, const AdmmState& state) {
  std::map<std::string, double> out;
  for (const auto& [layer, st] : state.layers) {
    const Tensor& w = checked_weight(net, layer, st);
    const double norm = frobenius_norm(w);
    out[layer] = norm > 0.0 ? std::sqrt(squared_distance(w, st.z)) / norm : std::sqrt(squared_distance(w, st.z));
  }
  return out;
}

AdmmResult run_admm(Network& net, const Dataset& train, const Dataset* test, const ConstraintMap& constraints,
                    const AdmmConfig& cfg, const MaskSet* pinned_zero, const MaskSet* frozen) {
  cfg.rho.validate();
  if (cfg.rho.max_iters > 0 && cfg.epochs_per_iter < 1) throw ConfigError("epochs per ADMM iteration must be >= 1");
  AdmmResult res;
  if (cfg.rho.max_iters == 0) return res;
  res.state = init_admm_state(net, constraints, cfg.rho, pinned_zero);
  const MaskSet held = merge_masks(pinned_zero, frozen);

  Trainer trainer(net, cfg.train);
  for (int k = 0; k < cfg.rho.max_iters; ++k) {
    res.state.iteration = k;
    for (auto& [layer, st] : res.state.layers) {
      const double rho = cfg.rho.at(k);
      if (cfg.rescale_dual && k > 0 && rho != st.rho) {
        const float f = static_cast<float>(st.rho / rho);
        for (std::size_t i = 0; i < st.u.numel(); ++i) st.u[i] *= f;
      }
      st.rho = rho;
    }

    const auto stats = solve_subproblem1(trainer, train, res.state, cfg.epochs_per_iter, cfg.lr_at(k), &held);
    solve_subproblem2(net, res.state, constraints, pinned_zero);
    dual_update(net, res.state);

    double loss = 0.0;
    for (const auto& s : stats) loss += s.task_loss + s.extra_loss;
    loss /= static_cast<double>(stats.size());

    double acc_w = -1.0, acc_p = -1.0;
    if (cfg.evaluate && test) {
      acc_w = evaluate(net, *test);
      Network projected = net;
      for (const auto& [layer, spec] : constraints) {
        projected.weight(layer) = project(net.weight(layer), spec, mask_for(pinned_zero, layer)).value;
      }
      acc_p = evaluate(projected, *test);
    }
    const auto gaps = relative_gaps(net, res.state);
    double worst = 0.0;
    for (const auto& [layer, r] : gaps) {
      res.trace.rows.push_back({k, layer, r, res.state.layers.at(layer).rho, loss, acc_w, acc_p});
      worst = std::max(worst, r);
    }
    res.trace.iterations = k + 1;

    char buf[200];
    std::snprintf(buf, sizeof buf, "admm iter %d rho=%.3g lr=%.2g loss=%.4f max_gap=%.4g acc_w=%.4f acc_proj=%.4f", k,
                  cfg.rho.at(k), cfg.lr_at(k), loss, worst, acc_w, acc_p);
    log_info(buf);
    if (worst < cfg.tol) {
      res.trace.converged = true;
      break;
    }
  }
  if (!res.trace.converged) {
    res.trace.warnings.push_back("ADMM did not reach gap tolerance " + std::to_string(cfg.tol) + " in " +
                                 std::to_string(cfg.rho.max_iters) + " iterations");
    log_info(res.trace.warnings.back());
  }
  return res;
}

}  // namespace forge
