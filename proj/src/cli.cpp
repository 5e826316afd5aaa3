#include "forge/cli.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "forge/error.hpp"
#include "forge/report.hpp"

namespace forge {

namespace {

namespace fs = std::filesystem;

std::string num(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  }
  return v;
}

long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError(key + ": expected an integer, got '" + s + "'");
  }
  return v;
}

std::size_t parse_count(const std::string& key, const std::string& s) {
  const long long v = parse_int(key, s);
  if (v < 0) throw ConfigError(key + ": must be >= 0, got " + s);
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FORGE_KEY(NAME, FIELD, PARSE, SHOW)                                                 \
  Key {                                                                                     \
    NAME, [](RunConfig& c, const std::string& v) { c.FIELD = PARSE(NAME, v); },           \
        [](const RunConfig& c) { return SHOW(c.FIELD); }                                    \
  }

std::string text(const std::string& key, const std::string& v) {
  (void)key;
  return v;
}
std::string show_text(const std::string& v) { return v; }
std::string show_path(const fs::path& p) { return p.string(); }
std::string show_bool(bool b) { return b ? "true" : "false"; }
std::string show_int(long long v) { return std::to_string(v); }
int parse_i(const std::string& k, const std::string& v) { return static_cast<int>(parse_int(k, v)); }
std::uint64_t parse_u64(const std::string& k, const std::string& v) { return parse_count(k, v); }

const std::vector<Key>& key_table() {
  static const std::vector<Key> keys{
      FORGE_KEY("run.model", model, text, show_text),
      FORGE_KEY("run.mode", mode, text, show_text),
      FORGE_KEY("run.seed", seed, parse_u64, show_int),
      FORGE_KEY("run.out", out, text, show_path),
      FORGE_KEY("run.data_dir", data_dir, text, show_path),
      FORGE_KEY("run.checkpoint", checkpoint, text, show_path),
      FORGE_KEY("run.train_first", train_first, parse_bool, show_bool),
      FORGE_KEY("train.epochs", train_epochs, parse_i, show_int),
      FORGE_KEY("train.lr", train_lr, parse_double, num),
      FORGE_KEY("train.batch_size", batch_size, parse_count, show_int),
      FORGE_KEY("train.momentum", momentum, parse_double, num),
      FORGE_KEY("train.weight_decay", weight_decay, parse_double, num),
      FORGE_KEY("train.samples_per_epoch", samples_per_epoch, parse_count, show_int),
      FORGE_KEY("plan.target_rate", target_rate, parse_double, num),
      FORGE_KEY("plan.prior_rate", prior_rate, parse_double, num),
      FORGE_KEY("plan.steps", steps, parse_i, show_int),
      FORGE_KEY("plan.bits", bits, parse_i, show_int),
      FORGE_KEY("plan.include_zero", include_zero, parse_bool, show_bool),
      FORGE_KEY("admm.rho0", rho0, parse_double, num),
      FORGE_KEY("admm.gamma", gamma, parse_double, num),
      FORGE_KEY("admm.rho_max", rho_max, parse_double, num),
      FORGE_KEY("admm.iters", admm_iters, parse_i, show_int),
      FORGE_KEY("admm.epochs_per_iter", epochs_per_iter, parse_i, show_int),
      FORGE_KEY("admm.lr", admm_lr, parse_double, num),
      FORGE_KEY("admm.lr_final", admm_lr_final, parse_double, num),
      FORGE_KEY("admm.tol", tol, parse_double, num),
      FORGE_KEY("admm.rescale_dual", rescale_dual, parse_bool, show_bool),
      FORGE_KEY("finalize.retrain_epochs", retrain_epochs, parse_i, show_int),
      FORGE_KEY("finalize.lr", retrain_lr, parse_double, num),
      Key{"finalize.epsilon",
          [](RunConfig& c, const std::string& v) {
            if (v.empty() || v == "auto") {
              c.epsilon.reset();
            } else {
              c.epsilon = parse_double("finalize.epsilon", v);
            }
          },
          [](const RunConfig& c) { return c.epsilon ? num(*c.epsilon) : std::string("auto"); }},
      FORGE_KEY("baseline.method", baseline, text, show_text),
      FORGE_KEY("baseline.rounds", rounds, parse_i, show_int),
      FORGE_KEY("baseline.epochs", reg_epochs, parse_i, show_int),
      FORGE_KEY("baseline.lambda", lambda, parse_double, num),
      FORGE_KEY("baseline.lr", baseline_lr, parse_double, num),
  };
  return keys;
}

#undef FORGE_KEY

const std::vector<std::string> kModes{"train", "prune", "quantize", "progressive", "prune-quant", "baseline", "eval"};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void require_data_dir(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) {
    throw ConfigError("--data-dir (run.data_dir) is required for mode '" + cfg.mode +
                      "': point it at the directory holding the MNIST IDX files");
  }
}

std::pair<Dataset, Dataset> load_data(const RunConfig& cfg) {
  require_data_dir(cfg);
  const MnistFiles f = MnistFiles::in_directory(cfg.data_dir);
  Dataset train = load_mnist_idx(f.train_images, f.train_labels, Normalization::mnist(), "train");
  Dataset test = load_mnist_idx(f.test_images, f.test_labels, Normalization::mnist(), "test");
  return {std::move(train), std::move(test)};
}

fs::path baseline_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? cfg.out / "baseline.afck" : cfg.checkpoint;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << s;
  if (!f) throw IoError("write failed for " + p.string());
}

std::string step_stem(int index) { return "step" + std::to_string(index + 1); }

}  // namespace

double RunConfig::final_rate() const {
  if (prior_rate > 0.0) return 1.5 * prior_rate * std::pow(2.0, steps - 1);
  return target_rate;
}

void RunConfig::validate() const {
  require(model == "lenet5", "run.model: unknown model '" + model + "' (available: lenet5)");
  require(std::find(kModes.begin(), kModes.end(), mode) != kModes.end(),
          "run.mode: unknown mode '" + mode +
              "' (train, prune, quantize, progressive, prune-quant, baseline, eval)");
  require(train_epochs >= 1, "train.epochs must be >= 1");
  require(train_lr > 0.0, "train.lr must be > 0");
  require(batch_size >= 1, "train.batch_size must be >= 1");
  require(momentum >= 0.0 && momentum < 1.0, "train.momentum must be in [0, 1)");
  require(weight_decay >= 0.0, "train.weight_decay must be >= 0");
  require(target_rate >= 1.0, "plan.target_rate must be >= 1");
  require(prior_rate == 0.0 || prior_rate >= 1.0, "plan.prior_rate must be 0 (derive from target) or >= 1");
  require(steps >= 1 && steps <= 8, "plan.steps must be in [1, 8]");
  require(bits >= 1 && bits <= 8, "plan.bits must be in [1, 8]");
  require(rho0 > 0.0, "admm.rho0 must be > 0");
  require(gamma >= 1.0, "admm.gamma must be >= 1");
  require(rho_max >= rho0, "admm.rho_max must be >= admm.rho0");
  require(admm_iters >= 0, "admm.iters must be >= 0");
  require(epochs_per_iter >= 1, "admm.epochs_per_iter must be >= 1");
  require(admm_lr > 0.0, "admm.lr must be > 0");
  require(admm_lr_final >= 0.0, "admm.lr_final must be >= 0 (0 keeps admm.lr constant)");
  require(tol > 0.0, "admm.tol must be > 0");
  require(retrain_epochs >= 0, "finalize.retrain_epochs must be >= 0");
  require(retrain_lr > 0.0, "finalize.lr must be > 0");
  require(!epsilon || *epsilon >= 0.0, "finalize.epsilon must be >= 0 or auto");
  parse_baseline_method(baseline);
  require(rounds >= 1, "baseline.rounds must be >= 1");
  require(reg_epochs >= 0, "baseline.epochs must be >= 0");
  require(lambda >= 0.0, "baseline.lambda must be >= 0");
  require(baseline_lr > 0.0, "baseline.lr must be > 0");
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& k : key_table()) v.push_back(k.name);
    return v;
  }();
  return names;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : key_table()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void apply_config_file(RunConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.message() + " (line " + std::to_string(e.line()) +
                      ")");
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(path.string() + ": key '" + section + "' is outside any [section]");
    for (const auto& [key, value] : body) apply_setting(cfg, section + "." + key, value.data());
  }
}

std::map<std::string, std::string> config_echo(const RunConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& k : key_table()) out[k.name] = k.get(cfg);
  return out;
}

std::string config_to_ini(const std::map<std::string, std::string>& echo) {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, value] : echo) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << "[" << s << "]\n";
      section = s;
    }
    os << key.substr(dot + 1) << " = " << value << "\n";
  }
  return os.str();
}

Network build_model(const std::string& model, std::uint64_t seed) {
  if (model == "lenet5") return build_lenet5(seed);
  throw ConfigError("unknown model '" + model + "' (available: lenet5)");
}

std::map<std::string, double> model_prior_rates(const std::string& model) {
  if (model == "lenet5") return lenet5_prior_rates();
  return {};
}

TrainConfig baseline_train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.epochs = cfg.train_epochs;
  t.lr = LrSchedule{cfg.train_lr, {0.5, 0.75}, 0.1};
  t.batch_size = cfg.batch_size;
  t.momentum = cfg.momentum;
  t.weight_decay = cfg.weight_decay;
  t.seed = cfg.seed;
  t.samples_per_epoch = cfg.samples_per_epoch;
  return t;
}

StepSettings step_settings(const RunConfig& cfg) {
  StepSettings s;
  s.admm.rho = RhoSchedule{cfg.rho0, cfg.gamma, cfg.admm_iters, cfg.rho_max};
  s.admm.epochs_per_iter = cfg.epochs_per_iter;
  s.admm.tol = cfg.tol;
  s.admm.lr = cfg.admm_lr;
  s.admm.lr_final = cfg.admm_lr_final;
  s.admm.rescale_dual = cfg.rescale_dual;
  s.admm.train = baseline_train_config(cfg);
  s.finalize.retrain_epochs = cfg.retrain_epochs;
  s.finalize.lr = LrSchedule{cfg.retrain_lr, {0.5, 0.75}, 0.1};
  s.finalize.train = s.admm.train;
  s.finalize.epsilon = cfg.epsilon;
  return s;
}

TrainOutcome cmd_train(const RunConfig& cfg) {
  cfg.validate();
  const auto [train_set, test_set] = load_data(cfg);
  fs::create_directories(cfg.out);
  const auto echo = config_echo(cfg);
  write_text(cfg.out / "config.ini", config_to_ini(echo));

  TrainOutcome o{build_model(cfg.model, cfg.seed), 0.0, cfg.out / "baseline.afck", {}};
  const TrainResult r = train(o.net, train_set, test_set, baseline_train_config(cfg));
  o.accuracy = r.final_accuracy();
  save_checkpoint(o.checkpoint, o.net, {}, echo, "baseline", o.accuracy);

  o.report.method = "train";
  o.report.config = echo;
  o.report.baseline_accuracy = o.accuracy;
  o.report.final_accuracy = o.accuracy;
  o.report.layers = layer_stats(o.net);
  o.report.overall_rate = overall_rate(o.report.layers);
  emit_report(o.report, cfg.out / "train_report");
  return o;
}

CompressOutcome cmd_compress(const RunConfig& cfg) {
  cfg.validate();
  require(cfg.mode != "train" && cfg.mode != "eval", "mode '" + cfg.mode + "' is not a compression mode");
  require_data_dir(cfg);
  const fs::path source = baseline_path(cfg);
  if (!fs::exists(source)) {
    require(cfg.train_first, "no baseline checkpoint at " + source.string() +
                                 "; pass --checkpoint, run --mode train first, or add --train-first");
    RunConfig t = cfg;
    t.mode = "train";
    t.checkpoint.clear();
    cmd_train(t);
  }
  const auto [train_set, test_set] = load_data(cfg);
  fs::create_directories(cfg.out);
  const auto echo = config_echo(cfg);
  write_text(cfg.out / "config.ini", config_to_ini(echo));

  Checkpoint base = load_checkpoint(source);
  CompressOutcome o{std::move(base.net), std::move(base.state), {}, cfg.out / "final.afck", {}};
  require_feasible(o.net, o.state);
  CompressionReport& rep = o.report;
  rep.method = cfg.mode;
  rep.config = echo;
  rep.baseline_accuracy = evaluate(o.net, test_set);

  PlanHooks hooks;
  hooks.after_step = [&](const StepReport& s, const Network& net, const CompressionState& st) {
    const fs::path ck = cfg.out / (step_stem(s.index) + ".afck");
    save_checkpoint(ck, net, st, echo, step_stem(s.index) + " (" + to_string(s.mode) + ")",
                    s.finalize.accuracy_final);
    o.step_checkpoints.push_back(ck);
    if (!s.trace.rows.empty()) s.trace.write_csv(cfg.out / (step_stem(s.index) + "_trace.csv"));
  };

  const StepSettings settings = step_settings(cfg);
  const auto priors = model_prior_rates(cfg.model);
  auto progressive_plan = [&] {
    PruneRateHeuristic h;
    h.layer_prior = priors;
    h.steps = cfg.steps;
    h.r_prior = cfg.final_rate() / (1.5 * std::pow(2.0, cfg.steps - 1));
    return make_prune_plan(o.net, h, settings);
  };

  try {
    if (cfg.mode == "prune") {
      run_plan(o.net, one_shot_prune_plan(o.net, cfg.final_rate(), priors, settings), train_set, &test_set,
               o.state, rep, hooks);
    } else if (cfg.mode == "progressive") {
      run_plan(o.net, progressive_plan(), train_set, &test_set, o.state, rep, hooks);
    } else if (cfg.mode == "quantize") {
      run_plan(o.net, make_quant_plan(o.net, cfg.bits, cfg.include_zero, settings), train_set, &test_set, o.state,
               rep, hooks);
    } else if (cfg.mode == "prune-quant") {
      run_prune_then_quantize(o.net, progressive_plan(), cfg.bits, cfg.include_zero, settings, train_set, &test_set,
                              o.state, rep, hooks);
    } else {
      BaselineConfig b;
      b.method = parse_baseline_method(cfg.baseline);
      for (const auto& [layer, alpha] : scaled_layer_alphas(o.net, priors, cfg.final_rate())) {
        b.targets[layer] = Cardinality{alpha};
      }
      b.rounds = cfg.rounds;
      b.train_epochs = cfg.reg_epochs;
      b.lr = LrSchedule{cfg.baseline_lr, {0.5, 0.75}, 0.1};
      b.lambda = cfg.lambda;
      b.finalize = settings.finalize;
      b.train = settings.admm.train;
      run_baseline(o.net, b, train_set, &test_set, o.state, rep);
      if (!rep.steps.empty()) hooks.after_step(rep.steps.back(), o.net, o.state);
    }
  } catch (const std::exception& e) {
    if (rep.error.empty()) rep.error = e.what();
    for (auto& s : rep.steps) {
      if (!s.trace.rows.empty()) s.trace_file = step_stem(s.index) + "_trace.csv";
    }
    emit_report(rep, cfg.out / (cfg.mode + "_report"));
    throw;
  }
  for (auto& s : rep.steps) {
    if (!s.trace.rows.empty()) s.trace_file = step_stem(s.index) + "_trace.csv";
  }
  rep.final_accuracy = evaluate(o.net, test_set);
  save_checkpoint(o.checkpoint, o.net, o.state, echo, "final (" + cfg.mode + ")", rep.final_accuracy);
  emit_report(rep, cfg.out / (cfg.mode + "_report"));
  return o;
}

EvalOutcome cmd_eval(const fs::path& checkpoint, const Dataset& test) {
  const Checkpoint c = load_checkpoint(checkpoint);
  const auto violations = feasibility_violations(c.net, c.state);
  if (!violations.empty()) {
    std::string msg = checkpoint.string() + " violates " + std::to_string(violations.size()) + " constraint(s):";
    for (const auto& v : violations) msg += "\n  " + v;
    throw FeasibilityError(msg);
  }
  EvalOutcome e;
  e.accuracy = evaluate(c.net, test);
  e.layers = layer_stats(c.net, &c.state);
  e.overall_rate = overall_rate(e.layers);
  e.stage = c.stage;
  e.saved_accuracy = c.accuracy;
  e.config_hash = c.config_hash;
  e.footprint = c.footprint;
  return e;
}

std::string format_eval(const EvalOutcome& e) {
  std::ostringstream os;
  char buf[200];
  os << "stage: " << (e.stage.empty() ? "-" : e.stage) << "\n";
  os << "config hash: " << e.config_hash << "\n";
  std::snprintf(buf, sizeof buf, "accuracy: %.2f%% (saved %.2f%%)\n", 100.0 * e.accuracy, 100.0 * e.saved_accuracy);
  os << buf;
  std::snprintf(buf, sizeof buf, "overall rate: %.4fx\n", e.overall_rate);
  os << buf;
  for (const auto& l : e.layers) {
    std::snprintf(buf, sizeof buf, "  %-8s %8zu weights %8zu nonzero  rate %10.4fx  %2d bits\n", l.layer.c_str(),
                  l.numel, l.nonzero, l.rate, l.bits);
    os << buf;
  }
  os << "feasibility: every constraint holds\n";
  std::snprintf(buf, sizeof buf, "storage: %zu payload bytes vs %zu dense bytes (%.2f%%)\n", e.footprint.payload_bytes,
                e.footprint.dense_bytes, 100.0 * double(e.footprint.payload_bytes) / double(e.footprint.dense_bytes));
  os << buf;
  return os.str();
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const InputError*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const CorruptionError*>(&e) || dynamic_cast<const VersionError*>(&e)) return 4;
  if (dynamic_cast<const FeasibilityError*>(&e)) return 5;
  if (dynamic_cast<const NumericError*>(&e)) return 6;
  return 1;
}

}  // namespace forge
