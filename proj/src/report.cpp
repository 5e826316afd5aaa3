#include "forge/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "forge/error.hpp"

namespace forge {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string rate_str(double r) { return std::isinf(r) ? "inf" : fmt("%.2fx", r); }

std::string acc_str(double a) { return a < 0.0 ? "n/a" : fmt("%.2f%%", 100.0 * a); }

std::string loss_str(double baseline, double acc) {
  if (baseline < 0.0 || acc < 0.0) return "n/a";
  return fmt("%+.2f%%", 100.0 * (baseline - acc));
}

// "4" when every layer agrees, else "conv1:1,fc1:4,...".
std::string bits_str(const std::vector<LayerStats>& layers) {
  if (layers.empty()) return "32";
  bool same = true;
  for (const auto& l : layers) same = same && l.bits == layers.front().bits;
  if (same) return std::to_string(layers.front().bits);
  std::string s;
  for (const auto& l : layers) s += (s.empty() ? "" : ",") + l.layer + ":" + std::to_string(l.bits);
  return s;
}

std::string layer_rates_str(const std::vector<LayerStats>& layers) {
  std::string s;
  for (const auto& l : layers) s += (s.empty() ? "" : ";") + l.layer + "=" + (std::isinf(l.rate) ? "inf" : fmt("%.4f", l.rate));
  return s;
}

std::string pad(std::string s, std::size_t w) {
  if (s.size() < w) s.append(w - s.size(), ' ');
  return s;
}

}  // namespace

std::string format_report_table(const CompressionReport& report) {
  std::ostringstream os;
  os << "method: " << (report.method.empty() ? "-" : report.method) << "\n";
  if (!report.config.empty()) {
    os << "config:\n";
    for (const auto& [k, v] : report.config) os << "  " << k << " = " << v << "\n";
  }
  std::vector<std::string> layer_names;
  const auto& ref = !report.layers.empty() ? report.layers
                    : report.steps.empty() ? std::vector<LayerStats>{}
                                           : report.steps.back().layers;
  for (const auto& l : ref) layer_names.push_back(l.layer);

  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"step", "mode", "rate"};
  for (const auto& n : layer_names) head.push_back(n);
  for (const char* h : {"bits", "accuracy", "loss", "admm iters"}) head.push_back(h);
  rows.push_back(head);

  std::vector<std::string> base{"base", "-", rate_str(1.0)};
  for (std::size_t i = 0; i < layer_names.size(); ++i) base.push_back(rate_str(1.0));
  for (const auto& c : {std::string("32"), acc_str(report.baseline_accuracy), std::string("-"), std::string("-")}) {
    base.push_back(c);
  }
  rows.push_back(base);

  for (const auto& s : report.steps) {
    std::vector<std::string> r{std::to_string(s.index + 1), to_string(s.mode), rate_str(s.overall_rate)};
    for (const auto& n : layer_names) {
      std::string cell = "-";
      for (const auto& l : s.layers) {
        if (l.layer == n) cell = rate_str(l.rate);
      }
      r.push_back(cell);
    }
    r.push_back(bits_str(s.layers));
    r.push_back(acc_str(s.finalize.accuracy_final));
    r.push_back(loss_str(report.baseline_accuracy, s.finalize.accuracy_final));
    r.push_back(s.trace.iterations ? std::to_string(s.trace.iterations) + (s.trace.converged ? "" : "*") : "-");
    rows.push_back(r);
  }

  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) line += pad(r[c], width[c] + 2);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << "\n";
  }
  bool any_unconverged = false;
  for (const auto& s : report.steps) any_unconverged = any_unconverged || (s.trace.iterations && !s.trace.converged);
  if (any_unconverged) os << "* ADMM stopped at the iteration limit before reaching the gap tolerance\n";
  os << "final: rate " << rate_str(report.overall_rate) << ", accuracy " << acc_str(report.final_accuracy)
     << ", loss vs baseline " << loss_str(report.baseline_accuracy, report.final_accuracy) << "\n";
  if (!report.error.empty()) os << "error: " << report.error << "\n";
  return os.str();
}

std::string format_report_records(const CompressionReport& report) {
  std::ostringstream os;
  os << "method\tstep\tmode\toverall_rate\tlayer_rates\tbits\taccuracy\taccuracy_loss\tadmm_iterations\tconverged\t"
        "trace_file\n";
  const std::string method = report.method.empty() ? "-" : report.method;
  auto num = [](double v) { return v < 0.0 ? std::string("") : fmt("%.6f", v); };
  auto loss = [&](double acc) {
    return report.baseline_accuracy < 0.0 || acc < 0.0 ? std::string("") : fmt("%.6f", report.baseline_accuracy - acc);
  };
  os << method << "\tbaseline\t-\t1.0000\t\t32\t" << num(report.baseline_accuracy) << "\t\t\t\t\n";
  for (const auto& s : report.steps) {
    os << method << "\t" << s.index + 1 << "\t" << to_string(s.mode) << "\t"
       << (std::isinf(s.overall_rate) ? "inf" : fmt("%.4f", s.overall_rate)) << "\t" << layer_rates_str(s.layers)
       << "\t" << bits_str(s.layers) << "\t" << num(s.finalize.accuracy_final) << "\t"
       << loss(s.finalize.accuracy_final) << "\t" << s.trace.iterations << "\t" << (s.trace.converged ? 1 : 0)
       << "\t" << s.trace_file << "\n";
  }
  return os.str();
}

void emit_report(const CompressionReport& report, const std::filesystem::path& stem) {
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p);
    if (!f) throw IoError("cannot write report " + p.string());
    f << text;
    if (!f) throw IoError("write failed for " + p.string());
  };
  auto txt = stem, tsv = stem;
  txt += ".txt";
  tsv += ".tsv";
  write(txt, format_report_table(report));
  write(tsv, format_report_records(report));
}

}  // namespace forge
