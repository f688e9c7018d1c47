#pragma once

// Central-difference gradient verification. Runs in double precision only:
// single-precision difference noise would swamp any useful tolerance.

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "muxvit/ops.hpp"
#include "muxvit/tape.hpp"

namespace muxvit {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0;
  std::size_t worst_index = 0;
  double ad = 0, fd = 0;  // values at the worst element
};

struct GradCheckReport {
  double eps = 1e-5;
  double tol = 1e-4;
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    for (const auto& e : entries)
      if (!(e.max_rel_err <= tol)) return false;
    return true;
  }
  std::string summary() const {
    std::string s;
    for (const auto& e : entries) {
      s += (e.max_rel_err <= tol ? "  ok   " : "  FAIL ");
      s += e.name + "  max_rel_err=" + std::to_string(e.max_rel_err) +
           " (ad=" + std::to_string(e.ad) + " fd=" + std::to_string(e.fd) + ")\n";
    }
    return s;
  }
};

using NamedParams = std::vector<std::pair<std::string, Tensor<double>>>;
// Builds a scalar loss from parameter vars registered in the given order.
using LossBuilder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline double eval_loss(const LossBuilder& build, const NamedParams& params) {
  Tape<double> tape;
  tape.recording = false;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& [name, tensor] : params) vars.push_back(tape.constant(tensor));
  Var loss = build(tape, vars);
  return tape.val(loss).data[0];
}

inline GradCheckReport finite_diff_check(const LossBuilder& build, NamedParams params,
                                         double eps = 1e-5, double tol = 1e-4) {
  GradCheckReport report;
  report.eps = eps;
  report.tol = tol;

  std::map<std::string, Tensor<double>> ad;
  {
    Tape<double> tape;
    std::vector<Var> vars;
    for (const auto& [name, tensor] : params) vars.push_back(tape.param(name, tensor));
    Var loss = build(tape, vars);
    ad = tape.backward(loss);
  }

  for (auto& [name, tensor] : params) {
    GradCheckEntry entry;
    entry.name = name;
    const Tensor<double>& g = ad.at(name);
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      const double keep = tensor.data[i];
      tensor.data[i] = keep + eps;
      const double up = eval_loss(build, params);
      tensor.data[i] = keep - eps;
      const double dn = eval_loss(build, params);
      tensor.data[i] = keep;
      const double fd = (up - dn) / (2 * eps);
      const double rel = std::fabs(g.data[i] - fd) / (std::fabs(fd) + 1e-8);
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.ad = g.data[i];
        entry.fd = fd;
      }
    }
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace muxvit
