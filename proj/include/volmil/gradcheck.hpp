#ifndef VOLMIL_GRADCHECK_HPP_
#define VOLMIL_GRADCHECK_HPP_

#include "volmil/graph.hpp"
#include "volmil/parameters.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace volmil {

struct GradCheckConfig {
  double step = 1e-5;
  double tolerance = 1e-5;
  /// Entries sampled per tensor; 0 checks every entry.
  Index max_entries_per_tensor = 0;
  bool check_input = true;
  /// Coordinates whose h and h/2 stencils disagree by more than the
  /// tolerance straddle a kink (relu, max-pool tie, hinge) and are skipped.
  /// The check fails if more than this fraction is skipped.
  double max_skip_fraction = 0.05;
  /// Denominator floor of the relative error; gradients below it are held
  /// to an absolute error of tolerance * abs_floor.
  double abs_floor = 1e-8;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_entry;
  Index checked = 0;
  Index skipped_nonsmooth = 0;
  bool passed = false;
};

/// |a - f| / max(|a|, |f|, floor).
inline double grad_rel_error(double analytic, double numeric, double floor = 1e-8) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using LossBuilder = std::function<Var<double>(Graph<double>&, const Var<double>& input)>;

/// Compares analytic gradients of a scalar loss against central finite
/// differences, for every trainable parameter in `store` and (optionally)
/// for the input tensor. Graphs are built in training mode with a fixed
/// seed; a loss that differs between two identical evaluations is rejected.
inline GradCheckReport grad_check(ParameterStore<double>& store, const Tensor<double>& input,
                                  const LossBuilder& build, const GradCheckConfig& cfg = {}) {
  auto evaluate = [&](const Tensor<double>& x) {
    Graph<double> g(Mode::train, cfg.seed);
    return build(g, g.constant(x)).value()[0];
  };
  const double base = evaluate(input);
  if (evaluate(input) != base) throw std::logic_error("grad_check: forward pass is not deterministic");

  store.zero_grad();
  Tensor<double> input_grad;
  {
    Graph<double> g(Mode::train, cfg.seed);
    Var<double> x = g.variable(input);
    Var<double> loss = build(g, x);
    if (loss.size() != 1) throw ShapeError("grad_check: loss must be scalar");
    g.backward(loss);
    input_grad = x.grad();
  }

  GradCheckReport report;
  Rng rng(cfg.seed ^ 0x5eedULL);
  auto pick = [&](Index n) {
    std::vector<Index> idx(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (cfg.max_entries_per_tensor > 0 && n > cfg.max_entries_per_tensor) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(cfg.max_entries_per_tensor));
      std::sort(idx.begin(), idx.end());
    }
    return idx;
  };
  auto probe = [&](const std::string& label, Index i, double analytic, double& slot,
                   const std::function<double()>& eval) {
    const double orig = slot;
    auto central = [&](double h) {
      slot = orig + h;
      const double up = eval();
      slot = orig - h;
      const double down = eval();
      slot = orig;
      return (up - down) / (2.0 * h);
    };
    const double fd = central(cfg.step);
    const double fd_half = central(cfg.step * 0.5);
    if (grad_rel_error(fd, fd_half, cfg.abs_floor) > cfg.tolerance) {
      ++report.skipped_nonsmooth;
      return;
    }
    ++report.checked;
    const double err = grad_rel_error(analytic, fd, cfg.abs_floor);
    if (err >= report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_entry = label + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                           " numeric=" + std::to_string(fd);
    }
  };

  for (Parameter<double>* p : store.parameters()) {
    if (!p->trainable) continue;
    const Tensor<double> grad = p->grad;
    for (Index i : pick(p->value.size()))
      probe(p->name, i, grad[i], p->value[i], [&] { return evaluate(input); });
  }
  if (cfg.check_input) {
    Tensor<double> x = input;
    for (Index i : pick(x.size())) probe("input", i, input_grad[i], x[i], [&] { return evaluate(x); });
  }
  store.zero_grad();

  const Index total = report.checked + report.skipped_nonsmooth;
  const bool skips_ok =
      total == 0 || static_cast<double>(report.skipped_nonsmooth) <= cfg.max_skip_fraction * static_cast<double>(total);
  report.passed = report.checked > 0 && skips_ok && report.max_rel_error <= cfg.tolerance;
  return report;
}

}  // namespace volmil

#endif  // VOLMIL_GRADCHECK_HPP_
