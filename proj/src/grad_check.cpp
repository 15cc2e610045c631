#include "ssalab/grad_check.hpp"

#include "ssalab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssalab {

namespace {

std::vector<Index> probe_coords(const Eigen::VectorXd& analytic, Index budget, CounterRng& rng) {
  const Index n = analytic.size();
  std::vector<Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), Index{0});
  if (budget <= 0 || budget >= n) return all;
  std::vector<Index> by_size = all;
  const Index top = budget / 2;
  std::partial_sort(by_size.begin(), by_size.begin() + top, by_size.end(),
                    [&](Index a, Index b) { return std::abs(analytic[a]) > std::abs(analytic[b]); });
  std::vector<Index> picked(by_size.begin(), by_size.begin() + top);
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  for (Index i : picked) used[static_cast<std::size_t>(i)] = true;
  while (static_cast<Index>(picked.size()) < budget) {
    const Index i = rng.uniform_int(0, n - 1);
    if (used[static_cast<std::size_t>(i)]) continue;
    used[static_cast<std::size_t>(i)] = true;
    picked.push_back(i);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

double evaluate(const std::function<Var(Graph&)>& loss) {
  Graph g(false);
  return loss(g).item();
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(Graph&)>& loss, std::span<const ParamRef> params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  for (const auto& p : params) {
    if (p.tensor->requires_grad()) p.tensor->zero_grad();
  }
  double base = 0.0;
  {
    Graph g;
    Var l = loss(g);
    base = l.item();
    if (!std::isfinite(base)) {
      report.passed = false;
      report.diagnostic = "loss is not finite at the check point";
      return report;
    }
    g.backward(l);
  }
  CounterRng rng(derive_seed({options.seed, 0x67636BULL}));
  for (const auto& p : params) {
    if (!p.tensor->requires_grad()) continue;
    Tensor& t = *p.tensor;
    const Eigen::VectorXd analytic = t.grad();
    if (!analytic.allFinite()) {
      report.passed = false;
      report.diagnostic = "non-finite analytic gradient in " + p.name;
      return report;
    }
    TensorCheck check;
    check.name = p.name;
    double scale = 0.0;
    for (Index i : probe_coords(analytic, options.coords_per_tensor, rng)) {
      const double saved = t[i];
      t[i] = saved + options.step;
      const double up = evaluate(loss);
      t[i] = saved - options.step;
      const double down = evaluate(loss);
      t[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.passed = false;
        report.diagnostic = "non-finite loss while perturbing " + p.name + "[" + std::to_string(i) + "]";
        return report;
      }
      const double numeric = (up - down) / (2.0 * options.step);
      check.max_abs_error = std::max(check.max_abs_error, std::abs(numeric - analytic[i]));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic[i])});
      check.coords += 1;
    }
    check.rel_error = check.max_abs_error / std::max(scale, 1e-12);
    check.passed = check.rel_error < options.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, check.rel_error);
    report.passed = report.passed && check.passed;
    report.tensors.push_back(std::move(check));
  }
  for (const auto& p : params) {
    if (p.tensor->requires_grad()) p.tensor->zero_grad();
  }
  return report;
}

}  // namespace ssalab
