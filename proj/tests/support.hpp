#pragma once

#include "ssalab/rng.hpp"
#include "ssalab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ssalab::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  CounterRng rng(seed);
  for (Index i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform01();
  return t;
}

using LossBuilder = std::function<Var(Graph&, const std::vector<Var>&)>;

/// Per input: max |analytic - numeric| over its coordinates divided by the
/// largest gradient magnitude seen on it. Returns the worst input. Central
/// differences with step h.
inline double max_fd_rel_error(const LossBuilder& build, std::vector<Tensor>& inputs, double h = 1e-5) {
  for (auto& t : inputs) t.set_requires_grad(true);
  {
    Graph g;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(g.parameter(t));
    g.backward(build(g, vars));
  }
  auto value = [&] {
    Graph g(false);
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(g.constant(t));
    return build(g, vars).item();
  };
  double worst = 0.0;
  for (auto& t : inputs) {
    double err = 0.0, scale = 0.0;
    for (Index i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + h;
      const double up = value();
      t[i] = saved - h;
      const double down = value();
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = t.grad()[i];
      err = std::max(err, std::abs(analytic - numeric));
      scale = std::max({scale, std::abs(analytic), std::abs(numeric)});
    }
    worst = std::max(worst, err / std::max(scale, 1e-12));
  }
  return worst;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ssalab-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace ssalab::testing
