#pragma once

#include "ssalab/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ssalab {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per tensor: half with the largest analytic
  /// gradients, half drawn at random. 0 probes every coordinate.
  Index coords_per_tensor = 24;
  std::uint64_t seed = 0;
};

struct TensorCheck {
  std::string name;
  Index coords = 0;
  double max_abs_error = 0.0;
  /// Max |analytic - numeric| over probed coordinates, divided by the largest
  /// magnitude of either gradient on the same coordinates (floored at 1e-12).
  double rel_error = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  bool passed = true;
  std::string diagnostic;
};

/// Compares reverse-mode gradients of `loss` against central differences.
/// `loss` builds a scalar on a fresh recording graph from the current values
/// of `params`; each parameter must require a gradient to be probed.
GradCheckReport grad_check(const std::function<Var(Graph&)>& loss, std::span<const ParamRef> params,
                           const GradCheckOptions& options = {});

}  // namespace ssalab
