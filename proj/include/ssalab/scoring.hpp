#pragma once

#include "ssalab/tensor.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ssalab {

/// Attention scoring functions. `hybrid` resolves to a per-head kind.
enum class ScoreKind {
  softmax,
  ssa,
  sa_softmax,
  uniform_avg,
  tanh_score,
  relu_score,
  square_score,
  hybrid,
};

std::string_view to_string(ScoreKind kind);
ScoreKind parse_score_kind(std::string_view name);

/// Whether unmasked weights of this kind always sum to one.
constexpr bool is_normalizing(ScoreKind kind) {
  return kind == ScoreKind::softmax || kind == ScoreKind::ssa || kind == ScoreKind::uniform_avg;
}

struct ScoringConfig {
  ScoreKind kind = ScoreKind::softmax;
  double ssa_b_init = 1.0;
  double ssa_n = 1.5;
  bool ssa_n_trainable = false;
  bool ssa_b_trainable = true;
  std::vector<ScoreKind> hybrid_assignment;

  /// Throws ConfigError. `heads` is checked against the hybrid assignment.
  void validate(Index heads) const;
  ScoreKind head_kind(Index head) const;
  bool uses_ssa() const;
};

/// Positive SSA parameters after mapping from their raw storage.
struct SsaParams {
  double b = 1.0;
  double n = 1.5;
};

// Raw storage keeps b > 0 and n > 1 under unconstrained updates.
inline double ssa_b_from_raw(double raw) { return std::exp(raw); }
inline double ssa_b_to_raw(double b) { return std::log(b); }
inline double ssa_n_from_raw(double raw) { return 1.0 + std::exp(raw); }
inline double ssa_n_to_raw(double n) { return std::log(n - 1.0); }

/// (1 + b|z|)^(sgn(z) n). Throws ConfigError unless b > 0 and n > 1.
template <typename Scalar>
Scalar ssa_base(Scalar z, Scalar b, Scalar n) {
  if (!(b > Scalar(0)) || !(n > Scalar(1))) {
    throw ConfigError("ssa_base requires b > 0 and n > 1");
  }
  using std::abs;
  using std::pow;
  const Scalar s = z > Scalar(0) ? Scalar(1) : (z < Scalar(0) ? Scalar(-1) : Scalar(0));
  return pow(Scalar(1) + b * abs(z), s * n);
}

/// Writes weights for the logits `z` (every entry unmasked) into `w`.
///
/// `kind` must be resolved (not hybrid). Normalizing kinds are max-stabilised:
/// softmax subtracts the max logit and ssa divides every base by the max base,
/// done in the log domain.
template <typename ZDerived, typename WDerived>
void score_kernel(ScoreKind kind, const SsaParams& p, const Eigen::MatrixBase<ZDerived>& z,
                  const Eigen::MatrixBase<WDerived>& w_out) {
  using Scalar = typename ZDerived::Scalar;
  auto& w = const_cast<Eigen::MatrixBase<WDerived>&>(w_out);
  using std::abs;
  using std::exp;
  using std::log1p;
  const Index k = z.size();
  switch (kind) {
    case ScoreKind::softmax: {
      const Scalar m = z.maxCoeff();
      for (Index j = 0; j < k; ++j) w(j) = exp(z(j) - m);
      w /= w.sum();
      return;
    }
    case ScoreKind::ssa: {
      const Scalar b(p.b), n(p.n);
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < k; ++j) {
        const Scalar zj = z(j);
        const Scalar s = zj > Scalar(0) ? Scalar(1) : (zj < Scalar(0) ? Scalar(-1) : Scalar(0));
        w(j) = s * n * log1p(b * abs(zj));
        if (w(j) > m) m = w(j);
      }
      for (Index j = 0; j < k; ++j) w(j) = exp(w(j) - m);
      w /= w.sum();
      return;
    }
    case ScoreKind::sa_softmax: {
      const Scalar m = z.maxCoeff();
      for (Index j = 0; j < k; ++j) w(j) = exp(z(j) - m);
      w /= w.sum();
      for (Index j = 0; j < k; ++j) w(j) *= z(j);
      return;
    }
    case ScoreKind::uniform_avg:
      w.setConstant(Scalar(1) / Scalar(k));
      return;
    case ScoreKind::tanh_score:
    case ScoreKind::relu_score:
    case ScoreKind::square_score: {
      Scalar total(0);
      for (Index j = 0; j < k; ++j) {
        const Scalar zj = z(j);
        const Scalar t = kind == ScoreKind::tanh_score
                             ? Scalar(std::tanh(zj))
                             : (kind == ScoreKind::relu_score ? (zj > Scalar(0) ? zj : Scalar(0))
                                                              : zj * zj);
        w(j) = t;
        total += abs(t);
      }
      if (total > Scalar(0)) {
        w /= total;
      } else {
        w.setConstant(Scalar(1) / Scalar(k));
      }
      return;
    }
    case ScoreKind::hybrid:
      break;
  }
  throw ContractError("score_kernel needs a resolved per-head kind");
}

/// Gradients of a scalar objective with respect to the SSA parameters.
struct SsaGrad {
  double db = 0.0;
  double dn = 0.0;
};

/// Vector-Jacobian product of score_kernel.
///
/// Given logits `z`, weights `w` from score_kernel and upstream gradient
/// `dw`, adds dL/dz into `dz` and dL/db, dL/dn into `pg`.
template <typename ZDerived, typename WDerived, typename GDerived, typename DDerived>
void score_kernel_vjp(ScoreKind kind, const SsaParams& p, const Eigen::MatrixBase<ZDerived>& z,
                      const Eigen::MatrixBase<WDerived>& w, const Eigen::MatrixBase<GDerived>& dw,
                      const Eigen::MatrixBase<DDerived>& dz_out, SsaGrad& pg) {
  using Scalar = typename ZDerived::Scalar;
  auto& dz = const_cast<Eigen::MatrixBase<DDerived>&>(dz_out);
  using std::abs;
  const Index k = z.size();
  switch (kind) {
    case ScoreKind::softmax: {
      const Scalar inner = w.dot(dw);
      for (Index j = 0; j < k; ++j) dz(j) += w(j) * (dw(j) - inner);
      return;
    }
    case ScoreKind::ssa: {
      // d log u_j / dz_j = n b / (1 + b|z_j|), d log u_j / db = n z_j / (1 + b|z_j|),
      // d log u_j / dn = sgn(z_j) log(1 + b|z_j|).
      const Scalar inner = w.dot(dw);
      for (Index j = 0; j < k; ++j) {
        const Scalar zj = z(j);
        const Scalar g = w(j) * (dw(j) - inner);
        const Scalar denom = Scalar(1) + Scalar(p.b) * abs(zj);
        dz(j) += g * Scalar(p.n * p.b) / denom;
        pg.db += static_cast<double>(g * Scalar(p.n) * zj / denom);
        const Scalar s = zj > Scalar(0) ? Scalar(1) : (zj < Scalar(0) ? Scalar(-1) : Scalar(0));
        pg.dn += static_cast<double>(g * s * std::log1p(Scalar(p.b) * abs(zj)));
      }
      return;
    }
    case ScoreKind::sa_softmax: {
      // w = z * q with q = softmax(z).
      const Scalar m = z.maxCoeff();
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> q(k);
      for (Index j = 0; j < k; ++j) q(j) = std::exp(z(j) - m);
      q /= q.sum();
      Scalar inner(0);
      for (Index j = 0; j < k; ++j) inner += dw(j) * z(j) * q(j);
      for (Index j = 0; j < k; ++j) dz(j) += q(j) * (dw(j) + z(j) * dw(j) - inner);
      return;
    }
    case ScoreKind::uniform_avg:
      return;
    case ScoreKind::tanh_score:
    case ScoreKind::relu_score:
    case ScoreKind::square_score: {
      Scalar total(0);
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> t(k), slope(k);
      for (Index j = 0; j < k; ++j) {
        const Scalar zj = z(j);
        if (kind == ScoreKind::tanh_score) {
          t(j) = std::tanh(zj);
          slope(j) = Scalar(1) - t(j) * t(j);
        } else if (kind == ScoreKind::relu_score) {
          t(j) = zj > Scalar(0) ? zj : Scalar(0);
          slope(j) = zj > Scalar(0) ? Scalar(1) : Scalar(0);
        } else {
          t(j) = zj * zj;
          slope(j) = Scalar(2) * zj;
        }
        total += abs(t(j));
      }
      if (!(total > Scalar(0))) return;  // uniform fallback is locally constant
      const Scalar inner = w.dot(dw);
      for (Index j = 0; j < k; ++j) {
        const Scalar st = t(j) > Scalar(0) ? Scalar(1) : (t(j) < Scalar(0) ? Scalar(-1) : Scalar(0));
        dz(j) += (dw(j) - st * inner) / total * slope(j);
      }
      return;
    }
    case ScoreKind::hybrid:
      break;
  }
  throw ContractError("score_kernel_vjp needs a resolved per-head kind");
}

/// Attention weights over K positions; masked positions carry weight 0.
struct ScoreVector {
  Eigen::VectorXd weights;
  std::vector<bool> mask;  // true = position participates
};

/// Scores `z` under `cfg` (head 0 of a hybrid assignment unless `head` is given).
ScoreVector score_vector(const Eigen::Ref<const Eigen::VectorXd>& z, const ScoringConfig& cfg,
                         const std::vector<bool>& mask, Index head = 0);
ScoreVector score_vector(const Eigen::Ref<const Eigen::VectorXd>& z, const ScoringConfig& cfg);

/// One (gap, top-weight) row of a saturation curve.
struct SaturationPoint {
  double gap = 0.0;
  double top_weight = 0.0;
};

/// Weight on position 0 for logits (g, 0, ..., 0) of length `k`, per gap.
std::vector<SaturationPoint> saturation_curve(const ScoringConfig& cfg, Index k,
                                              const std::vector<double>& gaps);

/// d weight_0 / d z_1 at logits (g, 0, ..., 0) of length `k`.
double top_weight_cross_gradient(const ScoringConfig& cfg, Index k, double gap);

enum class HybridVariant { soft_avg, four_fn };

/// Per-head kinds for the two hybrid head partitions.
std::vector<ScoreKind> hybrid_assign(Index heads, HybridVariant variant);

/// CSV with header `gap,weight` (or one weight column per label), 6 significant digits.
std::string saturation_csv(const std::vector<std::pair<std::string, std::vector<SaturationPoint>>>& curves);

/// Row-wise scoring as a differentiable op: every row of `z` is one score vector.
/// `b_raw` and `n_raw` are single-element raw SSA parameters (ignored by other kinds).
Var score_rows(Var z, ScoreKind kind, Var b_raw, Var n_raw);

}  // namespace ssalab
