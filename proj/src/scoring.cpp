#include "ssalab/scoring.hpp"

#include <array>
#include <cstdio>
#include <sstream>

namespace ssalab {

namespace {

constexpr std::array<std::pair<ScoreKind, std::string_view>, 8> kKindNames{{
    {ScoreKind::softmax, "softmax"},
    {ScoreKind::ssa, "ssa"},
    {ScoreKind::sa_softmax, "sa_softmax"},
    {ScoreKind::uniform_avg, "uniform_avg"},
    {ScoreKind::tanh_score, "tanh_score"},
    {ScoreKind::relu_score, "relu_score"},
    {ScoreKind::square_score, "square_score"},
    {ScoreKind::hybrid, "hybrid"},
}};

std::string six_digits(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::string_view to_string(ScoreKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

ScoreKind parse_score_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw ConfigError("unknown scoring kind '" + std::string(name) + "'");
}

void ScoringConfig::validate(Index heads) const {
  if (!(ssa_b_init > 0.0)) throw ConfigError("scoring.ssa_b_init must be > 0");
  if (!(ssa_n > 1.0)) throw ConfigError("scoring.ssa_n must be > 1");
  if (kind == ScoreKind::hybrid) {
    if (static_cast<Index>(hybrid_assignment.size()) != heads) {
      throw ConfigError("scoring.hybrid_assignment has " + std::to_string(hybrid_assignment.size()) +
                        " entries for " + std::to_string(heads) + " heads");
    }
    for (ScoreKind k : hybrid_assignment) {
      if (k == ScoreKind::hybrid) throw ConfigError("scoring.hybrid_assignment cannot nest hybrid");
    }
  }
}

ScoreKind ScoringConfig::head_kind(Index head) const {
  if (kind != ScoreKind::hybrid) return kind;
  if (head < 0 || head >= static_cast<Index>(hybrid_assignment.size())) {
    throw ConfigError("no hybrid assignment for head " + std::to_string(head));
  }
  return hybrid_assignment[static_cast<std::size_t>(head)];
}

bool ScoringConfig::uses_ssa() const {
  if (kind == ScoreKind::ssa) return true;
  if (kind != ScoreKind::hybrid) return false;
  for (ScoreKind k : hybrid_assignment) {
    if (k == ScoreKind::ssa) return true;
  }
  return false;
}

ScoreVector score_vector(const Eigen::Ref<const Eigen::VectorXd>& z, const ScoringConfig& cfg,
                         const std::vector<bool>& mask, Index head) {
  const Index k = z.size();
  if (k < 1) throw ContractError("score_vector needs at least one position");
  if (static_cast<Index>(mask.size()) != k) {
    throw DimensionError("score_vector: mask length differs from logits");
  }
  if (!(cfg.ssa_b_init > 0.0) || !(cfg.ssa_n > 1.0)) {
    throw ConfigError("score_vector requires b > 0 and n > 1");
  }
  std::vector<Index> active;
  for (Index j = 0; j < k; ++j) {
    if (mask[static_cast<std::size_t>(j)]) active.push_back(j);
  }
  if (active.empty()) throw ContractError("score_vector: every position is masked");
  Eigen::VectorXd packed(static_cast<Index>(active.size()));
  for (std::size_t j = 0; j < active.size(); ++j) packed[static_cast<Index>(j)] = z[active[j]];
  Eigen::VectorXd w(packed.size());
  score_kernel(cfg.head_kind(head), SsaParams{cfg.ssa_b_init, cfg.ssa_n}, packed, w);
  ScoreVector out{Eigen::VectorXd::Zero(k), mask};
  for (std::size_t j = 0; j < active.size(); ++j) out.weights[active[j]] = w[static_cast<Index>(j)];
  return out;
}

ScoreVector score_vector(const Eigen::Ref<const Eigen::VectorXd>& z, const ScoringConfig& cfg) {
  return score_vector(z, cfg, std::vector<bool>(static_cast<std::size_t>(z.size()), true));
}

std::vector<SaturationPoint> saturation_curve(const ScoringConfig& cfg, Index k,
                                              const std::vector<double>& gaps) {
  if (k < 2) throw ContractError("saturation_curve needs K >= 2");
  std::vector<SaturationPoint> out;
  out.reserve(gaps.size());
  for (double g : gaps) {
    Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
    z[0] = g;
    out.push_back({g, score_vector(z, cfg).weights[0]});
  }
  return out;
}

double top_weight_cross_gradient(const ScoringConfig& cfg, Index k, double gap) {
  if (k < 2) throw ContractError("top_weight_cross_gradient needs K >= 2");
  Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
  z[0] = gap;
  const SsaParams p{cfg.ssa_b_init, cfg.ssa_n};
  const ScoreKind kind = cfg.head_kind(0);
  Eigen::VectorXd w(k), dz = Eigen::VectorXd::Zero(k);
  score_kernel(kind, p, z, w);
  Eigen::VectorXd dw = Eigen::VectorXd::Zero(k);
  dw[0] = 1.0;
  SsaGrad pg;
  score_kernel_vjp(kind, p, z, w, dw, dz, pg);
  return dz[1];
}

std::vector<ScoreKind> hybrid_assign(Index heads, HybridVariant variant) {
  if (heads < 1) throw ConfigError("hybrid_assign needs at least one head");
  std::vector<ScoreKind> kinds;
  if (variant == HybridVariant::soft_avg) {
    if (heads % 2 != 0) throw ConfigError("soft_avg hybrid needs an even head count");
    kinds.assign(static_cast<std::size_t>(heads / 2), ScoreKind::softmax);
    kinds.insert(kinds.end(), static_cast<std::size_t>(heads / 2), ScoreKind::uniform_avg);
    return kinds;
  }
  if (heads % 4 != 0) throw ConfigError("four_fn hybrid needs a head count divisible by 4");
  for (ScoreKind k : {ScoreKind::tanh_score, ScoreKind::uniform_avg, ScoreKind::relu_score,
                      ScoreKind::square_score}) {
    kinds.insert(kinds.end(), static_cast<std::size_t>(heads / 4), k);
  }
  return kinds;
}

std::string saturation_csv(
    const std::vector<std::pair<std::string, std::vector<SaturationPoint>>>& curves) {
  std::ostringstream os;
  if (curves.empty()) return "gap,weight\n";
  if (curves.size() == 1) {
    os << "gap,weight\n";
  } else {
    os << "gap";
    for (const auto& [label, _] : curves) os << ',' << label;
    os << '\n';
  }
  const std::size_t rows = curves.front().second.size();
  for (const auto& [label, pts] : curves) {
    if (pts.size() != rows) throw DimensionError("saturation_csv: curves have different lengths");
  }
  for (std::size_t r = 0; r < rows; ++r) {
    os << six_digits(curves.front().second[r].gap);
    for (const auto& [_, pts] : curves) os << ',' << six_digits(pts[r].top_weight);
    os << '\n';
  }
  return os.str();
}

Var score_rows(Var z, ScoreKind kind, Var b_raw, Var n_raw) {
  if (z.graph == nullptr || z.graph != b_raw.graph || z.graph != n_raw.graph) {
    throw ContractError("score_rows: operands must share one graph");
  }
  if (kind == ScoreKind::hybrid) throw ContractError("score_rows needs a resolved kind");
  Graph& g = *z.graph;
  const Tensor& zv = z.value();
  const SsaParams p{ssa_b_from_raw(b_raw.item()), ssa_n_from_raw(n_raw.item())};
  Tensor out(zv.shape());
  for (Index r = 0; r < zv.rows(); ++r) {
    score_kernel(kind, p, zv.mat().row(r), out.mat().row(r));
  }
  if (!out.all_finite()) throw NumericError("score_rows produced a non-finite weight");
  Tensor saved = out;
  return g.emit(std::move(out), {z, b_raw, n_raw},
                [z, b_raw, n_raw, kind, p, w = std::move(saved)](Graph& gr, const Tensor& dout) {
                  const Tensor& zz = gr.value(z);
                  Tensor dz(zz.shape());
                  SsaGrad pg;
                  for (Index r = 0; r < zz.rows(); ++r) {
                    score_kernel_vjp(kind, p, zz.mat().row(r), w.mat().row(r), dout.mat().row(r),
                                     dz.mat().row(r), pg);
                  }
                  if (gr.needs_grad(z)) gr.grad(z).vec() += dz.vec();
                  // Chain through b = exp(raw) and n = 1 + exp(raw).
                  if (gr.needs_grad(b_raw)) gr.grad(b_raw)[0] += pg.db * p.b;
                  if (gr.needs_grad(n_raw)) gr.grad(n_raw)[0] += pg.dn * (p.n - 1.0);
                });
}

}  // namespace ssalab
