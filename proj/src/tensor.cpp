#include "ssalab/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace ssalab {

namespace {

Index shape_product(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    n *= e;
  }
  return n;
}

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw ContractError("variable is not attached to a graph");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw ContractError("operands belong to different graphs");
  return graph_of(a);
}

template <typename Fwd, typename Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Graph& g = graph_of(a);
  const Tensor& x = a.value();
  Tensor out(x.shape());
  out.vec() = x.vec().unaryExpr(fwd);
  return g.emit(std::move(out), {a}, [a, deriv](Graph& gr, const Tensor& dout) {
    const Eigen::VectorXd& xv = gr.value(a).vec();
    Eigen::VectorXd& ga = gr.grad(a).vec();
    for (Index i = 0; i < xv.size(); ++i) ga[i] += dout[i] * deriv(xv[i]);
  });
}

// Reduces a same-size gradient onto a possibly single-element operand.
void accumulate_broadcast(Graph& g, Var target, const Eigen::VectorXd& contribution) {
  Tensor& gt = g.grad(target);
  if (gt.size() == contribution.size()) {
    gt.vec() += contribution;
  } else {
    gt[0] += contribution.sum();
  }
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                       " and " + shape_string(b.shape()));
}

Eigen::VectorXd expand(const Tensor& t, Index n) {
  if (t.size() == n) return t.vec();
  return Eigen::VectorXd::Constant(n, t[0]);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// Vectorised tanh through exp; absolute error stays at rounding level.
template <typename Derived>
auto fast_tanh(const Eigen::ArrayBase<Derived>& x) {
  return 1.0 - 2.0 / ((2.0 * x.min(350.0)).exp() + 1.0);
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(Eigen::VectorXd::Constant(shape_product(shape_), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  const Index n = shape_product(shape_);
  if (static_cast<Index>(values.size()) != n) {
    throw DimensionError("tensor of shape " + shape_string(shape_) + " needs " + std::to_string(n) +
                         " values, got " + std::to_string(values.size()));
  }
  data_ = Eigen::Map<const Eigen::VectorXd>(values.data(), n);
}

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrix>& m) {
  Tensor t(Shape{m.rows(), m.cols()});
  t.mat() = m;
  return t;
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{static_cast<Index>(values.size())}, std::vector<double>(values));
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_ = Eigen::VectorXd::Zero(data_.size());
  } else {
    grad_.resize(0);
  }
}

Eigen::VectorXd& Tensor::grad() {
  if (!has_grad()) throw ContractError("tensor does not track gradients");
  return grad_;
}

const Eigen::VectorXd& Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor does not track gradients");
  return grad_;
}

void Tensor::zero_grad() {
  if (requires_grad_) grad_.setZero(data_.size());
}

const Tensor& Var::value() const {
  if (graph == nullptr) throw ContractError("variable is not attached to a graph");
  return graph->value(*this);
}

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, false, nullptr, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor& param) {
  const bool tracked = record_ && param.requires_grad();
  Tensor copy(param.shape());
  copy.vec() = param.vec();
  nodes_.push_back(Node{std::move(copy), Tensor{}, false, tracked, tracked ? &param : nullptr, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(const Tensor& param) {
  Tensor copy(param.shape());
  copy.vec() = param.vec();
  return constant(std::move(copy));
}

Var Graph::emit(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  if (record_) {
    for (Var v : inputs) {
      if (v.graph != this) throw ContractError("operand belongs to a different graph");
      needs = needs || nodes_[v.id].needs_grad;
    }
  }
  nodes_.push_back(
      Node{std::move(value), Tensor{}, false, needs, nullptr, needs ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad(Var v) {
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

const Tensor* Graph::grad_if_any(Var v) const {
  const Node& n = nodes_[v.id];
  return n.has_grad ? &n.grad : nullptr;
}

void Graph::backward(Var loss) {
  if (!record_) throw ContractError("backward on a graph built without recording");
  if (loss.graph != this) throw ContractError("loss belongs to a different graph");
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_string(nodes_[loss.id].value.shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor{};
  }
  if (!nodes_[loss.id].needs_grad) return;
  grad(loss)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.needs_grad) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.leaf != nullptr) {
      n.leaf->grad() += n.grad.vec();
    }
  }
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shape(x, y, "add"));
  out.vec() = expand(x, out.size()) + expand(y, out.size());
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& dout) {
    if (gr.needs_grad(a)) accumulate_broadcast(gr, a, dout.vec());
    if (gr.needs_grad(b)) accumulate_broadcast(gr, b, dout.vec());
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shape(x, y, "sub"));
  out.vec() = expand(x, out.size()) - expand(y, out.size());
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& dout) {
    if (gr.needs_grad(a)) accumulate_broadcast(gr, a, dout.vec());
    if (gr.needs_grad(b)) accumulate_broadcast(gr, b, -dout.vec());
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(broadcast_shape(x, y, "mul"));
  out.vec() = expand(x, out.size()).cwiseProduct(expand(y, out.size()));
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& dout) {
    const Index n = dout.size();
    if (gr.needs_grad(a)) {
      accumulate_broadcast(gr, a, dout.vec().cwiseProduct(expand(gr.value(b), n)));
    }
    if (gr.needs_grad(b)) {
      accumulate_broadcast(gr, b, dout.vec().cwiseProduct(expand(gr.value(a), n)));
    }
  });
}

Var scale(Var a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(a, [offset](double x) { return x + offset; }, [](double) { return 1.0; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sign(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, [](double) { return 0.0; });
}

Var pow(Var a, double exponent) {
  const bool integral = std::floor(exponent) == exponent;
  if (!integral && (a.value().vec().array() < 0.0).any()) {
    throw DomainError("pow: negative base with non-integer exponent " + std::to_string(exponent));
  }
  return unary(
      a, [exponent](double x) { return std::pow(x, exponent); },
      [exponent](double x) { return exponent * std::pow(x, exponent - 1.0); });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var tanh(Var a) {
  Graph& g = graph_of(a);
  Tensor out(a.value().shape());
  out.vec() = fast_tanh(a.value().vec().array()).matrix();
  Eigen::VectorXd saved = out.vec();
  return g.emit(std::move(out), {a}, [a, t = std::move(saved)](Graph& gr, const Tensor& dout) {
    gr.grad(a).vec().array() += dout.vec().array() * (1.0 - t.array().square());
  });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  Graph& g = graph_of(a);
  const auto x = a.value().vec().array();
  Eigen::ArrayXd t = fast_tanh(kGeluC * (x + 0.044715 * x.cube()));
  Tensor out(a.value().shape());
  out.vec().array() = 0.5 * x * (1.0 + t);
  return g.emit(std::move(out), {a}, [a, t = std::move(t)](Graph& gr, const Tensor& dout) {
    const auto xv = gr.value(a).vec().array();
    gr.grad(a).vec().array() +=
        dout.vec().array() * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t.square()) * kGeluC *
                                                    (1.0 + 3.0 * 0.044715 * xv.square()));
  });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  return g.emit(Tensor::scalar(a.value().vec().sum()), {a}, [a](Graph& gr, const Tensor& dout) {
    gr.grad(a).vec().array() += dout[0];
  });
}

Var mean(Var a) {
  Graph& g = graph_of(a);
  const double n = static_cast<double>(a.value().size());
  return g.emit(Tensor::scalar(a.value().vec().mean()), {a}, [a, n](Graph& gr, const Tensor& dout) {
    gr.grad(a).vec().array() += dout[0] / n;
  });
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.rank() > 2 || y.rank() > 2) throw DimensionError("matmul: operands must have rank <= 2");
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(x.shape()) + " x " +
                         shape_string(y.shape()));
  }
  Tensor out(Shape{x.rows(), y.cols()});
  out.mat().noalias() = x.mat() * y.mat();
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& dout) {
    if (gr.needs_grad(a)) gr.grad(a).mat().noalias() += dout.mat() * gr.value(b).mat().transpose();
    if (gr.needs_grad(b)) gr.grad(b).mat().noalias() += gr.value(a).mat().transpose() * dout.mat();
  });
}

Var add_row_vector(Var x, Var bias) {
  Graph& g = graph_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_row_vector: bias of size " + std::to_string(bv.size()) +
                         " for rows of width " + std::to_string(xv.cols()));
  }
  Tensor out(xv.shape());
  out.mat() = xv.mat().rowwise() + bv.vec().transpose();
  return g.emit(std::move(out), {x, bias}, [x, bias](Graph& gr, const Tensor& dout) {
    if (gr.needs_grad(x)) gr.grad(x).vec() += dout.vec();
    if (gr.needs_grad(bias)) gr.grad(bias).vec() += dout.mat().colwise().sum().transpose();
  });
}

Var gather_rows(Var table, std::vector<Index> indices) {
  Graph& g = graph_of(table);
  const Tensor& t = table.value();
  Tensor out(Shape{static_cast<Index>(indices.size()), t.cols()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || indices[r] >= t.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[r]) + " outside " +
                           std::to_string(t.rows()) + " rows");
    }
    out.mat().row(static_cast<Index>(r)) = t.mat().row(indices[r]);
  }
  return g.emit(std::move(out), {table},
                [table, idx = std::move(indices)](Graph& gr, const Tensor& dout) {
                  MatrixMap gt = gr.grad(table).mat();
                  for (std::size_t r = 0; r < idx.size(); ++r) {
                    gt.row(idx[r]) += dout.mat().row(static_cast<Index>(r));
                  }
                });
}

Var add_periodic_rows(Var x, Var block) {
  Graph& g = graph_of(x, block);
  const Tensor& xv = x.value();
  const Tensor& bv = block.value();
  if (bv.cols() != xv.cols() || xv.rows() % bv.rows() != 0) {
    throw DimensionError("add_periodic_rows: " + shape_string(bv.shape()) + " does not tile " +
                         shape_string(xv.shape()));
  }
  Tensor out(xv.shape());
  const Index period = bv.rows();
  for (Index r0 = 0; r0 < xv.rows(); r0 += period) {
    out.mat().middleRows(r0, period) = xv.mat().middleRows(r0, period) + bv.mat();
  }
  return g.emit(std::move(out), {x, block}, [x, block, period](Graph& gr, const Tensor& dout) {
    if (gr.needs_grad(x)) gr.grad(x).vec() += dout.vec();
    if (gr.needs_grad(block)) {
      MatrixMap gb = gr.grad(block).mat();
      for (Index r0 = 0; r0 < dout.rows(); r0 += period) gb += dout.mat().middleRows(r0, period);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph& g = graph_of(x, gain);
  graph_of(x, bias);
  const Tensor& xv = x.value();
  const Index d = xv.cols();
  if (xv.size() == 0 || d == 0) throw DimensionError("layer_norm: empty last extent");
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters must have size " + std::to_string(d));
  }
  const Index rows = xv.rows();
  RowMatrix normalized(rows, d);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const auto row = xv.mat().row(r);
    const double mu = row.mean();
    const double var = (row.array() - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    normalized.row(r) = (row.array() - mu) * inv_std[r];
  }
  Tensor out(xv.shape());
  out.mat() = (normalized.array().rowwise() * gain.value().vec().transpose().array()).rowwise() +
              bias.value().vec().transpose().array();
  return g.emit(std::move(out), {x, gain, bias},
                [x, gain, bias, xhat = std::move(normalized), inv_std = std::move(inv_std)](
                    Graph& gr, const Tensor& dout) {
                  const Index dd = xhat.cols();
                  if (gr.needs_grad(gain)) {
                    gr.grad(gain).vec() +=
                        (dout.mat().array() * xhat.array()).colwise().sum().matrix().transpose();
                  }
                  if (gr.needs_grad(bias)) {
                    gr.grad(bias).vec() += dout.mat().colwise().sum().transpose();
                  }
                  if (gr.needs_grad(x)) {
                    MatrixMap gx = gr.grad(x).mat();
                    const Eigen::RowVectorXd gamma = gr.value(gain).vec().transpose();
                    for (Index r = 0; r < xhat.rows(); ++r) {
                      const Eigen::RowVectorXd dxhat = dout.mat().row(r).cwiseProduct(gamma);
                      const double m1 = dxhat.mean();
                      const double m2 = dxhat.dot(xhat.row(r)) / static_cast<double>(dd);
                      gx.row(r).array() +=
                          inv_std[r] * (dxhat.array() - m1 - xhat.row(r).array() * m2);
                    }
                  }
                });
}

Var softmax_rows(Var z) {
  Graph& g = graph_of(z);
  const Tensor& zv = z.value();
  Tensor out(zv.shape());
  for (Index r = 0; r < zv.rows(); ++r) {
    const auto row = zv.mat().row(r);
    Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
    out.mat().row(r) = e / e.sum();
  }
  return g.emit(std::move(out), {z}, [z](Graph& gr, const Tensor& dout) {
    // The output node's value is needed; recompute from z to avoid holding a copy.
    const Tensor& zz = gr.value(z);
    MatrixMap gz = gr.grad(z).mat();
    for (Index r = 0; r < zz.rows(); ++r) {
      const auto row = zz.mat().row(r);
      Eigen::RowVectorXd w = (row.array() - row.maxCoeff()).exp();
      w /= w.sum();
      const double inner = w.dot(dout.mat().row(r));
      gz.row(r).array() += w.array() * (dout.mat().row(r).array() - inner);
    }
  });
}

Var mse_loss(Var pred, const Tensor& target) {
  Graph& g = graph_of(pred);
  const Tensor& p = pred.value();
  if (p.size() != target.size()) {
    throw ContractError("mse_loss: " + std::to_string(p.size()) + " predictions for " +
                        std::to_string(target.size()) + " targets");
  }
  const double n = static_cast<double>(p.size());
  Eigen::VectorXd diff = p.vec() - target.vec();
  const double loss = diff.squaredNorm() / n;
  return g.emit(Tensor::scalar(loss), {pred},
                [pred, n, diff = std::move(diff)](Graph& gr, const Tensor& dout) {
                  gr.grad(pred).vec() += (2.0 * dout[0] / n) * diff;
                });
}

Var cross_entropy_loss(Var logits, std::span<const int> labels) {
  Graph& g = graph_of(logits);
  const Tensor& z = logits.value();
  if (z.rows() != static_cast<Index>(labels.size())) {
    throw ContractError("cross_entropy_loss: " + std::to_string(z.rows()) + " rows for " +
                        std::to_string(labels.size()) + " labels");
  }
  const Index rows = z.rows();
  RowMatrix probs(rows, z.cols());
  double total = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (Index r = 0; r < rows; ++r) {
    if (lab[r] < 0 || lab[r] >= z.cols()) throw ContractError("cross_entropy_loss: label out of range");
    const auto row = z.mat().row(r);
    const double m = row.maxCoeff();
    Eigen::RowVectorXd e = (row.array() - m).exp();
    const double s = e.sum();
    probs.row(r) = e / s;
    total += -(row[lab[r]] - m - std::log(s));
  }
  const double n = static_cast<double>(rows);
  return g.emit(Tensor::scalar(total / n), {logits},
                [logits, n, probs = std::move(probs), lab = std::move(lab)](Graph& gr,
                                                                            const Tensor& dout) {
                  MatrixMap gz = gr.grad(logits).mat();
                  RowMatrix delta = probs;
                  for (Index r = 0; r < delta.rows(); ++r) delta(r, lab[r]) -= 1.0;
                  gz += (dout[0] / n) * delta;
                });
}

}  // namespace ssalab
