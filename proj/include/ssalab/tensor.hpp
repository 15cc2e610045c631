#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssalab {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = RowMatrixX<double>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller violated an operation precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A computation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);

/// Dense row-major double tensor with an optional gradient buffer.
///
/// Rank-0 tensors are scalars. For matrix views the leading extents are
/// flattened into rows and the last extent becomes the column count, so a
/// rank-1 tensor of extent n views as a 1 x n matrix.
class Tensor {
 public:
  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor(Shape{}, value); }
  static Tensor from_matrix(const Eigen::Ref<const RowMatrix>& m);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }
  Index cols() const { return shape_.empty() ? 1 : shape_.back(); }
  Index rows() const { return cols() == 0 ? 0 : size() / cols(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const double> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }
  Eigen::VectorXd& vec() { return data_; }
  const Eigen::VectorXd& vec() const { return data_; }
  MatrixMap mat() { return {data_.data(), rows(), cols()}; }
  ConstMatrixMap mat() const { return {data_.data(), rows(), cols()}; }

  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }
  double& at(Index r, Index c) { return data_[r * cols() + c]; }
  double at(Index r, Index c) const { return data_[r * cols() + c]; }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const { return data_.allFinite(); }

  bool requires_grad() const { return requires_grad_; }
  /// Enables gradient tracking and allocates a zeroed gradient buffer.
  void set_requires_grad(bool on);
  bool has_grad() const { return grad_.size() == data_.size() && requires_grad_; }
  Eigen::VectorXd& grad();
  const Eigen::VectorXd& grad() const;
  void zero_grad();

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  Eigen::VectorXd data_;
  Eigen::VectorXd grad_;
  bool requires_grad_ = false;
};

/// Reference to one named parameter tensor.
struct ParamRef {
  std::string name;
  Tensor* tensor;
};
struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
};

class Graph;

/// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  double item() const { return value().item(); }
};

/// Dynamic reverse-mode tape. The tape is rebuilt on every forward pass.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward walks the node list once in reverse. Parameter leaves keep a
/// pointer to the owning Tensor and accumulate into its grad buffer.
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor& grad_out)>;

  /// When recording is off, ops keep values only; backward is unavailable.
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to `param`; tracked when `param.requires_grad()`.
  Var parameter(Tensor& param);
  /// Untracked copy of a parameter value.
  Var parameter(const Tensor& param);

  /// Appends an op node. `backward` is dropped if no input needs a gradient.
  Var emit(Tensor value, std::initializer_list<Var> inputs, Backward backward);

  void backward(Var loss);

  bool recording() const { return record_; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  /// Gradient accumulator for `v`, zero-initialised on first access.
  Tensor& grad(Var v);
  /// Gradient accumulated on an arbitrary node by the last backward.
  const Tensor* grad_if_any(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool needs_grad = false;
    Tensor* leaf = nullptr;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool record_;
};

// Elementwise ops. Binary ops accept equal shapes or a single-element side.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var abs(Var a);
/// Sign of each element; the gradient is zero everywhere.
Var sign(Var a);
/// Elementwise power with a real exponent; negative bases need an integer exponent.
Var pow(Var a, double exponent);
Var exp(Var a);
Var tanh(Var a);
Var relu(Var a);
/// Tanh approximation of GELU.
Var gelu(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);

/// (m x k) * (k x n). Rank-1 operands are treated as row vectors.
Var matmul(Var a, Var b);
/// Adds a length-c vector to every row of an r x c matrix.
Var add_row_vector(Var x, Var bias);
/// Rows of `table` selected by `indices`.
Var gather_rows(Var table, std::vector<Index> indices);
/// Rows of `x` with `block[r % block.rows()]` added, used for positional tables.
Var add_periodic_rows(Var x, Var block);
/// Row-wise normalisation over the last extent followed by an affine map.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Row-wise softmax over the last extent.
Var softmax_rows(Var z);

/// Mean of (pred - target)^2 over all elements.
Var mse_loss(Var pred, const Tensor& target);
/// Mean two-or-more-class cross-entropy; `labels[r]` indexes the correct column of row r.
Var cross_entropy_loss(Var logits, std::span<const int> labels);

}  // namespace ssalab
