// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Values live in row-major
// Eigen matrices; rank 0 is stored as 1x1 and rank 1 as a single row. The
// graph is recorded while operations run and released by backward().

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ilkd {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Shape = std::vector<Index>;

/// Raised when operand shapes do not conform to an operation's rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for values outside an operation's domain (e.g. log of zero).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Raised when the autodiff graph cannot serve a request.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::string shape_string(const Shape& shape);

class Tensor;

namespace detail {

// Receives the upstream gradient and, for each input flagged in `needs`,
// writes that input's gradient contribution into `out[i]`.
using BackwardRule = std::function<void(const Matrix& upstream, const std::vector<bool>& needs,
                                        std::vector<Matrix>& out)>;

struct Node {
  std::string op;
  Shape shape;
  Matrix value;
  bool requires_grad = false;
  bool released = false;
  std::optional<Matrix> grad;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardRule rule;
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor from_matrix(Matrix value, bool requires_grad = false);
  static Tensor from_matrix(Matrix value, Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::span<const double> values, bool requires_grad = false);
  static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);
  static Tensor zeros(const Shape& shape, bool requires_grad = false);

  /// Records a new graph node. Used by primitives and custom differentiable ops;
  /// the node only keeps `inputs` and `rule` when some input requires grad.
  static Tensor make_result(std::string op, Matrix value, Shape shape, std::vector<Tensor> inputs,
                            detail::BackwardRule rule);

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index numel() const { return node_->value.size(); }
  const Matrix& value() const { return node_->value; }
  std::span<const double> data() const { return {node_->value.data(), static_cast<size_t>(numel())}; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Only valid on leaves (tensors not produced by a recorded operation).
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return node_->inputs.empty() && !node_->rule && !node_->released; }

  const std::optional<Matrix>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.reset(); }

  /// Value-equal copy with no graph edge and requires_grad false.
  Tensor detach() const;

  const std::string& op() const { return node_->op; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend void backward(const Tensor& root);
  friend std::vector<Matrix> gradient(const Tensor& root, std::span<const Tensor> wrt);
};

/// Populates grad of every requires_grad leaf reachable from the scalar `root`,
/// accumulating into existing grads, then releases the recorded graph.
void backward(const Tensor& root);

/// Gradients of the scalar `root` with respect to each tensor in `wrt`
/// (leaf or intermediate). Leaves no trace in grad buffers and keeps the graph.
/// A tensor that root does not depend on gets a zero matrix.
std::vector<Matrix> gradient(const Tensor& root, std::span<const Tensor> wrt);
inline Matrix gradient(const Tensor& root, const Tensor& wrt) {
  return gradient(root, std::span<const Tensor>(&wrt, 1)).front();
}

/// Max over elements of |analytic - central difference| / max(1, |analytic|).
/// `f` must be a deterministic scalar-valued function of its argument.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Matrix& x,
                         double h = 1e-5);

}  // namespace ilkd
