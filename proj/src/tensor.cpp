#include "ilkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace ilkd {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::shared_ptr<detail::Node> make_leaf(Matrix value, Shape shape, bool requires_grad) {
  Index count = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + shape_string(shape));
    count *= d;
  }
  if (count != value.size())
    throw ShapeError("tensor: shape " + shape_string(shape) + " does not match " +
                     std::to_string(value.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->op = "leaf";
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Shape shape_of(const Matrix& m) {
  if (m.rows() == 1 && m.cols() == 1) return {};
  if (m.rows() == 1) return {m.cols()};
  return {m.rows(), m.cols()};
}

using NodePtr = detail::Node*;

// Post-order over requires_grad nodes reachable from root.
std::vector<NodePtr> topological_order(NodePtr root) {
  std::vector<NodePtr> order;
  std::unordered_set<NodePtr> seen;
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->released)
      throw GraphError("autodiff: graph through '" + node->op +
                       "' was already consumed by backward(); re-run the forward pass");
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

// Runs the reverse sweep; `relevant` restricts which nodes propagate.
std::unordered_map<NodePtr, Matrix> reverse_sweep(NodePtr root, const std::vector<NodePtr>& order,
                                                  const std::unordered_set<NodePtr>& relevant) {
  std::unordered_map<NodePtr, Matrix> grads;
  grads.emplace(root, Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr node = *it;
    auto found = grads.find(node);
    if (found == grads.end() || !node->rule) continue;
    std::vector<bool> needs(node->inputs.size());
    bool any = false;
    for (size_t i = 0; i < needs.size(); ++i) {
      NodePtr in = node->inputs[i].get();
      needs[i] = in->requires_grad && relevant.count(in);
      any = any || needs[i];
    }
    if (!any) continue;
    std::vector<Matrix> out(node->inputs.size());
    node->rule(found->second, needs, out);
    for (size_t i = 0; i < needs.size(); ++i) {
      if (!needs[i] || out[i].size() == 0) continue;
      NodePtr in = node->inputs[i].get();
      auto slot = grads.find(in);
      if (slot == grads.end())
        grads.emplace(in, std::move(out[i]));
      else
        slot->second += out[i];
    }
  }
  return grads;
}

void check_scalar_root(const Tensor& root, const char* who) {
  if (root.numel() != 1)
    throw ShapeError(std::string(who) + ": root must be a scalar, got shape " +
                     shape_string(root.shape()));
  if (!root.requires_grad())
    throw GraphError(std::string(who) +
                     ": root does not require grad (detached graph or constant inputs)");
}

}  // namespace

Tensor::Tensor() : node_(make_leaf(Matrix::Zero(1, 1), {}, false)) {}

Tensor Tensor::from_matrix(Matrix value, bool requires_grad) {
  Shape shape = shape_of(value);
  return Tensor(make_leaf(std::move(value), std::move(shape), requires_grad));
}

Tensor Tensor::from_matrix(Matrix value, Shape shape, bool requires_grad) {
  return Tensor(make_leaf(std::move(value), std::move(shape), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf(Matrix::Constant(1, 1, value), {}, requires_grad));
}

Tensor Tensor::vector(std::span<const double> values, bool requires_grad) {
  Matrix m(1, static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), m.data());
  return Tensor(make_leaf(std::move(m), {static_cast<Index>(values.size())}, requires_grad));
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
  return vector(std::span<const double>(values.begin(), values.size()), requires_grad);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  Index rows = 1, cols = 1;
  if (shape.size() == 1) cols = shape[0];
  if (shape.size() == 2) rows = shape[0], cols = shape[1];
  if (shape.size() > 2) throw ShapeError("tensor: rank > 2 is not supported, got " + shape_string(shape));
  return Tensor(make_leaf(Matrix::Zero(rows, cols), shape, requires_grad));
}

Tensor Tensor::make_result(std::string op, Matrix value, Shape shape, std::vector<Tensor> inputs,
                           detail::BackwardRule rule) {
  auto node = make_leaf(std::move(value), std::move(shape), false);
  node->op = std::move(op);
  bool tracked = std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
  if (tracked) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_);
    node->rule = std::move(rule);
  }
  return Tensor(std::move(node));
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->value(0, 0);
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw GraphError("set_requires_grad: only leaf tensors can change requires_grad");
  node_->requires_grad = flag;
  return *this;
}

Tensor Tensor::detach() const { return Tensor(make_leaf(node_->value, node_->shape, false)); }

void backward(const Tensor& root) {
  check_scalar_root(root, "backward");
  NodePtr top = root.node_.get();
  auto order = topological_order(top);
  std::unordered_set<NodePtr> all(order.begin(), order.end());
  auto grads = reverse_sweep(top, order, all);
  for (NodePtr node : order) {
    if (node->rule) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    if (node->grad)
      *node->grad += found->second;
    else
      node->grad = std::move(found->second);
  }
  for (NodePtr node : order) {
    if (!node->rule) continue;
    node->rule = nullptr;
    node->inputs.clear();
    node->released = true;
  }
}

std::vector<Matrix> gradient(const Tensor& root, std::span<const Tensor> wrt) {
  std::vector<Matrix> result;
  result.reserve(wrt.size());
  for (const auto& t : wrt) result.push_back(Matrix::Zero(t.rows(), t.cols()));
  if (root.numel() != 1)
    throw ShapeError("gradient: root must be a scalar, got shape " + shape_string(root.shape()));
  if (!root.requires_grad()) return result;

  NodePtr top = root.node_.get();
  auto order = topological_order(top);

  // A node is relevant when some target is reachable from it. Post-order
  // guarantees inputs are classified before their consumers.
  std::unordered_set<NodePtr> targets;
  for (const auto& t : wrt) targets.insert(t.node_.get());
  std::unordered_set<NodePtr> relevant;
  for (NodePtr node : order) {
    bool hit = targets.count(node) > 0;
    for (size_t i = 0; !hit && i < node->inputs.size(); ++i) hit = relevant.count(node->inputs[i].get()) > 0;
    if (hit) relevant.insert(node);
  }
  if (!relevant.count(top)) return result;

  auto grads = reverse_sweep(top, order, relevant);
  for (size_t i = 0; i < wrt.size(); ++i) {
    auto found = grads.find(wrt[i].node_.get());
    if (found != grads.end()) result[i] = found->second;
  }
  return result;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Matrix& x, double h) {
  if (!(h > 0)) throw DomainError("finite_diff_check: step must be positive");
  Tensor input = Tensor::from_matrix(x, true);
  Tensor out = f(input);
  Matrix analytic = gradient(out, input);

  double worst = 0.0;
  Matrix probe = x;
  for (Index i = 0; i < probe.size(); ++i) {
    const double saved = probe.data()[i];
    probe.data()[i] = saved + h;
    const double up = f(Tensor::from_matrix(probe)).item();
    probe.data()[i] = saved - h;
    const double down = f(Tensor::from_matrix(probe)).item();
    probe.data()[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace ilkd
