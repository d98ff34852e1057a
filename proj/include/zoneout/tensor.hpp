// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense tensor with define-by-run reverse-mode differentiation.
 *
 * A BasicTensor is a shared handle to a graph node. Leaves are created by the
 * user (parameters, inputs, masks); every op in ops.hpp produces an interior
 * node that remembers its operands and a backward rule, but only when at least
 * one operand requires gradients. backward() replays those rules in reverse
 * topological order and then releases the graph, so each graph is consumed
 * exactly once.
 *
 * Tensors are rank <= 2 (rows x cols, row-major). Vectors are 1 x N rows and
 * scalars are 1 x 1.
 */
#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace zoneout {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX =
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Operand shapes do not fit the requested op.
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the autodiff graph (non-scalar loss, consumed graph, ...).
class GraphError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

inline std::string shape_string(Index rows, Index cols) {
  std::ostringstream os;
  os << '[' << rows << 'x' << cols << ']';
  return os.str();
}

namespace detail {

template <typename Scalar> struct Node {
  using Matrix = MatrixX<Scalar>;

  Matrix value;
  Matrix grad; // size 0 until first touched
  bool requires_grad = false;
  bool consumed = false;
  const char *op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node &)> backward;

  Matrix &grad_buffer() {
    if (grad.size() == 0)
      grad = Matrix::Zero(value.rows(), value.cols());
    return grad;
  }
  Node &parent(std::size_t k) { return *parents[k]; }

  Node() = default;
  Node(const Node &) = delete;
  Node &operator=(const Node &) = delete;
  // Unlinks long operand chains iteratively instead of recursing once per op.
  ~Node() {
    std::vector<std::shared_ptr<Node>> pending = std::move(parents);
    while (!pending.empty()) {
      std::shared_ptr<Node> p = std::move(pending.back());
      pending.pop_back();
      if (p && p.use_count() == 1) {
        for (auto &q : p->parents)
          pending.push_back(std::move(q));
        p->parents.clear();
      }
    }
  }
};

inline bool &grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Name of an op whose backward rule is deliberately corrupted (testing only).
inline std::string &backward_fault() {
  static std::string op;
  return op;
}

} // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard &) = delete;
  NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
  bool previous_;
};

namespace testing {
/// Scales the upstream gradient of every `op` node by 1.5 during backward().
/// Pass an empty string to restore correct behaviour.
inline void set_backward_fault(std::string op) {
  detail::backward_fault() = std::move(op);
}
} // namespace testing

template <typename Scalar> class BasicTensor {
public:
  using Matrix = MatrixX<Scalar>;
  using NodeType = detail::Node<Scalar>;

  BasicTensor() = default;

  explicit BasicTensor(Matrix value, bool requires_grad = false)
    : node_(std::make_shared<NodeType>()) {
    if (value.rows() <= 0 || value.cols() <= 0)
      throw DimensionError("tensor dimensions must be positive, got " +
                           shape_string(value.rows(), value.cols()));
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Index rows, Index cols, bool requires_grad = false) {
    return BasicTensor(Matrix::Zero(rows, cols), requires_grad);
  }
  static BasicTensor constant(Index rows, Index cols, Scalar v) {
    return BasicTensor(Matrix::Constant(rows, cols, v));
  }
  static BasicTensor scalar(Scalar v, bool requires_grad = false) {
    return BasicTensor(Matrix::Constant(1, 1, v), requires_grad);
  }
  static BasicTensor
  from_rows(std::initializer_list<std::initializer_list<Scalar>> rows,
            bool requires_grad = false) {
    const auto r = static_cast<Index>(rows.size());
    const auto c = r > 0 ? static_cast<Index>(rows.begin()->size()) : 0;
    Matrix m(r, c);
    Index i = 0;
    for (const auto &row : rows) {
      if (static_cast<Index>(row.size()) != c)
        throw DimensionError("from_rows: ragged initializer");
      Index j = 0;
      for (Scalar v : row)
        m(i, j++) = v;
      ++i;
    }
    return BasicTensor(std::move(m), requires_grad);
  }

  /// Wraps an op result. Operands and the backward rule are kept only when
  /// some operand participates in differentiation.
  static BasicTensor make_result(const char *op, Matrix value,
                                 std::initializer_list<BasicTensor> operands,
                                 std::function<void(NodeType &)> backward) {
    BasicTensor out(std::move(value));
    bool any = false;
    if (detail::grad_mode())
      for (const auto &t : operands)
        any = any || t.requires_grad();
    // Untracked results are constants: they keep the "leaf" tag.
    if (any) {
      out.node_->op = op;
      out.node_->requires_grad = true;
      for (const auto &t : operands)
        out.node_->parents.push_back(t.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  std::string shape_str() const { return shape_string(rows(), cols()); }

  const Matrix &value() const { return node_->value; }
  /// In-place access for leaves (optimizer updates, finite differences).
  Matrix &mutable_value() {
    if (!is_leaf())
      throw GraphError("mutable_value() on non-leaf tensor produced by '" +
                       std::string(node_->op) + "'");
    return node_->value;
  }
  Scalar item() const {
    if (size() != 1)
      throw DimensionError("item() needs a 1x1 tensor, got " + shape_str());
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->op == std::string_view("leaf"); }
  const char *op() const { return node_->op; }
  bool consumed() const { return node_->consumed; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix &grad() const {
    if (!has_grad())
      throw GraphError("tensor has no gradient buffer");
    return node_->grad;
  }
  Matrix &mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0, 0); }

  /// Same value, no history.
  BasicTensor detach() const { return BasicTensor(node_->value); }

  const std::shared_ptr<NodeType> &node() const { return node_; }

private:
  std::shared_ptr<NodeType> node_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls until zero_grad(); interior nodes are released afterwards.
template <typename Scalar> void backward(const BasicTensor<Scalar> &loss) {
  using NodeType = detail::Node<Scalar>;
  if (!loss.defined())
    throw GraphError("backward() on an undefined tensor");
  if (loss.size() != 1)
    throw DimensionError("backward() needs a scalar loss, got " +
                         loss.shape_str());
  NodeType *root = loss.node().get();
  if (root->consumed)
    throw GraphError("graph already consumed by a previous backward()");
  if (!root->requires_grad)
    throw GraphError("loss does not depend on any tensor requiring gradients");

  // Iterative post-order DFS; unrolled sequences make recursion too deep.
  std::vector<NodeType *> order;
  std::unordered_set<NodeType *> seen;
  std::vector<std::pair<NodeType *, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto &[node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeType *p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second)
        stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (NodeType *n : order)
    n->grad_buffer();
  root->grad(0, 0) += Scalar(1);

  const std::string &fault = detail::backward_fault();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType *n = *it;
    if (!n->backward)
      continue;
    if (!fault.empty() && fault == n->op)
      n->grad *= Scalar(1.5);
    n->backward(*n);
  }

  for (NodeType *n : order) {
    if (n->op != std::string_view("leaf")) {
      n->consumed = true;
      n->backward = nullptr;
      n->parents.clear();
    }
  }
}

using Tensor = BasicTensor<double>;
using Matrix = MatrixX<double>;

} // namespace zoneout
