#pragma once

// Minimal reverse-mode automatic differentiation over dense 2D matrices.
//
// A Var is a handle to a node in a dynamically built expression graph. Nodes
// that do not depend on any gradient-requiring leaf drop their parents, so
// constant sub-graphs (teacher passes, detached targets) cost no more than a
// plain forward evaluation.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace xwin::ag {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

struct Node {
  Mat value;
  Mat grad;  // empty until something flows into the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Mat& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Mat& value() const { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() > 0; }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool valid() const { return static_cast<bool>(node_); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& ptr() const { return node_; }

  void zero_grad() { node_->grad.resize(0, 0); }

 private:
  std::shared_ptr<Node> node_;
};

// Leaves.
Var constant(Mat value);
Var leaf(Mat value);  // requires gradient
Var scalar_constant(double v);

/// Reverse sweep from a 1x1 root. Gradients accumulate into every reachable
/// node that requires grad; intermediate grads are reset before the sweep.
void backward(const Var& root);

/// Cuts the graph: same value, no gradient flow.
Var detach(const Var& x);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var add_row(const Var& a, const Var& row);  // broadcast a 1xC row over rows
Var scale(const Var& a, double s);
Var mul_scalar(const Var& a, const Var& s);  // s is 1x1
Var div_scalar(const Var& a, const Var& s);
Var add_constant(const Var& a, double c);

// Elementwise nonlinearities.
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);  // tanh approximation
Var clamp(const Var& a, double lo, double hi);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);  // 1xC average over rows
Var sum_rows(const Var& a);   // 1xC
Var diag(const Var& a);       // Nx1 diagonal of a square matrix

// Row-wise transforms.
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6);
Var layer_norm_rows(const Var& x, double eps = 1e-6);  // no affine part
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

// Structural.
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, std::span<const int> rows);
Var repeat_rows(const Var& row, Eigen::Index count);

/// Value of `quantized`, gradient routed unchanged to `x` (straight-through).
Var straight_through(const Var& x, const Var& quantized);

/// Escape hatch for fused ops: the backward closure receives the new node,
/// whose `parents` follow the order of `parents` here.
Var custom(Mat value, std::span<const Var> parents, std::function<void(Node&)> backward_fn);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace xwin::ag
