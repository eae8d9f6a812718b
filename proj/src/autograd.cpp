#include "xwin/autograd.hpp"

#include "xwin/error.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace xwin::ag {

void Node::accumulate(const Mat& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

namespace {

using BackFn = std::function<void(Node&)>;

Var make(Mat value, std::initializer_list<Var> parents, BackFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const auto& p : parents) node->parents.push_back(p.ptr());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

Var make_many(Mat value, std::span<const Var> parents, BackFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const auto& p : parents) node->parents.push_back(p.ptr());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument(std::string(op) + ": shape mismatch");
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Var custom(Mat value, std::span<const Var> parents, std::function<void(Node&)> backward_fn) {
  return make_many(std::move(value), parents, std::move(backward_fn));
}

Var constant(Mat value) { return make(std::move(value), {}, nullptr); }

Var leaf(Mat value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }

void backward(const Var& root) {
  require(root.rows() == 1 && root.cols() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(&root.node(), 0);
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (!n->parents.empty()) n->grad.resize(0, 0);
  }
  root.node().accumulate(Mat::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() > 0 && n->backward_fn) n->backward_fn(*n);
  }
}

Var detach(const Var& x) { return constant(x.value()); }

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimensions differ");
  Mat av = a.value(), bv = b.value();
  Mat out = av * bv;
  return make(std::move(out), {a, b}, [av, bv](Node& self) {
    parent(self, 0).accumulate(self.grad * bv.transpose());
    parent(self, 1).accumulate(av.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a},
              [](Node& self) { parent(self, 0).accumulate(self.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  return make(a.value() + b.value(), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(-self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Mat av = a.value(), bv = b.value();
  Mat out = av.cwiseProduct(bv);
  return make(std::move(out), {a, b}, [av, bv](Node& self) {
    parent(self, 0).accumulate(self.grad.cwiseProduct(bv));
    parent(self, 1).accumulate(self.grad.cwiseProduct(av));
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw InvalidArgument("add_row: bad row shape");
  Mat out = a.value().rowwise() + row.value().row(0);
  return make(std::move(out), {a, row}, [](Node& self) {
    parent(self, 0).accumulate(self.grad);
    parent(self, 1).accumulate(self.grad.colwise().sum());
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& self) { parent(self, 0).accumulate(self.grad * s); });
}

Var mul_scalar(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "mul_scalar: s must be 1x1");
  Mat av = a.value();
  double sv = s.scalar();
  return make(av * sv, {a, s}, [av, sv](Node& self) {
    parent(self, 0).accumulate(self.grad * sv);
    parent(self, 1).accumulate(Mat::Constant(1, 1, self.grad.cwiseProduct(av).sum()));
  });
}

Var div_scalar(const Var& a, const Var& s) {
  require(s.rows() == 1 && s.cols() == 1, "div_scalar: s must be 1x1");
  Mat av = a.value();
  double sv = s.scalar();
  return make(av / sv, {a, s}, [av, sv](Node& self) {
    parent(self, 0).accumulate(self.grad / sv);
    parent(self, 1).accumulate(Mat::Constant(1, 1, -self.grad.cwiseProduct(av).sum() / (sv * sv)));
  });
}

Var add_constant(const Var& a, double c) {
  return make(a.value().array() + c, {a}, [](Node& self) { parent(self, 0).accumulate(self.grad); });
}

Var exp(const Var& a) {
  Mat out = a.value().array().exp();
  Mat y = out;
  return make(std::move(out), {a},
              [y](Node& self) { parent(self, 0).accumulate(self.grad.cwiseProduct(y)); });
}

Var log(const Var& a) {
  Mat av = a.value();
  return make(av.array().log(), {a},
              [av](Node& self) { parent(self, 0).accumulate(self.grad.cwiseQuotient(av)); });
}

Var square(const Var& a) {
  Mat av = a.value();
  return make(av.array().square(), {a},
              [av](Node& self) { parent(self, 0).accumulate(2.0 * self.grad.cwiseProduct(av)); });
}

Var sigmoid(const Var& a) {
  Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Mat yc = y;
  return make(std::move(y), {a}, [yc](Node& self) {
    parent(self, 0).accumulate(
        (self.grad.array() * yc.array() * (1.0 - yc.array())).matrix());
  });
}

Var gelu(const Var& a) {
  static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double k = 0.044715;
  Mat x = a.value();
  Mat t = (c * (x.array() + k * x.array().cube())).tanh().matrix();
  Mat out = (0.5 * x.array() * (1.0 + t.array())).matrix();
  return make(std::move(out), {a}, [x, t](Node& self) {
    auto dt = (1.0 - t.array().square()) * c * (1.0 + 3.0 * k * x.array().square());
    Mat d = (0.5 * (1.0 + t.array()) + 0.5 * x.array() * dt).matrix();
    parent(self, 0).accumulate(self.grad.cwiseProduct(d));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Mat av = a.value();
  Mat out = av.cwiseMax(lo).cwiseMin(hi);
  return make(std::move(out), {a}, [av, lo, hi](Node& self) {
    Mat mask = ((av.array() >= lo) && (av.array() <= hi)).cast<double>().matrix();
    parent(self, 0).accumulate(self.grad.cwiseProduct(mask));
  });
}

Var sum(const Var& a) {
  Eigen::Index r = a.rows(), c = a.cols();
  return make(Mat::Constant(1, 1, a.value().sum()), {a}, [r, c](Node& self) {
    parent(self, 0).accumulate(Mat::Constant(r, c, self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  Eigen::Index r = a.rows(), c = a.cols();
  double n = static_cast<double>(r * c);
  require(n > 0, "mean: empty input");
  return make(Mat::Constant(1, 1, a.value().sum() / n), {a}, [r, c, n](Node& self) {
    parent(self, 0).accumulate(Mat::Constant(r, c, self.grad(0, 0) / n));
  });
}

Var mean_rows(const Var& a) {
  Eigen::Index r = a.rows();
  require(r > 0, "mean_rows: empty input");
  Mat out = a.value().colwise().mean();
  return make(std::move(out), {a}, [r](Node& self) {
    Mat g = self.grad.replicate(r, 1) / static_cast<double>(r);
    parent(self, 0).accumulate(g);
  });
}

Var sum_rows(const Var& a) {
  Eigen::Index r = a.rows();
  Mat out = a.value().colwise().sum();
  return make(std::move(out), {a},
              [r](Node& self) { parent(self, 0).accumulate(self.grad.replicate(r, 1)); });
}

Var diag(const Var& a) {
  require(a.rows() == a.cols(), "diag: matrix must be square");
  Eigen::Index n = a.rows();
  Mat out = a.value().diagonal();
  return make(std::move(out), {a}, [n](Node& self) {
    Mat g = Mat::Zero(n, n);
    g.diagonal() = self.grad.col(0);
    parent(self, 0).accumulate(g);
  });
}

Var softmax_rows(const Var& a) {
  Mat x = a.value();
  Mat y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    y.row(i) = (x.row(i).array() - m).exp();
    y.row(i) /= y.row(i).sum();
  }
  Mat yc = y;
  return make(std::move(y), {a}, [yc](Node& self) {
    Eigen::VectorXd dots = self.grad.cwiseProduct(yc).rowwise().sum();
    Mat g = yc.cwiseProduct((self.grad.colwise() - dots));
    parent(self, 0).accumulate(g);
  });
}

Var log_softmax_rows(const Var& a) {
  Mat x = a.value();
  Mat y(x.rows(), x.cols());
  Mat p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    Eigen::RowVectorXd e = (x.row(i).array() - m).exp();
    double s = e.sum();
    y.row(i) = x.row(i).array() - m - std::log(s);
    p.row(i) = e / s;
  }
  return make(std::move(y), {a}, [p](Node& self) {
    Eigen::VectorXd gs = self.grad.rowwise().sum();
    Mat g = self.grad - (p.array().colwise() * gs.array()).matrix();
    parent(self, 0).accumulate(g);
  });
}

namespace {

struct NormStats {
  Mat xhat;
  Eigen::VectorXd inv_std;
};

NormStats normalize(const Mat& x, double eps) {
  NormStats s;
  s.xhat.resize(x.rows(), x.cols());
  s.inv_std.resize(x.rows());
  const double c = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mu = x.row(i).sum() / c;
    Eigen::RowVectorXd d = x.row(i).array() - mu;
    double var = d.squaredNorm() / c;
    double is = 1.0 / std::sqrt(var + eps);
    s.xhat.row(i) = d * is;
    s.inv_std(i) = is;
  }
  return s;
}

Mat norm_backward(const Mat& dxhat, const NormStats& s) {
  const double c = static_cast<double>(dxhat.cols());
  Mat dx(dxhat.rows(), dxhat.cols());
  for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
    double m1 = dxhat.row(i).sum() / c;
    double m2 = dxhat.row(i).dot(s.xhat.row(i)) / c;
    dx.row(i) = s.inv_std(i) * (dxhat.row(i).array() - m1 - s.xhat.row(i).array() * m2);
  }
  return dx;
}

}  // namespace

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm: gamma shape");
  require(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm: beta shape");
  NormStats s = normalize(x.value(), eps);
  Eigen::RowVectorXd g = gamma.value().row(0);
  Mat out = (s.xhat.array().rowwise() * g.array()).matrix();
  out.rowwise() += beta.value().row(0);
  return make(std::move(out), {x, gamma, beta}, [s, g](Node& self) {
    Mat dxhat = (self.grad.array().rowwise() * g.array()).matrix();
    parent(self, 0).accumulate(norm_backward(dxhat, s));
    parent(self, 1).accumulate(self.grad.cwiseProduct(s.xhat).colwise().sum());
    parent(self, 2).accumulate(self.grad.colwise().sum());
  });
}

Var layer_norm_rows(const Var& x, double eps) {
  NormStats s = normalize(x.value(), eps);
  Mat out = s.xhat;
  return make(std::move(out), {x},
              [s](Node& self) { parent(self, 0).accumulate(norm_backward(self.grad, s)); });
}

Var l2_normalize_rows(const Var& x, double eps) {
  Mat xv = x.value();
  Eigen::VectorXd n = xv.rowwise().norm().cwiseMax(eps);
  Mat y = (xv.array().colwise() / n.array()).matrix();
  Mat yc = y;
  return make(std::move(y), {x}, [yc, n](Node& self) {
    Eigen::VectorXd dots = self.grad.cwiseProduct(yc).rowwise().sum();
    Mat g = (self.grad - (yc.array().colwise() * dots.array()).matrix());
    g = (g.array().colwise() / n.array()).matrix();
    parent(self, 0).accumulate(g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  Eigen::Index cols = parts[0].cols(), rows = 0;
  std::vector<Eigen::Index> sizes;
  for (const auto& p : parts) {
    require(p.cols() == cols, "concat_rows: column mismatch");
    sizes.push_back(p.rows());
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_many(std::move(out), parts, [sizes](Node& self) {
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      parent(self, i).accumulate(self.grad.middleRows(r, sizes[i]));
      r += sizes[i];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Eigen::Index rows = parts[0].rows(), cols = 0;
  std::vector<Eigen::Index> sizes;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    sizes.push_back(p.cols());
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make_many(std::move(out), parts, [sizes](Node& self) {
    Eigen::Index c = 0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      parent(self, i).accumulate(self.grad.middleCols(c, sizes[i]));
      c += sizes[i];
    }
  });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Eigen::Index r = a.rows(), c = a.cols();
  return make(a.value().middleRows(start, count), {a}, [r, c, start, count](Node& self) {
    Mat g = Mat::Zero(r, c);
    g.middleRows(start, count) = self.grad;
    parent(self, 0).accumulate(g);
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Eigen::Index r = a.rows(), c = a.cols();
  return make(a.value().middleCols(start, count), {a}, [r, c, start, count](Node& self) {
    Mat g = Mat::Zero(r, c);
    g.middleCols(start, count) = self.grad;
    parent(self, 0).accumulate(g);
  });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  std::vector<int> idx(rows.begin(), rows.end());
  Mat out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < a.rows(), "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  Eigen::Index r = a.rows(), c = a.cols();
  return make(std::move(out), {a}, [idx, r, c](Node& self) {
    Mat g = Mat::Zero(r, c);
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    parent(self, 0).accumulate(g);
  });
}

Var repeat_rows(const Var& row, Eigen::Index count) {
  require(row.rows() == 1, "repeat_rows: expects a single row");
  return make(row.value().replicate(count, 1), {row},
              [](Node& self) { parent(self, 0).accumulate(self.grad.colwise().sum()); });
}

Var straight_through(const Var& x, const Var& quantized) {
  check_same_shape(x, quantized, "straight_through");
  return make(quantized.value(), {x}, [](Node& self) { parent(self, 0).accumulate(self.grad); });
}

}  // namespace xwin::ag
