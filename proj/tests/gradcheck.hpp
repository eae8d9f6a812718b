#pragma once

// Central finite-difference oracle for graph functions. Independent of the
// backward implementations: it only evaluates forward values.

#include "xwin/autograd.hpp"
#include "xwin/params.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace xwin::testing {

using ag::Mat;
using ag::Var;

using GraphFn = std::function<Var(const std::vector<Var>&)>;

/// Norm-wise relative error between the analytic and numeric gradient of a
/// scalar function, maximised over all inputs.
inline double gradcheck(const GraphFn& f, const std::vector<Mat>& inputs, double h = 1e-6) {
  std::vector<Var> leaves;
  for (const auto& m : inputs) leaves.push_back(ag::leaf(m));
  Var out = f(leaves);
  ag::backward(out);

  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Mat analytic = leaves[k].has_grad() ? leaves[k].grad() : Mat::Zero(inputs[k].rows(), inputs[k].cols());
    Mat numeric(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Var> c;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Mat m = inputs[j];
          if (j == k) m.data()[i] += delta;
          c.push_back(ag::constant(m));
        }
        return f(c).scalar();
      };
      numeric.data()[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    double denom = std::max({analytic.norm(), numeric.norm(), 1e-10});
    worst = std::max(worst, (analytic - numeric).norm() / denom);
  }
  return worst;
}

using ParamFn = std::function<Var(const nn::Binding&)>;

/// Worst per-tensor relative error of the parameter gradients of `f`, probing
/// at most `max_entries` entries of each tensor (all when 0). Tensors whose
/// gradients are both below `floor` in norm count as agreeing.
inline double param_gradcheck(const nn::ParamStore& store, const ParamFn& f, std::size_t max_entries = 0,
                              double h = 1e-6, double floor = 1e-8) {
  nn::Binding b(store, true);
  Var out = f(b);
  ag::backward(out);
  auto grads = b.gradients();

  double worst = 0.0;
  for (const auto& [name, g] : grads) {
    const Mat& base = store.get(name);
    Eigen::Index n = base.size();
    Eigen::Index stride = (max_entries == 0 || static_cast<Eigen::Index>(max_entries) >= n)
                              ? 1
                              : (n + static_cast<Eigen::Index>(max_entries) - 1) / static_cast<Eigen::Index>(max_entries);
    double diff = 0.0, an = 0.0, nn_ = 0.0;
    for (Eigen::Index i = 0; i < n; i += stride) {
      auto eval = [&](double delta) {
        nn::ParamStore s = store;
        s.get_mut(name).data()[i] += delta;
        return f(nn::Binding(s, false)).scalar();
      };
      double num = (eval(h) - eval(-h)) / (2.0 * h);
      double a = g.data()[i];
      diff += (a - num) * (a - num);
      an += a * a;
      nn_ += num * num;
    }
    double denom = std::max(std::sqrt(an), std::sqrt(nn_));
    if (denom < floor) continue;
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

inline Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Mat random_stochastic(std::mt19937_64& rng, Eigen::Index n) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  Mat m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = u(rng);
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

}  // namespace xwin::testing
