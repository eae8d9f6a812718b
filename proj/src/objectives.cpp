#include "xwin/objectives.hpp"

#include "xwin/error.hpp"
#include "xwin/model.hpp"

#include <cmath>

namespace xwin::obj {

MimReduction parse_mim_reduction(const std::string& s) {
  if (s == "element_mean") return MimReduction::element_mean;
  if (s == "token_sum") return MimReduction::token_sum;
  throw InvalidArgument("unknown mim_reduction: " + s);
}

std::string to_string(MimReduction r) { return r == MimReduction::element_mean ? "element_mean" : "token_sum"; }

Var similarity_matrix(const Var& z, const Var& t, bool normalize) {
  require(z.rows() == t.rows() && z.cols() == t.cols(), "similarity: Z and T must have the same shape");
  Var zn = normalize ? ag::l2_normalize_rows(z) : z;
  Var tn = normalize ? ag::l2_normalize_rows(t) : t;
  return ag::matmul(zn, ag::transpose(tn));
}

Var softmax_rows(const Var& s, const Var& tau) { return ag::softmax_rows(ag::div_scalar(s, tau)); }

Mat softmax_rows(const Mat& s, double tau) {
  return ag::softmax_rows(ag::constant(s / tau)).value();
}

Var log_probs(const Var& s, const Var& tau) { return ag::log_softmax_rows(ag::div_scalar(s, tau)); }

Var infonce_from_log(const Var& log_p) {
  require(log_p.rows() == log_p.cols() && log_p.rows() >= 1, "infonce: P must be square");
  const Eigen::Index n = log_p.rows();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) acc += log_p.value()(i, i);
  std::vector<Var> parents{log_p};
  return ag::custom(Mat::Constant(1, 1, -acc / static_cast<double>(n)), parents, [n](ag::Node& self) {
    Mat g = Mat::Zero(n, n);
    g.diagonal().setConstant(-self.grad(0, 0) / static_cast<double>(n));
    self.parents[0]->accumulate(g);
  });
}

Var infonce(const Var& p) { return infonce_from_log(ag::log(p)); }

Mat affinity(const Mat& t, double tau_affinity, bool normalize) {
  require(tau_affinity > 0.0, "affinity temperature must be positive");
  Var tv = ag::constant(t);
  return softmax_rows(similarity_matrix(tv, tv, normalize).value(), tau_affinity);
}

Var affinity_loss_from_log(const Mat& a, const Var& log_p) {
  require(a.rows() == log_p.rows() && a.cols() == log_p.cols() && a.rows() == a.cols(),
          "affinity_loss: shape mismatch");
  const Eigen::Index n = a.rows();
  // Row-by-row, left-to-right accumulation so that A = I reproduces infonce bit for bit.
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double row = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) row += a(i, j) * log_p.value()(i, j);
    acc += row;
  }
  std::vector<Var> parents{log_p};
  return ag::custom(Mat::Constant(1, 1, -acc / static_cast<double>(n)), parents, [a, n](ag::Node& self) {
    self.parents[0]->accumulate(a * (-self.grad(0, 0) / static_cast<double>(n)));
  });
}

Var affinity_loss(const Mat& a, const Var& p) { return affinity_loss_from_log(a, ag::log(p)); }

AlignTerms align_loss(const Var& z, const Var& t, const Var& tau, double tau_affinity, double lambda_affinity,
                      bool normalize) {
  require(z.rows() >= 2, "alignment needs at least two pairs");
  Var log_p = log_probs(similarity_matrix(z, t, normalize), tau);
  AlignTerms out;
  out.infonce = infonce_from_log(log_p);
  out.affinity = affinity_loss_from_log(affinity(t.value(), tau_affinity, normalize), log_p);
  out.total = ag::add(out.infonce, ag::scale(out.affinity, lambda_affinity));
  return out;
}

namespace {

Var stream_mean(std::span<const Var> pred, std::span<const Var> tgt, MimReduction reduction) {
  require(pred.size() == tgt.size(), "mim_loss: prediction/target count mismatch");
  if (pred.empty()) return ag::scalar_constant(0.0);
  Var acc = ag::scalar_constant(0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(pred[i].rows() == tgt[i].rows() && pred[i].cols() == tgt[i].cols(), "mim_loss: token shape mismatch");
    if (pred[i].rows() == 0) continue;
    Var sq = ag::square(ag::sub(pred[i], tgt[i]));
    acc = ag::add(acc, reduction == MimReduction::element_mean ? ag::mean(sq) : ag::sum(sq));
  }
  return ag::scale(acc, 1.0 / static_cast<double>(pred.size()));
}

}  // namespace

Var mim_loss(std::span<const Var> pred_real, std::span<const Var> tgt_real, std::span<const Var> pred_sim,
             std::span<const Var> tgt_sim, MimReduction reduction) {
  return ag::add(stream_mean(pred_real, tgt_real, reduction), stream_mean(pred_sim, tgt_sim, reduction));
}

Var cls_loss(std::span<const Var> p_real, std::span<const Var> p_sim) {
  require(p_real.size() == p_sim.size() && !p_real.empty(), "cls_loss: expects N real and N simulated probabilities");
  const double lo = nn::kProbClamp, hi = 1.0 - nn::kProbClamp;
  Var acc = ag::scalar_constant(0.0);
  for (std::size_t i = 0; i < p_real.size(); ++i) {
    Var pr = ag::clamp(p_real[i], lo, hi);
    Var ps = ag::clamp(p_sim[i], lo, hi);
    acc = ag::add(acc, ag::add(ag::log(pr), ag::log(ag::add_constant(ag::scale(ps, -1.0), 1.0))));
  }
  return ag::scale(acc, -1.0 / static_cast<double>(p_real.size()));
}

Var domain_loss(std::span<const Var> z_patch, std::span<const Var> t_patch, std::span<const Var> p_pred) {
  require(z_patch.size() == t_patch.size() && z_patch.size() == p_pred.size() && !z_patch.empty(),
          "domain_loss: inconsistent batch sizes");
  const double lo = nn::kProbClamp, hi = 1.0 - nn::kProbClamp;
  Var acc = ag::scalar_constant(0.0);
  for (std::size_t i = 0; i < z_patch.size(); ++i) {
    Var mse = ag::mean(ag::square(ag::sub(z_patch[i], t_patch[i])));
    acc = ag::add(acc, ag::sub(mse, ag::log(ag::clamp(p_pred[i], lo, hi))));
  }
  return ag::scale(acc, 1.0 / static_cast<double>(z_patch.size()));
}

bool LossReport::all_finite() const {
  for (double v : {infonce, affinity, align, mim, cls, domain, overall})
    if (!std::isfinite(v)) return false;
  return true;
}

double overall_loss(double align, double mim, double domain, double cls, const LossWeights& w) {
  return align + w.mim * mim + w.domain * domain + w.cls * cls;
}

LossReport make_report(double infonce, double affinity, double mim, double domain, double cls, const LossWeights& w) {
  LossReport r;
  r.infonce = infonce;
  r.affinity = affinity;
  r.align = infonce + w.affinity * affinity;
  r.mim = mim;
  r.domain = domain;
  r.cls = cls;
  r.overall = overall_loss(r.align, mim, domain, cls, w);
  return r;
}

Var overall_loss(const Var& align, const Var& mim, const Var& domain, const Var& cls, const LossWeights& w) {
  return ag::add(ag::add(align, ag::scale(mim, w.mim)), ag::add(ag::scale(domain, w.domain), ag::scale(cls, w.cls)));
}

}  // namespace xwin::obj
