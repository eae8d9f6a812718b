#pragma once

// Training objectives: contrastive alignment with the affinity regulariser,
// masked-token regression, domain classification and the structure-preserving
// domain loss. Every loss is a scalar graph node so that gradients reach
// whatever inputs require them; detached inputs act as stop-gradients.

#include "xwin/autograd.hpp"

#include <span>
#include <string>
#include <vector>

namespace xwin::obj {

using ag::Mat;
using ag::Var;

enum class MimReduction { element_mean, token_sum };

MimReduction parse_mim_reduction(const std::string& s);
std::string to_string(MimReduction r);

struct LossWeights {
  double affinity = 0.4;
  double mim = 1.0;
  double domain = 0.6;
  double cls = 1.0;
};

/// S_ij = z_i . t_j, on L2-normalised rows when `normalize`.
Var similarity_matrix(const Var& z, const Var& t, bool normalize = true);

/// Row softmax of S / tau with max subtraction. `tau` is a 1x1 node.
Var softmax_rows(const Var& s, const Var& tau);
Mat softmax_rows(const Mat& s, double tau);

/// log P computed stably as log_softmax(S / tau).
Var log_probs(const Var& s, const Var& tau);

/// -(1/N) sum_i log P_ii, with P given either directly or as log P.
Var infonce(const Var& p);
Var infonce_from_log(const Var& log_p);

/// Row softmax of the target-vs-target similarity at temperature tau_aff.
/// Returned as a plain matrix: no gradient flows through A.
Mat affinity(const Mat& t, double tau_affinity, bool normalize = true);

/// -(1/N) sum_ij A_ij log P_ij. Reduces to infonce exactly when A = I.
Var affinity_loss(const Mat& a, const Var& p);
Var affinity_loss_from_log(const Mat& a, const Var& log_p);

struct AlignTerms {
  Var total, infonce, affinity;
};

/// L_InfoNCE + lambda * L_affinity on pooled predictions Z and targets T.
/// `tau` is exp(log tau) as a node; A is built from detached T.
AlignTerms align_loss(const Var& z, const Var& t, const Var& tau, double tau_affinity, double lambda_affinity,
                      bool normalize = true);

/// Sum over the two streams of the batch mean of the per-sample regression
/// error between predicted and target mask tokens. Targets should be detached.
Var mim_loss(std::span<const Var> pred_real, std::span<const Var> tgt_real, std::span<const Var> pred_sim,
             std::span<const Var> tgt_sim, MimReduction reduction = MimReduction::element_mean);

/// -(1/N) sum (log p_real + log(1 - p_sim)), probabilities clamped to [1e-7, 1-1e-7].
Var cls_loss(std::span<const Var> p_real, std::span<const Var> p_sim);

/// (1/N) sum mean((z - t)^2) - (1/N) sum log p.
Var domain_loss(std::span<const Var> z_patch, std::span<const Var> t_patch, std::span<const Var> p_pred);

struct LossReport {
  double infonce = 0, affinity = 0, align = 0, mim = 0, cls = 0, domain = 0, overall = 0;

  bool all_finite() const;
  bool operator==(const LossReport&) const = default;
};

/// L_align + lambda_mim L_mim + lambda_domain L_domain + lambda_cls L_cls.
double overall_loss(double align, double mim, double domain, double cls, const LossWeights& w);
LossReport make_report(double infonce, double affinity, double mim, double domain, double cls, const LossWeights& w);

Var overall_loss(const Var& align, const Var& mim, const Var& domain, const Var& cls, const LossWeights& w);

}  // namespace xwin::obj
