#pragma once

// Patch embedding, transformer encoder, action-conditioned view predictor,
// mask predictor and domain classifier. All operations work on one sample at
// a time: a token batch for a single image is a (tokens x dim) matrix.

#include "xwin/autograd.hpp"
#include "xwin/params.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace xwin::nn {

using ag::Var;

struct ModelConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 128;
  int encoder_depth = 4;
  int num_heads = 4;
  int mlp_ratio = 4;
  int predictor_dim = 64;
  int predictor_depth = 2;
  int classifier_depth = 2;
  int action_dim = 1;  // 1 for yaw actions, 3 for (yaw, pitch, roll)
  std::string dtype = "f64";

  int grid() const { return image_size / patch_size; }
  int num_tokens() const { return grid() * grid(); }
  void validate() const;
};

enum class EncoderRole { student, teacher };

/// Initial parameters for the student stack (encoder, both predictors,
/// classifier, temperatures). Deterministic in the seed.
ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed, double init_tau = 0.07,
                       double init_tau_affinity = 0.07);

/// Names of the parameters that make up the encoder f_theta (and its EMA copy).
inline const std::vector<std::string>& encoder_prefixes() {
  static const std::vector<std::string> p{"encoder."};
  return p;
}

/// (n_tokens x dim) interleaved sin/cos table: even columns sin, odd cos,
/// frequency 10000^(-2i/dim).
Mat sinusoidal_pe(int n_tokens, int dim);

/// Row-major non-overlapping patches, one per row (tokens x patch_size^2).
Mat extract_patches(const Mat& image, int patch_size);

/// Linear patch projection, plus the positional encoding when `add_pe`.
Var patch_embed(const Mat& image, const Binding& p, const ModelConfig& cfg, bool add_pe = true);

/// Attention probabilities of each head, recorded when a probe is passed.
struct AttentionProbe {
  std::vector<Mat> probs;
};

/// Pre-norm transformer block stack plus final layer norm, prefix "encoder.".
/// Teacher outputs are detached. Throws NumericalError on non-finite activations.
Var encode(const Var& tokens, const Binding& p, const ModelConfig& cfg, EncoderRole role,
           AttentionProbe* probe = nullptr);

/// patch_embed + encode over all tokens.
Var encode_image(const Mat& image, const Binding& p, const ModelConfig& cfg, EncoderRole role);

/// patch_embed, keep the rows listed in `visible`, encode.
Var encode_visible(const Mat& image, std::span<const int> visible, const Binding& p, const ModelConfig& cfg,
                   EncoderRole role);

/// One pre-norm transformer block (attention + GELU MLP).
Var transformer_block(const Var& x, const Binding& p, const std::string& prefix, int heads,
                      AttentionProbe* probe = nullptr);

/// Action token = Linear(action); sequence = [action] ++ (embed(ctx) + PE);
/// predictor blocks; the action slot is dropped. `action` is 1 x action_dim
/// and holds radians.
Var predict_view(const Var& ctx_tokens, const Var& action, const Binding& p, const ModelConfig& cfg);
Var predict_view(const Var& ctx_tokens, double action_rad, const Binding& p, const ModelConfig& cfg);

/// Encoded visible tokens ++ mask token at each masked index, both with PE at
/// their true grid positions; returns the predictions at the masked slots in
/// the order given by `masked`.
Var predict_mask(const Var& visible_tokens, std::span<const int> visible, std::span<const int> masked,
                 const Binding& p, const ModelConfig& cfg);

/// Domain classifier: two blocks, final norm, global average pool, linear.
Var classify_logit(const Var& tokens, const Binding& p, const ModelConfig& cfg);

/// sigmoid(logit) clamped to [1e-7, 1 - 1e-7].
Var classify_domain(const Var& tokens, const Binding& p, const ModelConfig& cfg);

inline Var global_avg_pool(const Var& tokens) { return ag::mean_rows(tokens); }

/// teacher <- m * teacher + (1 - m) * student for every tensor present in the
/// teacher store.
void ema_update(ParamStore& teacher, const ParamStore& student, double momentum);

constexpr double kProbClamp = 1e-7;

}  // namespace xwin::nn
