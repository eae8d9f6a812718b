#include "xwin/model.hpp"

#include "xwin/error.hpp"

#include <cmath>
#include <random>

namespace xwin::nn {

namespace {

Var linear(const Var& x, const Binding& p, const std::string& prefix) {
  return ag::add_row(ag::matmul(x, p(prefix + "weight")), p(prefix + "bias"));
}

Var layer_norm(const Var& x, const Binding& p, const std::string& prefix) {
  return ag::layer_norm_rows(x, p(prefix + "gamma"), p(prefix + "beta"));
}

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Mat xavier(int fan_in, int fan_out) {
    double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    Mat m(fan_in, fan_out);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng_);
    return m;
  }

  Mat normal(int rows, int cols, double std) {
    std::normal_distribution<double> n(0.0, std);
    Mat m(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = n(rng_);
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

void add_linear(ParamStore& s, Initializer& init, const std::string& prefix, int in, int out) {
  s.set(prefix + "weight", init.xavier(in, out));
  s.set(prefix + "bias", Mat::Zero(1, out));
}

void add_norm(ParamStore& s, const std::string& prefix, int dim) {
  s.set(prefix + "gamma", Mat::Ones(1, dim));
  s.set(prefix + "beta", Mat::Zero(1, dim));
}

void add_block(ParamStore& s, Initializer& init, const std::string& prefix, int dim, int mlp_ratio) {
  add_norm(s, prefix + "ln1.", dim);
  add_linear(s, init, prefix + "attn.qkv.", dim, 3 * dim);
  add_linear(s, init, prefix + "attn.proj.", dim, dim);
  add_norm(s, prefix + "ln2.", dim);
  add_linear(s, init, prefix + "mlp.fc1.", dim, mlp_ratio * dim);
  add_linear(s, init, prefix + "mlp.fc2.", mlp_ratio * dim, dim);
}

std::string block_prefix(const std::string& stack, int i) { return stack + "block" + std::to_string(i) + "."; }

Var run_blocks(Var x, const Binding& p, const std::string& stack, int depth, int heads,
               AttentionProbe* probe = nullptr) {
  for (int i = 0; i < depth; ++i) {
    x = transformer_block(x, p, block_prefix(stack, i), heads, probe);
    if (!x.value().allFinite()) {
      throw NumericalError("non-finite activations after " + block_prefix(stack, i));
    }
  }
  return x;
}

Mat pe_rows(int n_tokens, int dim, std::span<const int> rows) {
  Mat full = sinusoidal_pe(n_tokens, dim);
  Mat out(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = full.row(rows[i]);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
          "image_size must be divisible by patch_size");
  require(embed_dim > 0 && num_heads > 0 && embed_dim % num_heads == 0, "embed_dim must be divisible by num_heads");
  require(predictor_dim > 0 && predictor_dim % num_heads == 0, "predictor_dim must be divisible by num_heads");
  require(encoder_depth >= 0 && predictor_depth >= 0 && classifier_depth >= 0, "depths must be non-negative");
  require(mlp_ratio > 0, "mlp_ratio must be positive");
  require(action_dim == 1 || action_dim == 3, "action_dim must be 1 or 3");
}

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed, double init_tau, double init_tau_affinity) {
  cfg.validate();
  require(init_tau > 0.0 && init_tau_affinity > 0.0, "temperatures must be positive");
  ParamStore s;
  Initializer init(seed);
  const int d = cfg.embed_dim, dp = cfg.predictor_dim, pp = cfg.patch_size * cfg.patch_size;

  add_linear(s, init, "encoder.patch.", pp, d);
  for (int i = 0; i < cfg.encoder_depth; ++i) add_block(s, init, block_prefix("encoder.", i), d, cfg.mlp_ratio);
  add_norm(s, "encoder.norm.", d);

  for (const std::string stack : {"view_predictor.", "mask_predictor."}) {
    add_linear(s, init, stack + "embed.", d, dp);
    for (int i = 0; i < cfg.predictor_depth; ++i) add_block(s, init, block_prefix(stack, i), dp, cfg.mlp_ratio);
    add_norm(s, stack + "norm.", dp);
    add_linear(s, init, stack + "out.", dp, d);
  }
  add_linear(s, init, "view_predictor.action.", cfg.action_dim, dp);
  // The first pre-norm would make a bias-free a*w token depend on sign(a) only.
  s.set("view_predictor.action.bias", init.normal(1, dp, 1.0));
  s.set("mask_predictor.mask_token", init.normal(1, dp, 0.02));

  for (int i = 0; i < cfg.classifier_depth; ++i) add_block(s, init, block_prefix("classifier.", i), d, cfg.mlp_ratio);
  add_norm(s, "classifier.norm.", d);
  add_linear(s, init, "classifier.head.", d, 1);

  s.set("loss.log_tau", Mat::Constant(1, 1, std::log(init_tau)));
  s.set("loss.log_tau_affinity", Mat::Constant(1, 1, std::log(init_tau_affinity)));
  return s;
}

Mat sinusoidal_pe(int n_tokens, int dim) {
  Mat pe(n_tokens, dim);
  for (int pos = 0; pos < n_tokens; ++pos) {
    for (int c = 0; c < dim; ++c) {
      int i = c / 2;
      double freq = std::pow(10000.0, -2.0 * i / dim);
      pe(pos, c) = (c % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return pe;
}

Mat extract_patches(const Mat& image, int patch_size) {
  require(image.rows() == image.cols(), "images must be square");
  require(image.rows() % patch_size == 0, "image size must be divisible by patch size");
  const int g = static_cast<int>(image.rows()) / patch_size;
  Mat out(g * g, patch_size * patch_size);
  for (int gy = 0; gy < g; ++gy) {
    for (int gx = 0; gx < g; ++gx) {
      int t = gy * g + gx;
      for (int y = 0; y < patch_size; ++y)
        for (int x = 0; x < patch_size; ++x)
          out(t, y * patch_size + x) = image(gy * patch_size + y, gx * patch_size + x);
    }
  }
  return out;
}

Var patch_embed(const Mat& image, const Binding& p, const ModelConfig& cfg, bool add_pe) {
  require(image.rows() == cfg.image_size && image.cols() == cfg.image_size, "image size does not match the model");
  Var tokens = linear(ag::constant(extract_patches(image, cfg.patch_size)), p, "encoder.patch.");
  if (!add_pe) return tokens;
  return ag::add(tokens, ag::constant(sinusoidal_pe(cfg.num_tokens(), cfg.embed_dim)));
}

Var transformer_block(const Var& x, const Binding& p, const std::string& prefix, int heads, AttentionProbe* probe) {
  const Eigen::Index dim = x.cols();
  const Eigen::Index dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var h = layer_norm(x, p, prefix + "ln1.");
  Var qkv = linear(h, p, prefix + "attn.qkv.");
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int head = 0; head < heads; ++head) {
    Var q = ag::slice_cols(qkv, head * dh, dh);
    Var k = ag::slice_cols(qkv, dim + head * dh, dh);
    Var v = ag::slice_cols(qkv, 2 * dim + head * dh, dh);
    Var att = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(k)), scale));
    if (probe) probe->probs.push_back(att.value());
    outs.push_back(ag::matmul(att, v));
  }
  Var attn = linear(ag::concat_cols(outs), p, prefix + "attn.proj.");
  Var y = ag::add(x, attn);

  Var m = layer_norm(y, p, prefix + "ln2.");
  m = linear(ag::gelu(linear(m, p, prefix + "mlp.fc1.")), p, prefix + "mlp.fc2.");
  return ag::add(y, m);
}

Var encode(const Var& tokens, const Binding& p, const ModelConfig& cfg, EncoderRole role, AttentionProbe* probe) {
  if (!tokens.value().allFinite()) throw NumericalError("non-finite encoder input tokens");
  Var x = run_blocks(tokens, p, "encoder.", cfg.encoder_depth, cfg.num_heads, probe);
  x = layer_norm(x, p, "encoder.norm.");
  return role == EncoderRole::teacher ? ag::detach(x) : x;
}

Var encode_image(const Mat& image, const Binding& p, const ModelConfig& cfg, EncoderRole role) {
  return encode(patch_embed(image, p, cfg), p, cfg, role);
}

Var encode_visible(const Mat& image, std::span<const int> visible, const Binding& p, const ModelConfig& cfg,
                   EncoderRole role) {
  return encode(ag::gather_rows(patch_embed(image, p, cfg), visible), p, cfg, role);
}

Var predict_view(const Var& ctx_tokens, const Var& action, const Binding& p, const ModelConfig& cfg) {
  require(action.rows() == 1 && action.cols() == cfg.action_dim, "action vector has the wrong size");
  const Eigen::Index n = ctx_tokens.rows();
  Var h = linear(ctx_tokens, p, "view_predictor.embed.");
  h = ag::add(h, ag::constant(sinusoidal_pe(static_cast<int>(n), cfg.predictor_dim)));
  Var act = linear(action, p, "view_predictor.action.");
  std::vector<Var> seq{act, h};
  Var x = run_blocks(ag::concat_rows(seq), p, "view_predictor.", cfg.predictor_depth, cfg.num_heads);
  x = layer_norm(x, p, "view_predictor.norm.");
  x = linear(x, p, "view_predictor.out.");
  return ag::slice_rows(x, 1, n);
}

Var predict_view(const Var& ctx_tokens, double action_rad, const Binding& p, const ModelConfig& cfg) {
  Mat a = Mat::Zero(1, cfg.action_dim);
  a(0, 0) = action_rad;
  return predict_view(ctx_tokens, ag::constant(a), p, cfg);
}

Var predict_mask(const Var& visible_tokens, std::span<const int> visible, std::span<const int> masked,
                 const Binding& p, const ModelConfig& cfg) {
  require(static_cast<std::size_t>(visible_tokens.rows()) == visible.size(), "visible token count mismatch");
  if (masked.empty()) return ag::constant(Mat(0, cfg.embed_dim));
  const int n = cfg.num_tokens(), dp = cfg.predictor_dim;
  Var h = linear(visible_tokens, p, "mask_predictor.embed.");
  h = ag::add(h, ag::constant(pe_rows(n, dp, visible)));
  Var m = ag::repeat_rows(p("mask_predictor.mask_token"), static_cast<Eigen::Index>(masked.size()));
  m = ag::add(m, ag::constant(pe_rows(n, dp, masked)));
  std::vector<Var> seq{h, m};
  Var x = run_blocks(ag::concat_rows(seq), p, "mask_predictor.", cfg.predictor_depth, cfg.num_heads);
  x = layer_norm(x, p, "mask_predictor.norm.");
  x = linear(x, p, "mask_predictor.out.");
  return ag::slice_rows(x, static_cast<Eigen::Index>(visible.size()), static_cast<Eigen::Index>(masked.size()));
}

Var classify_logit(const Var& tokens, const Binding& p, const ModelConfig& cfg) {
  Var x = run_blocks(tokens, p, "classifier.", cfg.classifier_depth, cfg.num_heads);
  x = layer_norm(x, p, "classifier.norm.");
  return linear(ag::mean_rows(x), p, "classifier.head.");
}

Var classify_domain(const Var& tokens, const Binding& p, const ModelConfig& cfg) {
  return ag::clamp(ag::sigmoid(classify_logit(tokens, p, cfg)), kProbClamp, 1.0 - kProbClamp);
}

void ema_update(ParamStore& teacher, const ParamStore& student, double momentum) {
  require(momentum >= 0.0 && momentum <= 1.0, "EMA momentum must lie in [0, 1]");
  for (auto& [name, t] : teacher) {
    const Mat& s = student.get(name);
    require(s.rows() == t.rows() && s.cols() == t.cols(), "EMA shape mismatch for " + name);
    t = momentum * t + (1.0 - momentum) * s;
  }
}

}  // namespace xwin::nn
