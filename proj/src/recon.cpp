#include "xwin/error.hpp"
#include "xwin/recon.hpp"
#include "xwin/trainer.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <sstream>

namespace xwin::recon {

namespace {

Var linear(const Var& x, const nn::Binding& p, const std::string& prefix) {
  return ag::add_row(ag::matmul(x, p(prefix + "weight")), p(prefix + "bias"));
}

Mat xavier(std::mt19937_64& rng, int in, int out) {
  std::uniform_real_distribution<double> u(-std::sqrt(6.0 / (in + out)), std::sqrt(6.0 / (in + out)));
  Mat m(in, out);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
  return m;
}

void add_linear(nn::ParamStore& s, std::mt19937_64& rng, const std::string& prefix, int in, int out) {
  s.set(prefix + "weight", xavier(rng, in, out));
  s.set(prefix + "bias", Mat::Zero(1, out));
}

void add_norm(nn::ParamStore& s, const std::string& prefix, int dim) {
  s.set(prefix + "gamma", Mat::Ones(1, dim));
  s.set(prefix + "beta", Mat::Zero(1, dim));
}

struct Adam {
  nn::ParamStore m, v;
  int t = 0;

  explicit Adam(const nn::ParamStore& params) {
    for (const auto& [name, p] : params) {
      m.set(name, Mat::Zero(p.rows(), p.cols()));
      v.set(name, Mat::Zero(p.rows(), p.cols()));
    }
  }

  void step(nn::ParamStore& params, const std::map<std::string, Mat>& grads, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
    for (auto& [name, p] : params) {
      auto it = grads.find(name);
      if (it == grads.end()) continue;
      Mat& mm = m.get_mut(name);
      Mat& vv = v.get_mut(name);
      mm = b1 * mm + (1.0 - b1) * it->second;
      vv = b2 * vv + (1.0 - b2) * it->second.cwiseProduct(it->second);
      p -= lr * ((mm / bc1).array() / ((vv / bc2).array().sqrt() + eps)).matrix();
    }
  }
};

Var latent_var(const Mat& context, const Action& action, const nn::Binding& stack, const nn::ModelConfig& model) {
  Var ctx = nn::encode_image(context, stack, model, nn::EncoderRole::student);
  return nn::predict_view(ctx, ag::constant(action_vector(action, model.action_dim)), stack, model);
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<int> nearest_indices(const Mat& tokens, const Mat& codebook) {
  require(tokens.cols() == codebook.cols(), "token and codebook dimensions differ");
  require(codebook.rows() > 0, "empty codebook");
  std::vector<int> idx(static_cast<std::size_t>(tokens.rows()));
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
      double d = (codebook.row(k) - tokens.row(i)).squaredNorm();
      if (d < best) {  // strict: the lowest index keeps ties
        best = d;
        arg = static_cast<int>(k);
      }
    }
    idx[static_cast<std::size_t>(i)] = arg;
  }
  return idx;
}

VqResult vq_quantize(const Var& tokens, const Var& codebook) {
  VqResult r;
  r.indices = nearest_indices(tokens.value(), codebook.value());
  Var e = ag::gather_rows(codebook, r.indices);
  r.quantized = ag::straight_through(tokens, ag::detach(e));
  r.codebook_loss = ag::mean(ag::square(ag::detach(tokens) - e));
  r.commitment_loss = ag::mean(ag::square(tokens - ag::detach(e)));
  return r;
}

double codebook_usage(std::span<const int> indices, int codebook_size) {
  require(codebook_size > 0, "codebook size must be positive");
  if (indices.empty()) throw InvalidArgument("codebook usage of an empty index stream");
  std::vector<char> seen(static_cast<std::size_t>(codebook_size), 0);
  for (int i : indices) {
    require(i >= 0 && i < codebook_size, "codebook index out of range");
    seen[static_cast<std::size_t>(i)] = 1;
  }
  std::size_t used = 0;
  for (char c : seen) used += c;
  return static_cast<double>(used) / codebook_size;
}

// ---------------------------------------------------------------------------

Codebook DecoderParams::codebook() const {
  Codebook c;
  c.entries = params.get("codebook");
  c.usage = usage;
  if (c.usage.empty()) c.usage.assign(static_cast<std::size_t>(c.entries.rows()), 0);
  return c;
}

DecoderParams init_decoder(const DecoderConfig& cfg, const nn::ModelConfig& model) {
  model.validate();
  require(cfg.codebook_size > 0 && cfg.codebook_dim > 0, "codebook shape must be positive");
  require(cfg.depth >= 0 && cfg.heads > 0 && cfg.codebook_dim % cfg.heads == 0,
          "codebook dimension must divide into the decoder heads");
  DecoderParams dp;
  dp.cfg = cfg;
  dp.model = model;
  std::mt19937_64 rng(cfg.seed);
  const int d = cfg.codebook_dim;
  add_linear(dp.params, rng, "decoder.in.", model.embed_dim, d);
  for (int i = 0; i < cfg.depth; ++i) {
    std::string pre = "decoder.block" + std::to_string(i) + ".";
    add_norm(dp.params, pre + "ln1.", d);
    add_linear(dp.params, rng, pre + "attn.qkv.", d, 3 * d);
    add_linear(dp.params, rng, pre + "attn.proj.", d, d);
    add_norm(dp.params, pre + "ln2.", d);
    add_linear(dp.params, rng, pre + "mlp.fc1.", d, cfg.mlp_ratio * d);
    add_linear(dp.params, rng, pre + "mlp.fc2.", cfg.mlp_ratio * d, d);
  }
  add_norm(dp.params, "decoder.norm.", d);
  add_linear(dp.params, rng, "decoder.head.", d, model.patch_size * model.patch_size);
  std::normal_distribution<double> n(0.0, 1.0);
  Mat cb(cfg.codebook_size, d);
  for (Eigen::Index j = 0; j < cb.cols(); ++j)
    for (Eigen::Index i = 0; i < cb.rows(); ++i) cb(i, j) = n(rng);
  dp.params.set("codebook", cb);
  dp.usage.assign(static_cast<std::size_t>(cfg.codebook_size), 0);
  return dp;
}

Var decoder_project(const Var& latent, const nn::Binding& p) { return linear(latent, p, "decoder.in."); }

Var decoder_forward(const Var& quantized, const nn::Binding& p, const DecoderParams& dp) {
  Var x = ag::add(quantized, ag::constant(nn::sinusoidal_pe(static_cast<int>(quantized.rows()), dp.cfg.codebook_dim)));
  for (int i = 0; i < dp.cfg.depth; ++i)
    x = nn::transformer_block(x, p, "decoder.block" + std::to_string(i) + ".", dp.cfg.heads);
  x = ag::layer_norm_rows(x, p("decoder.norm.gamma"), p("decoder.norm.beta"));
  return linear(x, p, "decoder.head.");
}

Mat unpatchify(const Mat& patches, int image_size, int patch_size) {
  const int g = image_size / patch_size;
  require(patches.rows() == g * g && patches.cols() == patch_size * patch_size, "patch matrix has the wrong shape");
  Mat img(image_size, image_size);
  for (int t = 0; t < g * g; ++t) {
    int r0 = (t / g) * patch_size, c0 = (t % g) * patch_size;
    for (int i = 0; i < patch_size; ++i)
      for (int j = 0; j < patch_size; ++j) img(r0 + i, c0 + j) = patches(t, i * patch_size + j);
  }
  return img;
}

Mat frozen_latent(const Mat& context, const Action& action, const nn::ParamStore& stack,
                  const nn::ModelConfig& model) {
  nn::Binding p(stack, false);
  return latent_var(context, action, p, model).value();
}

DecoderTrainResult train_decoder(const nn::ParamStore& stack, const nn::ModelConfig& model,
                                 const std::vector<DecoderSample>& samples, const DecoderConfig& cfg,
                                 const std::function<void(const DecoderStepLog&)>& on_step) {
  require(!samples.empty(), "decoder training needs at least one sample");
  require(cfg.batch > 0 && cfg.steps >= 0, "decoder batch and step count must be positive");
  DecoderTrainResult res;
  res.decoder = init_decoder(cfg, model);
  DecoderParams& dp = res.decoder;

  double scale = 0.0;
  std::vector<Mat> latents, targets;
  for (const auto& s : samples) {
    require(s.target.rows() == model.image_size && s.target.cols() == model.image_size,
            "decoder target must match the model image size");
    scale = std::max(scale, s.target.cwiseAbs().maxCoeff());
    latents.push_back(frozen_latent(s.context, s.action, stack, model));
  }
  dp.target_scale = scale > 0.0 ? scale : 1.0;
  for (const auto& s : samples) targets.push_back(nn::extract_patches(s.target / dp.target_scale, model.patch_size));

  std::mt19937_64 rng(cfg.seed ^ 0x5eedc0debeefULL);
  {
    // Codebook starts at randomly chosen projected latents plus a little noise.
    nn::Binding p(dp.params, false);
    std::vector<Mat> projected;
    for (const auto& l : latents) projected.push_back(decoder_project(ag::constant(l), p).value());
    Mat& cb = dp.params.get_mut("codebook");
    std::uniform_int_distribution<std::size_t> pick_s(0, projected.size() - 1);
    std::uniform_int_distribution<Eigen::Index> pick_t(0, projected[0].rows() - 1);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (Eigen::Index k = 0; k < cb.rows(); ++k) {
      cb.row(k) = projected[pick_s(rng)].row(pick_t(rng));
      for (Eigen::Index j = 0; j < cb.cols(); ++j) cb(k, j) += noise(rng);
    }
  }

  Adam adam(dp.params);
  std::vector<int> last_used(static_cast<std::size_t>(cfg.codebook_size), 0);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  for (int step = 0; step < cfg.steps; ++step) {
    nn::Binding p(dp.params, true);
    Var cb = p("codebook");
    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg.batch));
    for (auto& b : batch) b = pick(rng);

    DecoderStepLog log;
    log.step = step;
    std::unique_ptr<nn::Binding> audit;
    if (cfg.audit_frozen) audit = std::make_unique<nn::Binding>(stack, true);

    std::vector<Var> losses;
    std::vector<Mat> projected;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (std::size_t b : batch) {
      Var latent = audit ? ag::detach(latent_var(samples[b].context, samples[b].action, *audit, model))
                         : ag::constant(latents[b]);
      Var z = decoder_project(latent, p);
      projected.push_back(z.value());
      VqResult q = vq_quantize(z, cb);
      for (int i : q.indices) {
        last_used[static_cast<std::size_t>(i)] = step;
        ++dp.usage[static_cast<std::size_t>(i)];
      }
      Var out = decoder_forward(q.quantized, p, dp);
      Var mse = ag::mean(ag::square(out - ag::constant(targets[b])));
      Var total = ag::add(ag::add(mse, q.codebook_loss), ag::scale(q.commitment_loss, cfg.commitment));
      losses.push_back(ag::scale(total, inv_b));
      log.mse += mse.scalar() * inv_b;
      log.codebook += q.codebook_loss.scalar() * inv_b;
      log.commitment += q.commitment_loss.scalar() * inv_b;
    }
    Var loss = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) loss = ag::add(loss, losses[i]);
    log.loss = loss.scalar();
    if (!std::isfinite(log.loss)) throw NumericalError("decoder loss is not finite");
    ag::backward(loss);
    if (audit) log.frozen_grad_norm = std::sqrt(nn::grad_sq_norm(audit->gradients()));
    adam.step(dp.params, p.gradients(), cfg.lr);

    if (step + 1 >= cfg.dead_window) {
      std::vector<int> dead;
      for (int k = 0; k < cfg.codebook_size; ++k)
        if (step - last_used[static_cast<std::size_t>(k)] >= cfg.dead_window) dead.push_back(k);
      if (static_cast<double>(dead.size()) > cfg.dead_fraction * cfg.codebook_size) {
        res.warnings.push_back("step " + std::to_string(step) + ": " + std::to_string(dead.size()) + " of " +
                               std::to_string(cfg.codebook_size) + " codebook entries unused for " +
                               std::to_string(cfg.dead_window) + " steps; re-initialising them");
        ++res.reinit_events;
        Mat& entries = dp.params.get_mut("codebook");
        std::uniform_int_distribution<std::size_t> pick_p(0, projected.size() - 1);
        std::uniform_int_distribution<Eigen::Index> pick_t(0, projected[0].rows() - 1);
        for (int k : dead) {
          entries.row(k) = projected[pick_p(rng)].row(pick_t(rng));
          adam.m.get_mut("codebook").row(k).setZero();
          adam.v.get_mut("codebook").row(k).setZero();
          last_used[static_cast<std::size_t>(k)] = step;
        }
      }
    }
    res.log.push_back(log);
    if (on_step) on_step(log);
  }
  return res;
}

DecoderEval evaluate_decoder(const nn::ParamStore& stack, const DecoderParams& decoder,
                             const std::vector<DecoderSample>& samples) {
  require(!samples.empty(), "nothing to evaluate");
  DecoderEval ev;
  std::vector<int> all;
  nn::Binding p(decoder.params, false);
  for (const auto& s : samples) {
    Var z = decoder_project(ag::constant(frozen_latent(s.context, s.action, stack, decoder.model)), p);
    VqResult q = vq_quantize(z, p("codebook"));
    all.insert(all.end(), q.indices.begin(), q.indices.end());
    Mat out = unpatchify(decoder_forward(q.quantized, p, decoder).value(), decoder.model.image_size,
                         decoder.model.patch_size) *
              decoder.target_scale;
    ev.mse += (out - s.target).squaredNorm() / static_cast<double>(out.size()) /
              (decoder.target_scale * decoder.target_scale);
    double range = s.target.maxCoeff() - s.target.minCoeff();
    if (range <= 0.0) range = 1.0;
    std::span<const double> a(s.target.data(), static_cast<std::size_t>(s.target.size()));
    std::span<const double> b(out.data(), static_cast<std::size_t>(out.size()));
    ev.psnr_per_sample.push_back(psnr(a, b, range));
    ev.ssim_per_sample.push_back(ssim(s.target, out, range));
  }
  const double n = static_cast<double>(samples.size());
  ev.mse /= n;
  for (double v : ev.psnr_per_sample) ev.psnr += v / n;
  for (double v : ev.ssim_per_sample) ev.ssim += v / n;
  ev.usage = codebook_usage(all, decoder.cfg.codebook_size);
  return ev;
}

std::vector<CodebookSweepRow> codebook_sweep(const nn::ParamStore& stack, const nn::ModelConfig& model,
                                             const std::vector<DecoderSample>& train,
                                             const std::vector<DecoderSample>& test, const DecoderConfig& base,
                                             std::span<const int> sizes, std::span<const int> dims) {
  std::vector<CodebookSweepRow> rows;
  for (int k : sizes) {
    for (int d : dims) {
      DecoderConfig cfg = base;
      cfg.codebook_size = k;
      cfg.codebook_dim = d;
      auto res = train_decoder(stack, model, train, cfg);
      auto ev = evaluate_decoder(stack, res.decoder, test);
      CodebookSweepRow row{k, d, ev.psnr, ev.ssim, ev.usage, 0.0};
      const std::size_t tail = std::max<std::size_t>(1, res.log.size() / 10);
      for (std::size_t i = res.log.size() - std::min(tail, res.log.size()); i < res.log.size(); ++i)
        row.train_loss += res.log[i].loss / static_cast<double>(tail);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string codebook_sweep_csv(const std::vector<CodebookSweepRow>& rows) {
  std::ostringstream out;
  out << "codebook_size,codebook_dim,psnr,ssim,usage,train_loss\n";
  for (const auto& r : rows)
    out << r.codebook_size << ',' << r.codebook_dim << ',' << format_double(r.psnr) << ',' << format_double(r.ssim)
        << ',' << format_double(r.usage) << ',' << format_double(r.train_loss) << '\n';
  return out.str();
}

ProjectionImage render_latent_projection(const Mat& context, const Action& action, const nn::ParamStore& stack,
                                         const DecoderParams& decoder, const ConeBeamGeometry& rig,
                                         std::vector<int>* indices) {
  require(rig.nu == decoder.model.image_size && rig.nv == decoder.model.image_size,
          "detector size must equal the model image size");
  nn::Binding p(decoder.params, false);
  Var z = decoder_project(ag::constant(frozen_latent(context, action, stack, decoder.model)), p);
  VqResult q = vq_quantize(z, p("codebook"));
  if (indices) *indices = q.indices;
  Mat out = unpatchify(decoder_forward(q.quantized, p, decoder).value(), decoder.model.image_size,
                       decoder.model.patch_size) *
            decoder.target_scale;
  return from_matrix(out, rig.pitch);
}

std::vector<DecoderSample> make_decoder_samples(const TrainConfig& cfg, ProjectionCache& cache, int first, int count,
                                                int views_per_phantom, std::uint64_t seed) {
  require(count > 0 && views_per_phantom > 0, "decoder sample counts must be positive");
  const int kmax = static_cast<int>(std::floor(cfg.action_bound / cfg.delta_phi + 1e-9));
  std::vector<DecoderSample> out;
  for (int i = 0; i < count; ++i) {
    std::uint64_t id = static_cast<std::uint64_t>(first + i);
    std::mt19937_64 rng(derive_seed(seed, 0x6465636fULL, id));
    std::uniform_int_distribution<int> k(-kmax, kmax);
    Mat ctx = cache.display(id, 0.0);
    for (int v = 0; v < views_per_phantom; ++v) {
      Action a{k(rng), cfg.delta_phi};
      out.push_back({ctx, a, to_matrix(cache.line_integrals(id, a.angle_deg()))});
    }
  }
  return out;
}

}  // namespace xwin::recon
