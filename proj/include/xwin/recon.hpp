#pragma once

// 3D loop: a vector-quantised decoder that renders projections from frozen
// view-predictor latents, FDK reconstruction, and image metrics.

#include "xwin/autograd.hpp"
#include "xwin/config.hpp"
#include "xwin/dataset.hpp"
#include "xwin/model.hpp"
#include "xwin/params.hpp"
#include "xwin/projector.hpp"
#include "xwin/volume.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace xwin::recon {

using ag::Mat;
using ag::Var;

// ---------------------------------------------------------------------------
// Vector quantisation.

struct Codebook {
  Mat entries;                      // K x d
  std::vector<std::int64_t> usage;  // times each entry was selected

  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }
};

/// Index of the nearest row of `codebook` for each row of `tokens`
/// (squared Euclidean distance, lowest index on ties).
std::vector<int> nearest_indices(const Mat& tokens, const Mat& codebook);

struct VqResult {
  std::vector<int> indices;
  Var quantized;        // value e_idx, gradient passed straight to the tokens
  Var codebook_loss;    // mean |sg(x) - e|^2, reaches the codebook only
  Var commitment_loss;  // mean |x - sg(e)|^2, reaches the tokens only
};

VqResult vq_quantize(const Var& tokens, const Var& codebook);

/// Fraction of the K entries selected at least once. Throws on an empty stream.
double codebook_usage(std::span<const int> indices, int codebook_size);

// ---------------------------------------------------------------------------
// Decoder.

struct DecoderConfig {
  int codebook_size = 1024;
  int codebook_dim = 128;
  int depth = 1;
  int heads = 4;
  int mlp_ratio = 2;
  double commitment = 0.25;
  double lr = 1e-3;
  int steps = 500;
  int batch = 8;
  int dead_window = 1000;      // steps without use before an entry counts as dead
  double dead_fraction = 0.5;  // re-init when more than this share is dead
  std::uint64_t seed = 0;
  bool audit_frozen = false;  // re-run the frozen stack each step and log its gradient norm
};

/// Decoder parameters (prefix "decoder.") plus the codebook ("codebook").
/// Outputs are line integrals divided by `target_scale`.
struct DecoderParams {
  DecoderConfig cfg;
  nn::ModelConfig model;  // frozen stack the latents come from
  nn::ParamStore params;
  double target_scale = 1.0;
  std::vector<std::int64_t> usage;  // selections per entry during training

  Codebook codebook() const;
};

DecoderParams init_decoder(const DecoderConfig& cfg, const nn::ModelConfig& model);

/// Projection of the latent tokens into codebook space (tokens x d).
Var decoder_project(const Var& latent, const nn::Binding& p);

/// Quantised tokens -> per-token pixel patches (tokens x patch^2), scaled.
Var decoder_forward(const Var& quantized, const nn::Binding& p, const DecoderParams& dp);

/// Rows of patches back to an image (inverse of nn::extract_patches).
Mat unpatchify(const Mat& patches, int image_size, int patch_size);

/// One supervised pair: context display image, action, target line integrals
/// (image_size x image_size).
struct DecoderSample {
  Mat context;
  Action action;
  Mat target;
};

/// Frozen-stack latent for a sample: predict_view(encode(context), action).
Mat frozen_latent(const Mat& context, const Action& action, const nn::ParamStore& stack, const nn::ModelConfig& model);

struct DecoderStepLog {
  int step = 0;
  double loss = 0.0, mse = 0.0, codebook = 0.0, commitment = 0.0;
  double frozen_grad_norm = 0.0;
};

struct DecoderTrainResult {
  DecoderParams decoder;
  std::vector<DecoderStepLog> log;
  int reinit_events = 0;
  std::vector<std::string> warnings;
};

/// Minimises pixel MSE + codebook loss + commitment * commitment loss with
/// Adam. The encoder and predictor stay frozen; their gradient norm is logged
/// each step. When more than dead_fraction of the entries have gone unused for
/// dead_window steps, a warning is recorded and the dead entries are reset to
/// randomly chosen projected latents of the current step.
DecoderTrainResult train_decoder(const nn::ParamStore& stack, const nn::ModelConfig& model,
                                 const std::vector<DecoderSample>& samples, const DecoderConfig& cfg,
                                 const std::function<void(const DecoderStepLog&)>& on_step = {});

struct DecoderEval {
  double mse = 0.0;   // on scaled targets
  double psnr = 0.0;  // mean over samples, range = max - min of each target
  double ssim = 0.0;
  double usage = 0.0;
  std::vector<double> psnr_per_sample, ssim_per_sample;
};

DecoderEval evaluate_decoder(const nn::ParamStore& stack, const DecoderParams& decoder,
                             const std::vector<DecoderSample>& samples);

struct CodebookSweepRow {
  int codebook_size = 0, codebook_dim = 0;
  double psnr = 0.0, ssim = 0.0, usage = 0.0;
  double train_loss = 0.0;  // mean over the last tenth of the steps
};

/// Trains one decoder per (K, d) pair with `base` for everything else and
/// evaluates it on `test`.
std::vector<CodebookSweepRow> codebook_sweep(const nn::ParamStore& stack, const nn::ModelConfig& model,
                                             const std::vector<DecoderSample>& train,
                                             const std::vector<DecoderSample>& test, const DecoderConfig& base,
                                             std::span<const int> sizes, std::span<const int> dims);

/// CSV with header codebook_size,codebook_dim,psnr,ssim,usage,train_loss.
std::string codebook_sweep_csv(const std::vector<CodebookSweepRow>& rows);

/// encode context -> predict_view(action) -> quantise -> decode. Returns line
/// integrals with the detector pitch of `rig`; dimensions equal the detector.
ProjectionImage render_latent_projection(const Mat& context, const Action& action, const nn::ParamStore& stack,
                                         const DecoderParams& decoder, const ConeBeamGeometry& rig,
                                         std::vector<int>* indices = nullptr);

/// Supervised pairs from phantoms [first, first + count): frontal context,
/// target at a seeded yaw on the action lattice within +-action_bound.
std::vector<DecoderSample> make_decoder_samples(const TrainConfig& cfg, ProjectionCache& cache, int first, int count,
                                                int views_per_phantom, std::uint64_t seed);

// ---------------------------------------------------------------------------
// FDK.

/// Discrete band-limited ramp kernel value h[n] for detector spacing tau.
double ramp_kernel(int n, double tau);

/// Linear convolution of one row with the ramp kernel (zero padded, no
/// spacing factor). `use_fft` selects the FFTW path.
std::vector<double> ramp_filter(std::span<const double> row, double pitch, bool use_fft = false);

struct GridSpec {
  int nx = 64, ny = 64, nz = 64;
  Vec3 spacing{4.0, 4.0, 4.0};
};

struct FdkOptions {
  bool use_fft = false;
};

/// Circular-orbit FDK. All geometries must share sod, sdd, detector size and
/// pitch and have no tilt; yaw coverage must reach 180 degrees.
VoxelVolume fdk_reconstruct(std::span<const ProjectionImage> projections, std::span<const ConeBeamGeometry> geoms,
                            const GridSpec& grid, const FdkOptions& opts = {});

/// Angular coverage (degrees): 360 minus the largest circular gap between
/// consecutive distinct yaws.
double angular_coverage(std::span<const double> betas_deg);

// ---------------------------------------------------------------------------
// Metrics.

constexpr double kPsnrCap = 99.0;

/// 10 log10(range^2 / MSE), capped at kPsnrCap.
double psnr(std::span<const double> a, std::span<const double> b, double data_range);

/// Mean SSIM over valid 7x7 uniform windows; K1 = 0.01, K2 = 0.03, sample
/// covariance. `data_range` <= 0 uses max - min of `a`.
double ssim(const Mat& a, const Mat& b, double data_range = 0.0);

/// Voxels in the central `fraction` of each axis.
std::vector<std::size_t> central_region(const VoxelVolume& vol, double fraction);

/// PSNR of `test` against `truth` on the given voxels, range = max - min of
/// `truth` over the same voxels.
double volume_psnr(const VoxelVolume& truth, const VoxelVolume& test, std::span<const std::size_t> voxels);

/// Mean SSIM over axial slices of the central region.
double volume_ssim(const VoxelVolume& truth, const VoxelVolume& test, double fraction);

}  // namespace xwin::recon
