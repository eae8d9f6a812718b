#include "xwin/error.hpp"
#include "xwin/recon.hpp"
#include "xwin/trainer.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

using namespace xwin;
using namespace xwin::recon;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  for (const char* kv : {"model.image_size=16", "model.patch_size=8", "model.embed_dim=16", "model.encoder_depth=1",
                         "model.num_heads=2", "model.mlp_ratio=2", "model.predictor_dim=8", "model.predictor_depth=1",
                         "model.classifier_depth=1", "data.volume_grid=16", "data.volume_spacing=16", "rig.nu=16",
                         "rig.nv=16", "rig.pitch=32", "rig.step_mm=8"})
    c.apply_override(kv);
  return c;
}

std::vector<ProjectionImage> render_orbit(const VoxelVolume& vol, const ConeBeamGeometry& rig, int views,
                                          std::vector<ConeBeamGeometry>& geoms, double span = 360.0) {
  std::vector<ProjectionImage> out;
  geoms.clear();
  for (int i = 0; i < views; ++i) {
    ConeBeamGeometry g = rig;
    g.beta = i * span / views;
    geoms.push_back(g);
    out.push_back(render_drr(vol, g, vol.spacing[0] * 0.5));
  }
  return out;
}

}  // namespace

TEST_CASE("nearest codebook entry and tie rule") {
  Mat cb = Mat::Random(16, 4);
  Mat tok = cb.row(7);
  CHECK(nearest_indices(tok, cb)[0] == 7);

  Mat two(2, 1);
  two << 0.0, 1.0;
  Mat t(3, 1);
  t << 0.4, 0.6, 0.5;
  auto idx = nearest_indices(t, two);
  CHECK(idx == std::vector<int>{0, 1, 0});

  auto q = vq_quantize(ag::constant(tok), ag::constant(cb));
  CHECK(q.indices[0] == 7);
  CHECK(q.commitment_loss.scalar() == 0.0);
  CHECK(q.codebook_loss.scalar() == 0.0);
}

TEST_CASE("quantisation is idempotent") {
  std::mt19937_64 rng(4);
  Mat cb = Mat::Random(32, 8);
  Mat x = Mat::Random(20, 8);
  auto q1 = vq_quantize(ag::constant(x), ag::constant(cb));
  auto q2 = vq_quantize(ag::constant(q1.quantized.value()), ag::constant(cb));
  CHECK(q1.indices == q2.indices);
  CHECK(q1.quantized.value() == q2.quantized.value());
}

TEST_CASE("straight-through and loss gradient routing") {
  Mat cb0 = Mat::Random(8, 3);
  Mat x0 = Mat::Random(5, 3);
  Mat w = Mat::Random(5, 3);

  ag::Var x = ag::leaf(x0), cb = ag::leaf(cb0);
  auto q = vq_quantize(x, cb);
  ag::Var weights = ag::constant(w);
  ag::backward(ag::sum(ag::mul(q.quantized, weights)));
  CHECK(x.grad() == w);  // decoder-input gradient copied unchanged
  CHECK_FALSE(cb.has_grad());

  ag::Var x2 = ag::leaf(x0), cb2 = ag::leaf(cb0);
  auto q2 = vq_quantize(x2, cb2);
  ag::backward(q2.codebook_loss);
  CHECK_FALSE(x2.has_grad());
  REQUIRE(cb2.has_grad());

  ag::Var x3 = ag::leaf(x0), cb3 = ag::leaf(cb0);
  auto q3 = vq_quantize(x3, cb3);
  ag::backward(q3.commitment_loss);
  CHECK_FALSE(cb3.has_grad());
  Mat e(5, 3);
  for (int i = 0; i < 5; ++i) e.row(i) = cb0.row(q3.indices[static_cast<std::size_t>(i)]);
  CHECK((x3.grad() - 2.0 * (x0 - e) / 15.0).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("codebook usage") {
  std::vector<int> one(500, 3);
  CHECK(codebook_usage(one, 1024) == 1.0 / 1024);
  std::vector<int> all(2048);
  std::iota(all.begin(), all.end(), 0);
  CHECK(codebook_usage(all, 2048) == 1.0);
  CHECK_THROWS_AS(codebook_usage(std::vector<int>{}, 8), InvalidArgument);
  CHECK_THROWS_AS(codebook_usage(std::vector<int>{8}, 8), InvalidArgument);
}

TEST_CASE("unpatchify inverts patch extraction") {
  Mat img = Mat::Random(24, 24);
  CHECK(unpatchify(nn::extract_patches(img, 8), 24, 8) == img);
}

TEST_CASE("decoder training keeps the stack frozen and lowers the loss") {
  TrainConfig c = small_config();
  ProjectionCache cache(c);
  auto stack = nn::init_params(c.model, 1);
  const auto before = stack.fingerprint();
  auto samples = make_decoder_samples(c, cache, 0, 2, 3, 5);
  REQUIRE(samples.size() == 6);
  DecoderConfig dc;
  dc.codebook_size = 64;
  dc.codebook_dim = 16;
  dc.heads = 2;
  dc.steps = 60;
  dc.batch = 4;
  dc.audit_frozen = true;
  auto res = train_decoder(stack, c.model, samples, dc);
  REQUIRE(res.log.size() == 60);
  for (const auto& l : res.log) CHECK(l.frozen_grad_norm == 0.0);
  CHECK(stack.fingerprint() == before);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += res.log[static_cast<std::size_t>(i)].loss;
    last += res.log[res.log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  CHECK(last < first);

  SUBCASE("rendering") {
    std::vector<int> idx;
    auto img = render_latent_projection(samples[0].context, samples[0].action, stack, res.decoder, c.rig, &idx);
    CHECK(img.nu == c.rig.nu);
    CHECK(img.nv == c.rig.nv);
    CHECK(img.pitch == c.rig.pitch);
    CHECK(idx.size() == static_cast<std::size_t>(c.model.num_tokens()));
    auto again = render_latent_projection(samples[0].context, samples[0].action, stack, res.decoder, c.rig);
    CHECK(img.data == again.data);
    ConeBeamGeometry wrong = c.rig;
    wrong.nu = 32;
    CHECK_THROWS_AS(render_latent_projection(samples[0].context, samples[0].action, stack, res.decoder, wrong),
                    InvalidArgument);
  }
  SUBCASE("evaluation") {
    auto ev = evaluate_decoder(stack, res.decoder, samples);
    CHECK(ev.psnr_per_sample.size() == samples.size());
    CHECK(ev.usage > 0.0);
    CHECK(ev.usage <= 1.0);
  }
}

TEST_CASE("dead codebook entries are re-initialised with a warning") {
  TrainConfig c = small_config();
  ProjectionCache cache(c);
  auto stack = nn::init_params(c.model, 1);
  auto samples = make_decoder_samples(c, cache, 0, 1, 1, 5);
  DecoderConfig dc;
  dc.codebook_size = 256;
  dc.codebook_dim = 16;
  dc.heads = 2;
  dc.steps = 12;
  dc.batch = 1;
  dc.dead_window = 5;
  auto res = train_decoder(stack, c.model, samples, dc);
  CHECK(res.reinit_events > 0);
  CHECK(res.warnings.size() == static_cast<std::size_t>(res.reinit_events));
}

TEST_CASE("ramp filter") {
  const double tau = 0.5;
  std::vector<double> zero(32, 0.0);
  for (double v : ramp_filter(zero, tau)) CHECK(v == 0.0);

  std::vector<double> impulse(33, 0.0);
  impulse[16] = 1.0;
  auto r = ramp_filter(impulse, tau);
  for (int m = 0; m < 33; ++m) CHECK(r[static_cast<std::size_t>(m)] == ramp_kernel(m - 16, tau));
  CHECK(ramp_kernel(0, tau) == 1.0 / (4 * tau * tau));
  CHECK(ramp_kernel(2, tau) == 0.0);
  CHECK(ramp_kernel(-3, tau) == doctest::Approx(-1.0 / std::pow(3.14159265358979323846 * 3 * tau, 2)));

  std::vector<double> ones(1024, 1.0);
  auto c = ramp_filter(ones, 1.0);
  for (int m = 256; m < 768; ++m) CHECK(std::abs(c[static_cast<std::size_t>(m)]) < 1e-3);

  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int len : {1, 7, 64, 100}) {
    std::vector<double> row(static_cast<std::size_t>(len));
    for (auto& v : row) v = n(rng);
    auto a = ramp_filter(row, 3.7, false);
    auto b = ramp_filter(row, 3.7, true);
    double scale = 0.0, err = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      scale = std::max(scale, std::abs(a[i]));
      err = std::max(err, std::abs(a[i] - b[i]));
    }
    CHECK(err <= 1e-6 * std::max(scale, 1.0));
  }
}

TEST_CASE("angular coverage") {
  std::vector<double> full;
  for (int i = 0; i < 120; ++i) full.push_back(3.0 * i);
  CHECK(angular_coverage(full) == doctest::Approx(357.0));
  CHECK(angular_coverage(std::vector<double>{-10.0, 350.0}) == 0.0);
  CHECK(angular_coverage(std::vector<double>{0.0, 90.0, 180.0}) == doctest::Approx(180.0));
}

TEST_CASE("FDK contracts") {
  VoxelVolume cyl = make_cylinder_volume(16, 16.0, 80.0, 0.02);
  ConeBeamGeometry rig;
  rig.nu = rig.nv = 32;
  rig.pitch = 16.0;
  std::vector<ConeBeamGeometry> geoms;
  auto projs = render_orbit(cyl, rig, 36, geoms);
  GridSpec grid{16, 16, 16, {16.0, 16.0, 16.0}};

  SUBCASE("zero input") {
    std::vector<ProjectionImage> zeros;
    for (const auto& p : projs) zeros.push_back(ProjectionImage::zeros(p.nu, p.nv, p.pitch));
    auto v = fdk_reconstruct(zeros, geoms, grid);
    CHECK(std::all_of(v.data.begin(), v.data.end(), [](float x) { return x == 0.0f; }));
  }
  SUBCASE("linearity and order independence") {
    auto base = fdk_reconstruct(projs, geoms, grid);
    auto doubled = projs;
    for (auto& p : doubled)
      for (auto& x : p.data) x *= 2.0f;
    auto twice = fdk_reconstruct(doubled, geoms, grid);
    double worst = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i)
      worst = std::max(worst, std::abs(twice.data[i] - 2.0 * base.data[i]) / std::max(1e-12, 2.0 * std::abs(base.data[i])));
    CHECK(worst <= 1e-6);

    std::vector<std::size_t> perm(projs.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(11));
    std::vector<ProjectionImage> sp;
    std::vector<ConeBeamGeometry> sg;
    for (auto i : perm) {
      sp.push_back(projs[i]);
      sg.push_back(geoms[i]);
    }
    CHECK(fdk_reconstruct(sp, sg, grid).data == base.data);

    auto fft = fdk_reconstruct(projs, geoms, grid, FdkOptions{true});
    double diff = 0.0;
    for (std::size_t i = 0; i < base.size(); ++i) diff = std::max(diff, std::abs(double(fft.data[i]) - base.data[i]));
    CHECK(diff < 1e-6);

    // The interior recovers the attenuation.
    CHECK(base.at(8, 8, 8) == doctest::Approx(0.02).epsilon(0.05));
    CHECK(base.at(0, 0, 8) < 0.005);
  }
  SUBCASE("errors") {
    std::vector<ConeBeamGeometry> short_geoms;
    auto arc = render_orbit(cyl, rig, 30, short_geoms, 150.0);
    CHECK_THROWS_AS(fdk_reconstruct(arc, short_geoms, grid), InvalidArgument);
    std::vector<ConeBeamGeometry> fewer(geoms.begin(), geoms.end() - 1);
    CHECK_THROWS_AS(fdk_reconstruct(projs, fewer, grid), InvalidArgument);
    auto tilted = geoms;
    tilted[3].pitch_angle = 2.0;
    CHECK_THROWS_AS(fdk_reconstruct(projs, tilted, grid), InvalidArgument);
    auto other = geoms;
    other[5].sdd = 1000.0;
    CHECK_THROWS_AS(fdk_reconstruct(projs, other, grid), InvalidArgument);
  }
}

TEST_CASE("psnr and ssim") {
  std::vector<double> a{0.0, 1.0, 2.0, 3.0};
  CHECK(psnr(a, a, 3.0) == kPsnrCap);
  // MSE = range^2 / 100 -> 20 dB.
  std::vector<double> b{1.0, 2.0, 3.0, 4.0};
  CHECK(psnr(a, b, 10.0) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK_THROWS_AS(psnr(a, std::vector<double>{1.0}, 1.0), InvalidArgument);

  Mat img = Mat::Random(16, 16);
  CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-12));
  Mat pat(16, 16);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j) pat(i, j) = ((i + j) % 2) ? 1.0 : -1.0;
  // Opposite +-1 fluctuations about a shared mean.
  Mat up = (pat.array() + 1.0).matrix(), down = (1.0 - pat.array()).matrix();
  CHECK(ssim(up, down) < 0.0);
  CHECK_THROWS_AS(ssim(Mat::Zero(5, 5), Mat::Zero(5, 5)), InvalidArgument);
}

TEST_CASE("central region") {
  VoxelVolume v = VoxelVolume::zeros(10, 10, 10, {1.0, 1.0, 1.0});
  CHECK(central_region(v, 0.8).size() == 512);
  CHECK(central_region(v, 1.0).size() == 1000);
}
