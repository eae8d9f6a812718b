#include "xwin/error.hpp"
#include "xwin/recon.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <memory>
#include <numeric>

namespace xwin::recon {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Real-to-complex FFT convolution with the ramp kernel for a fixed row length.
class FftRamp {
 public:
  FftRamp(int n, double pitch) : n_(n) {
    len_ = 1;
    while (len_ < 2 * n) len_ *= 2;
    real_ = fftw_alloc_real(static_cast<std::size_t>(len_));
    spec_ = fftw_alloc_complex(static_cast<std::size_t>(len_ / 2 + 1));
    fwd_ = fftw_plan_dft_r2c_1d(len_, real_, spec_, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_1d(len_, spec_, real_, FFTW_ESTIMATE);

    std::fill(real_, real_ + len_, 0.0);
    for (int k = -(n - 1); k <= n - 1; ++k) real_[(k + len_) % len_] = ramp_kernel(k, pitch);
    fftw_execute(fwd_);
    for (int i = 0; i < len_ / 2 + 1; ++i) kernel_.push_back({spec_[i][0], spec_[i][1]});
  }
  ~FftRamp() {
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
    fftw_free(real_);
    fftw_free(spec_);
  }
  FftRamp(const FftRamp&) = delete;
  FftRamp& operator=(const FftRamp&) = delete;

  void apply(const double* in, double* out) {
    std::fill(real_, real_ + len_, 0.0);
    std::copy(in, in + n_, real_);
    fftw_execute(fwd_);
    for (int i = 0; i < len_ / 2 + 1; ++i) {
      double ar = spec_[i][0], ai = spec_[i][1];
      double br = kernel_[i][0], bi = kernel_[i][1];
      spec_[i][0] = ar * br - ai * bi;
      spec_[i][1] = ar * bi + ai * br;
    }
    fftw_execute(inv_);
    for (int i = 0; i < n_; ++i) out[i] = real_[i] / len_;
  }

 private:
  int n_, len_ = 0;
  double* real_ = nullptr;
  fftw_complex* spec_ = nullptr;
  fftw_plan fwd_{}, inv_{};
  std::vector<std::array<double, 2>> kernel_;
};

void direct_ramp(const double* in, double* out, int n, const std::vector<double>& h) {
  // h holds kernel values for |k| = 0 .. n-1.
  for (int m = 0; m < n; ++m) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += h[static_cast<std::size_t>(std::abs(m - j))] * in[j];
    out[m] = acc;
  }
}

std::vector<double> kernel_table(int n, double pitch) {
  std::vector<double> h(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) h[static_cast<std::size_t>(k)] = ramp_kernel(k, pitch);
  return h;
}

double wrap360(double b) {
  double r = std::fmod(b, 360.0);
  if (r < 0.0) r += 360.0;
  return r;
}

}  // namespace

double ramp_kernel(int n, double tau) {
  if (n == 0) return 1.0 / (4.0 * tau * tau);
  if (n % 2 == 0) return 0.0;
  double d = kPi * n * tau;
  return -1.0 / (d * d);
}

std::vector<double> ramp_filter(std::span<const double> row, double pitch, bool use_fft) {
  require(pitch > 0.0, "ramp filter pitch must be positive");
  const int n = static_cast<int>(row.size());
  std::vector<double> out(row.size(), 0.0);
  if (n == 0) return out;
  if (use_fft) {
    FftRamp f(n, pitch);
    f.apply(row.data(), out.data());
  } else {
    direct_ramp(row.data(), out.data(), n, kernel_table(n, pitch));
  }
  return out;
}

double angular_coverage(std::span<const double> betas_deg) {
  std::vector<double> b;
  b.reserve(betas_deg.size());
  for (double x : betas_deg) b.push_back(wrap360(x));
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  if (b.size() < 2) return 0.0;
  double gap = 360.0 - b.back() + b.front();
  for (std::size_t i = 1; i < b.size(); ++i) gap = std::max(gap, b[i] - b[i - 1]);
  return 360.0 - gap;
}

VoxelVolume fdk_reconstruct(std::span<const ProjectionImage> projections, std::span<const ConeBeamGeometry> geoms,
                            const GridSpec& grid, const FdkOptions& opts) {
  require(!projections.empty(), "no projections to reconstruct from");
  require(projections.size() == geoms.size(), "projection and geometry lists differ in length");
  require(grid.nx > 0 && grid.ny > 0 && grid.nz > 0, "reconstruction grid must be non-empty");
  const ConeBeamGeometry& g0 = geoms[0];
  for (std::size_t i = 0; i < geoms.size(); ++i) {
    const auto& g = geoms[i];
    g.validate();
    require(g.sod == g0.sod && g.sdd == g0.sdd && g.nu == g0.nu && g.nv == g0.nv && g.pitch == g0.pitch,
            "geometries must share one circular orbit and detector");
    require(g.pitch_angle == 0.0 && g.roll_angle == 0.0, "FDK needs untilted geometries");
    const auto& p = projections[i];
    require(p.nu == g.nu && p.nv == g.nv && p.data.size() == static_cast<std::size_t>(g.nu) * g.nv,
            "projection size does not match its geometry");
  }
  const std::size_t n_proj = projections.size();
  std::vector<double> betas(n_proj);
  for (std::size_t i = 0; i < n_proj; ++i) betas[i] = wrap360(geoms[i].beta);
  if (angular_coverage(betas) < 180.0 - 1e-9) throw InvalidArgument("angular coverage is below 180 degrees");

  // Fixed accumulation order: by yaw, then by content, so any input order
  // gives the same volume.
  std::vector<std::uint64_t> sums(n_proj);
  for (std::size_t i = 0; i < n_proj; ++i) {
    std::uint64_t h = 1469598103934665603ULL;
    for (float f : projections[i].data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      h = (h ^ bits) * 1099511628211ULL;
    }
    sums[i] = h;
  }
  std::vector<std::size_t> order(n_proj);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (betas[a] != betas[b]) return betas[a] < betas[b];
    return sums[a] < sums[b];
  });

  // Angular weights: half the gap to each neighbour, gaps capped at the
  // median gap so that an open arc does not inflate its end views.
  std::vector<double> gaps(n_proj);
  for (std::size_t j = 0; j < n_proj; ++j) {
    double next = j + 1 < n_proj ? betas[order[j + 1]] : betas[order[0]] + 360.0;
    gaps[j] = next - betas[order[j]];
  }
  std::vector<double> nonzero;
  for (double g : gaps)
    if (g > 0.0) nonzero.push_back(g);
  std::nth_element(nonzero.begin(), nonzero.begin() + nonzero.size() / 2, nonzero.end());
  const double cap = nonzero[nonzero.size() / 2];
  std::vector<double> dbeta(n_proj);
  for (std::size_t j = 0; j < n_proj; ++j) {
    double prev = gaps[(j + n_proj - 1) % n_proj];
    dbeta[j] = 0.5 * (std::min(prev, cap) + std::min(gaps[j], cap)) * kPi / 180.0;
  }

  const int nu = g0.nu, nv = g0.nv;
  const double sod = g0.sod, sdd = g0.sdd;
  const double tau = g0.pitch * sod / sdd;  // detector spacing scaled to the isocentre
  const double uc = (nu - 1) / 2.0, vc = (nv - 1) / 2.0;

  // Cosine weighting and row filtering.
  std::vector<std::vector<double>> filtered(n_proj);
  std::vector<double> kern = kernel_table(nu, tau);
  std::unique_ptr<FftRamp> fft;
  if (opts.use_fft) fft = std::make_unique<FftRamp>(nu, tau);
  for (std::size_t j = 0; j < n_proj; ++j) {
    const auto& p = projections[order[j]];
    auto& q = filtered[j];
    q.assign(static_cast<std::size_t>(nu) * nv, 0.0);
    std::vector<double> row(static_cast<std::size_t>(nu));
    for (int v = 0; v < nv; ++v) {
      double dv = (v - vc) * g0.pitch;
      for (int u = 0; u < nu; ++u) {
        double du = (u - uc) * g0.pitch;
        row[static_cast<std::size_t>(u)] = p.at(u, v) * sdd / std::sqrt(sdd * sdd + du * du + dv * dv);
      }
      double* out = q.data() + static_cast<std::size_t>(v) * nu;
      if (fft)
        fft->apply(row.data(), out);
      else
        direct_ramp(row.data(), out, nu, kern);
      for (int u = 0; u < nu; ++u) out[u] *= tau;
    }
  }

  struct Frame {
    Eigen::Vector3d s, axis, eu, ev;
  };
  std::vector<Frame> frames(n_proj);
  for (std::size_t j = 0; j < n_proj; ++j) {
    RigFrame f = rig_frame(geoms[order[j]]);
    frames[j] = {f.source, f.axis, f.eu, f.ev};
  }

  VoxelVolume vol = VoxelVolume::zeros(grid.nx, grid.ny, grid.nz, grid.spacing);
#pragma omp parallel for schedule(static)
  for (int k = 0; k < grid.nz; ++k) {
    for (int jy = 0; jy < grid.ny; ++jy) {
      for (int i = 0; i < grid.nx; ++i) {
        Vec3 c = vol.voxel_center(i, jy, k);
        Eigen::Vector3d x(c[0], c[1], c[2]);
        double acc = 0.0;
        for (std::size_t j = 0; j < n_proj; ++j) {
          const Frame& f = frames[j];
          Eigen::Vector3d d = x - f.s;
          double t = d.dot(f.axis);
          if (t <= 0.0) continue;
          double mag = sod / t;
          double fu = d.dot(f.eu) * mag / tau + uc;
          double fv = d.dot(f.ev) * mag / tau + vc;
          int u0 = static_cast<int>(std::floor(fu));
          int v0 = static_cast<int>(std::floor(fv));
          if (u0 < -1 || u0 >= nu || v0 < -1 || v0 >= nv) continue;
          double au = fu - u0, av = fv - v0;
          const auto& q = filtered[j];
          auto sample = [&](int u, int v) {
            return (u < 0 || u >= nu || v < 0 || v >= nv) ? 0.0 : q[static_cast<std::size_t>(v) * nu + u];
          };
          double val = (1 - av) * ((1 - au) * sample(u0, v0) + au * sample(u0 + 1, v0)) +
                       av * ((1 - au) * sample(u0, v0 + 1) + au * sample(u0 + 1, v0 + 1));
          acc += dbeta[j] * mag * mag * val;
        }
        vol.at(i, jy, k) = static_cast<float>(std::max(0.0, 0.5 * acc));
      }
    }
  }
  return vol;
}

// ---------------------------------------------------------------------------

double psnr(std::span<const double> a, std::span<const double> b, double data_range) {
  require(a.size() == b.size() && !a.empty(), "psnr needs two non-empty inputs of equal size");
  require(data_range > 0.0, "psnr data range must be positive");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

double ssim(const Mat& a, const Mat& b, double data_range) {
  constexpr int w = 7;
  require(a.rows() == b.rows() && a.cols() == b.cols(), "ssim inputs differ in size");
  require(a.rows() >= w && a.cols() >= w, "ssim needs images of at least 7x7");
  double range = data_range > 0.0 ? data_range : a.maxCoeff() - a.minCoeff();
  if (range <= 0.0) range = 1.0;
  const double c1 = (0.01 * range) * (0.01 * range);
  const double c2 = (0.03 * range) * (0.03 * range);
  constexpr double n = w * w;
  const double cov_norm = n / (n - 1.0);
  double total = 0.0;
  long count = 0;
  for (Eigen::Index r = 0; r + w <= a.rows(); ++r) {
    for (Eigen::Index c = 0; c + w <= a.cols(); ++c) {
      auto pa = a.block(r, c, w, w).array();
      auto pb = b.block(r, c, w, w).array();
      double ma = pa.mean(), mb = pb.mean();
      double va = cov_norm * ((pa * pa).mean() - ma * ma);
      double vb = cov_norm * ((pb * pb).mean() - mb * mb);
      double cab = cov_norm * ((pa * pb).mean() - ma * mb);
      total += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

namespace {

std::pair<int, int> central_range(int n, double fraction) {
  int lo = static_cast<int>(std::floor(n * (1.0 - fraction) / 2.0 + 1e-9));
  return {lo, n - lo};
}

}  // namespace

std::vector<std::size_t> central_region(const VoxelVolume& vol, double fraction) {
  require(fraction > 0.0 && fraction <= 1.0, "central fraction must lie in (0, 1]");
  auto [x0, x1] = central_range(vol.nx, fraction);
  auto [y0, y1] = central_range(vol.ny, fraction);
  auto [z0, z1] = central_range(vol.nz, fraction);
  std::vector<std::size_t> idx;
  for (int k = z0; k < z1; ++k)
    for (int j = y0; j < y1; ++j)
      for (int i = x0; i < x1; ++i) idx.push_back(vol.index(i, j, k));
  return idx;
}

double volume_psnr(const VoxelVolume& truth, const VoxelVolume& test, std::span<const std::size_t> voxels) {
  require(truth.nx == test.nx && truth.ny == test.ny && truth.nz == test.nz, "volumes differ in size");
  require(!voxels.empty(), "no voxels selected");
  std::vector<double> a, b;
  a.reserve(voxels.size());
  b.reserve(voxels.size());
  for (std::size_t i : voxels) {
    a.push_back(truth.data[i]);
    b.push_back(test.data[i]);
  }
  auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  double range = *hi - *lo;
  return psnr(a, b, range > 0.0 ? range : 1.0);
}

double volume_ssim(const VoxelVolume& truth, const VoxelVolume& test, double fraction) {
  require(truth.nx == test.nx && truth.ny == test.ny && truth.nz == test.nz, "volumes differ in size");
  auto [x0, x1] = central_range(truth.nx, fraction);
  auto [y0, y1] = central_range(truth.ny, fraction);
  auto [z0, z1] = central_range(truth.nz, fraction);
  double lo = 1e300, hi = -1e300;
  for (std::size_t i : central_region(truth, fraction)) {
    lo = std::min(lo, static_cast<double>(truth.data[i]));
    hi = std::max(hi, static_cast<double>(truth.data[i]));
  }
  double total = 0.0;
  for (int k = z0; k < z1; ++k) {
    Mat a(y1 - y0, x1 - x0), b(y1 - y0, x1 - x0);
    for (int j = y0; j < y1; ++j)
      for (int i = x0; i < x1; ++i) {
        a(j - y0, i - x0) = truth.at(i, j, k);
        b(j - y0, i - x0) = test.at(i, j, k);
      }
    total += ssim(a, b, hi - lo);
  }
  return total / (z1 - z0);
}

}  // namespace xwin::recon
