#include "xwin/projector.hpp"

#include "xwin/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace xwin {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Box {
  Eigen::Vector3d lo, hi;
};

Box bounds(const VoxelVolume& vol) {
  Box b;
  const int n[3] = {vol.nx, vol.ny, vol.nz};
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = vol.origin[a] - 0.5 * vol.spacing[a];
    b.hi[a] = vol.origin[a] + (n[a] - 0.5) * vol.spacing[a];
  }
  return b;
}

// Slab clipping of p(t) = from + t * dir, t in [0, 1].
bool clip(const Box& box, const Eigen::Vector3d& from, const Eigen::Vector3d& dir, double& t0, double& t1) {
  t0 = 0.0;
  t1 = 1.0;
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (from[a] < box.lo[a] || from[a] > box.hi[a]) return false;
      continue;
    }
    double ta = (box.lo[a] - from[a]) / dir[a];
    double tb = (box.hi[a] - from[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  return t1 > t0;
}

double sample_trilinear(const VoxelVolume& vol, const Eigen::Vector3d& p) {
  const int n[3] = {vol.nx, vol.ny, vol.nz};
  int i0[3];
  double t[3];
  for (int a = 0; a < 3; ++a) {
    double f = (p[a] - vol.origin[a]) / vol.spacing[a];
    f = std::clamp(f, 0.0, static_cast<double>(n[a] - 1));
    int i = std::min(static_cast<int>(std::floor(f)), n[a] - 2);
    i0[a] = i;
    t[a] = f - i;
  }
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    double wz = dz ? t[2] : 1.0 - t[2];
    for (int dy = 0; dy < 2; ++dy) {
      double wy = dy ? t[1] : 1.0 - t[1];
      for (int dx = 0; dx < 2; ++dx) {
        double wx = dx ? t[0] : 1.0 - t[0];
        acc += wx * wy * wz * vol.at(i0[0] + dx, i0[1] + dy, i0[2] + dz);
      }
    }
  }
  return acc;
}

void check_source_outside(const VoxelVolume& vol, const RigFrame& f) {
  Box b = bounds(vol);
  bool inside = true;
  for (int a = 0; a < 3; ++a) inside = inside && f.source[a] >= b.lo[a] && f.source[a] <= b.hi[a];
  if (inside) throw InvalidArgument("degenerate geometry: source lies inside the volume box");
}

template <typename RayFn>
ProjectionImage render_with(const VoxelVolume& vol, const ConeBeamGeometry& geom, RayFn&& ray) {
  geom.validate();
  vol.validate();
  RigFrame f = rig_frame(geom);
  check_source_outside(vol, f);
  ProjectionImage img = ProjectionImage::zeros(geom.nu, geom.nv, geom.pitch);
#pragma omp parallel for schedule(static)
  for (int v = 0; v < geom.nv; ++v) {
    for (int u = 0; u < geom.nu; ++u) {
      img.at(u, v) = static_cast<float>(ray(f.source, pixel_center(f, geom, u, v)));
    }
  }
  return img;
}

}  // namespace

void ConeBeamGeometry::validate() const {
  require(sod > 0.0 && sod < sdd, "geometry requires 0 < sod < sdd");
  require(nu >= 8 && nv >= 8, "detector must be at least 8x8");
  require(pitch > 0.0, "detector pitch must be positive");
}

double base_angle(BaseView view) { return view == BaseView::frontal ? 0.0 : 90.0; }

RigFrame rig_frame(const ConeBeamGeometry& g) {
  using Eigen::AngleAxisd;
  using Eigen::Vector3d;
  // Yaw is clockwise about +z so that beta = 90 puts the source on -x.
  // Reduce first so that beta and beta + 360 give bit-identical frames.
  double beta = std::fmod(g.beta, 360.0);
  if (beta < 0.0) beta += 360.0;
  Eigen::Matrix3d r = (AngleAxisd(-beta * kDeg, Vector3d::UnitZ()) *
                       AngleAxisd(g.pitch_angle * kDeg, Vector3d::UnitX()) *
                       AngleAxisd(g.roll_angle * kDeg, Vector3d::UnitY()))
                          .toRotationMatrix();
  RigFrame f;
  f.source = r * Vector3d(0.0, -g.sod, 0.0);
  f.axis = r * Vector3d::UnitY();
  f.eu = r * Vector3d::UnitX();
  f.ev = r * Vector3d::UnitZ();
  f.detector_center = f.source + g.sdd * f.axis;
  return f;
}

ConeBeamGeometry pose_from_action(BaseView base, const Action& action, const ConeBeamGeometry& rig,
                                  double bound_deg) {
  require(action.delta_phi > 0.0, "action step size must be positive");
  if (std::abs(action.angle_deg()) > bound_deg + 1e-9) {
    throw InvalidArgument("action angle exceeds the configured bound");
  }
  ConeBeamGeometry g = rig;
  g.beta = base_angle(base) + action.angle_deg();
  g.pitch_angle = action.pitch;
  g.roll_angle = action.roll;
  return g;
}

Eigen::Vector3d pixel_center(const RigFrame& f, const ConeBeamGeometry& g, int u, int v) {
  double du = (u - (g.nu - 1) / 2.0) * g.pitch;
  double dv = (v - (g.nv - 1) / 2.0) * g.pitch;
  return f.detector_center + du * f.eu + dv * f.ev;
}

double line_integral_trilinear(const VoxelVolume& vol, const Eigen::Vector3d& from, const Eigen::Vector3d& to,
                               double step_mm) {
  require(step_mm > 0.0, "ray-marching step must be positive");
  Eigen::Vector3d dir = to - from;
  double t0, t1;
  if (!clip(bounds(vol), from, dir, t0, t1)) return 0.0;
  double length = (t1 - t0) * dir.norm();
  int n = std::max(1, static_cast<int>(std::ceil(length / step_mm)));
  double h = (t1 - t0) / n;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += sample_trilinear(vol, from + (t0 + (i + 0.5) * h) * dir);
  return acc * length / n;
}

double line_integral_exact(const VoxelVolume& vol, const Eigen::Vector3d& from, const Eigen::Vector3d& to) {
  Box box = bounds(vol);
  Eigen::Vector3d dir = to - from;
  double t0, t1;
  if (!clip(box, from, dir, t0, t1)) return 0.0;
  const double len = dir.norm();
  const int n[3] = {vol.nx, vol.ny, vol.nz};

  // Amanatides-Woo traversal in parameter space.
  Eigen::Vector3d start = from + (t0 + 1e-12 * (t1 - t0)) * dir;
  int idx[3], step[3];
  double t_max[3], t_delta[3];
  for (int a = 0; a < 3; ++a) {
    idx[a] = std::clamp(static_cast<int>(std::floor((start[a] - box.lo[a]) / vol.spacing[a])), 0, n[a] - 1);
    if (dir[a] > 0.0) {
      step[a] = 1;
      t_max[a] = (box.lo[a] + (idx[a] + 1) * vol.spacing[a] - from[a]) / dir[a];
      t_delta[a] = vol.spacing[a] / dir[a];
    } else if (dir[a] < 0.0) {
      step[a] = -1;
      t_max[a] = (box.lo[a] + idx[a] * vol.spacing[a] - from[a]) / dir[a];
      t_delta[a] = -vol.spacing[a] / dir[a];
    } else {
      step[a] = 0;
      t_max[a] = std::numeric_limits<double>::infinity();
      t_delta[a] = std::numeric_limits<double>::infinity();
    }
  }
  double t = t0, acc = 0.0;
  while (t < t1) {
    int axis = 0;
    if (t_max[1] < t_max[axis]) axis = 1;
    if (t_max[2] < t_max[axis]) axis = 2;
    double t_next = std::min(t_max[axis], t1);
    if (t_next > t) acc += vol.at(idx[0], idx[1], idx[2]) * (t_next - t) * len;
    t = std::max(t, t_next);
    idx[axis] += step[axis];
    t_max[axis] += t_delta[axis];
    if (idx[axis] < 0 || idx[axis] >= n[axis]) break;
  }
  return acc;
}

ProjectionImage render_drr(const VoxelVolume& vol, const ConeBeamGeometry& geom, double step_mm) {
  require(step_mm > 0.0, "ray-marching step must be positive");
  return render_with(vol, geom, [&](const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
    return line_integral_trilinear(vol, a, b, step_mm);
  });
}

ProjectionImage render_drr_exact(const VoxelVolume& vol, const ConeBeamGeometry& geom) {
  return render_with(vol, geom,
                     [&](const Eigen::Vector3d& a, const Eigen::Vector3d& b) { return line_integral_exact(vol, a, b); });
}

std::vector<double> beer_lambert(const ProjectionImage& img) {
  std::vector<double> x(img.data.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::exp(-static_cast<double>(img.data[i]));
  return x;
}

ProjectionImage to_display(const ProjectionImage& img) {
  ProjectionImage out = img;
  if (img.data.empty()) return out;
  std::vector<double> x = beer_lambert(img);
  auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  double mn = *lo, range = *hi - *lo;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.data[i] = range > 0.0 ? static_cast<float>((x[i] - mn) / range) : 0.0f;
  }
  return out;
}

Eigen::MatrixXd to_matrix(const ProjectionImage& img) {
  Eigen::MatrixXd m(img.nv, img.nu);
  for (int v = 0; v < img.nv; ++v)
    for (int u = 0; u < img.nu; ++u) m(v, u) = img.at(u, v);
  return m;
}

ProjectionImage from_matrix(const Eigen::MatrixXd& m, double pitch) {
  ProjectionImage img = ProjectionImage::zeros(static_cast<int>(m.cols()), static_cast<int>(m.rows()), pitch);
  for (int v = 0; v < img.nv; ++v)
    for (int u = 0; u < img.nu; ++u) img.at(u, v) = static_cast<float>(m(v, u));
  return img;
}

}  // namespace xwin
