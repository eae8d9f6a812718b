#pragma once

// Cone-beam DRR rendering.
//
// Angle convention: beta is a yaw about +z (patient superior-inferior). The
// frontal view (beta = 0) places the source at (0, -sod, 0) looking along +y;
// the lateral view is beta = 90 deg with the source at (-sod, 0, 0). The
// detector u axis is (cos beta, -sin beta, 0) and the v axis is +z (before the
// optional pitch/roll tilt).

#include "xwin/volume.hpp"

#include <Eigen/Dense>

namespace xwin {

struct ConeBeamGeometry {
  double sod = 541.0;
  double sdd = 949.0;
  int nu = 64, nv = 64;
  double pitch = 8.0;
  double beta = 0.0;         // degrees
  double pitch_angle = 0.0;  // degrees, tilt about the detector u axis
  double roll_angle = 0.0;   // degrees, rotation about the central ray

  void validate() const;
};

enum class BaseView { frontal, lateral };

double base_angle(BaseView view);

struct Action {
  int k = 0;
  double delta_phi = 3.0;  // degrees
  double pitch = 0.0;      // euler3 variant only
  double roll = 0.0;

  double angle_deg() const { return k * delta_phi; }
};

/// Source position, central-ray direction and detector axes for a geometry.
struct RigFrame {
  Eigen::Vector3d source;
  Eigen::Vector3d axis;  // unit, source -> detector centre
  Eigen::Vector3d eu;
  Eigen::Vector3d ev;
  Eigen::Vector3d detector_center;
};

RigFrame rig_frame(const ConeBeamGeometry& g);

/// beta = base + k * delta_phi. Throws when |k * delta_phi| exceeds the bound.
ConeBeamGeometry pose_from_action(BaseView base, const Action& action, const ConeBeamGeometry& rig,
                                  double bound_deg = 90.0);

/// Centre of detector pixel (u, v) in world coordinates.
Eigen::Vector3d pixel_center(const RigFrame& f, const ConeBeamGeometry& g, int u, int v);

/// Fixed-step trilinear ray marching (midpoint rule, step adjusted so that an
/// integer number of samples spans each clipped segment exactly).
ProjectionImage render_drr(const VoxelVolume& vol, const ConeBeamGeometry& geom, double step_mm);

/// Exact voxel traversal; sum of attenuation times chord length.
ProjectionImage render_drr_exact(const VoxelVolume& vol, const ConeBeamGeometry& geom);

/// Line integral of the trilinear interpolant between two points.
double line_integral_trilinear(const VoxelVolume& vol, const Eigen::Vector3d& from, const Eigen::Vector3d& to,
                               double step_mm);

/// Exact line integral of the piecewise-constant voxel field between two points.
double line_integral_exact(const VoxelVolume& vol, const Eigen::Vector3d& from, const Eigen::Vector3d& to);

/// exp(-p) per pixel, before normalisation.
std::vector<double> beer_lambert(const ProjectionImage& img);

/// Beer-Lambert display transform: exp(-p), then min-max normalised to [0, 1]
/// (a constant image maps to all zeros).
ProjectionImage to_display(const ProjectionImage& img);

/// Display image as a (nv x nu) matrix for the network.
Eigen::MatrixXd to_matrix(const ProjectionImage& img);
ProjectionImage from_matrix(const Eigen::MatrixXd& m, double pitch);

}  // namespace xwin
