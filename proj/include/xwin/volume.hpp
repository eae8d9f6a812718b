#pragma once

// Synthetic chest-like phantoms, the pseudo-real style transform, and the
// binary volume / projection file formats.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace xwin {

using Vec3 = std::array<double, 3>;

/// 3D attenuation grid (mm^-1), x-fastest.
struct VoxelVolume {
  int nx = 0, ny = 0, nz = 0;
  Vec3 spacing{1.0, 1.0, 1.0};
  /// Position (mm) of the centre of voxel (0,0,0) relative to the isocentre.
  Vec3 origin{0.0, 0.0, 0.0};
  std::vector<float> data;

  static VoxelVolume zeros(int nx, int ny, int nz, Vec3 spacing);  // centred on the isocentre

  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nx) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(ny) * k);
  }
  float at(int i, int j, int k) const { return data[index(i, j, k)]; }
  float& at(int i, int j, int k) { return data[index(i, j, k)]; }
  Vec3 voxel_center(int i, int j, int k) const {
    return {origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + k * spacing[2]};
  }
  std::size_t size() const { return data.size(); }

  /// Throws InvalidArgument if any invariant is violated.
  void validate() const;
};

/// 2D detector image: line integrals (or display intensities), u-fastest.
struct ProjectionImage {
  int nu = 0, nv = 0;
  double pitch = 1.0;  // mm per detector pixel
  std::vector<float> data;

  static ProjectionImage zeros(int nu, int nv, double pitch);
  float at(int u, int v) const { return data[static_cast<std::size_t>(u) + static_cast<std::size_t>(nu) * v]; }
  float& at(int u, int v) { return data[static_cast<std::size_t>(u) + static_cast<std::size_t>(nu) * v]; }
};

struct Ellipsoid {
  Vec3 center{};
  Vec3 semi_axes{};
  double attenuation = 0.0;  // additive, may be negative for low-density organs
};

struct Lesion {
  Vec3 center{};
  double radius = 0.0;
  double delta = 0.0;
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  int nx = 64, ny = 64, nz = 64;
  Vec3 spacing{4.0, 4.0, 4.0};
  bool has_body = true;
  Ellipsoid body{{0, 0, 0}, {110, 80, 120}, 0.02};
  std::vector<Ellipsoid> organs;
  std::vector<Lesion> lesions;
};

struct LabelSet {
  bool lesion_present = false;
  bool lesion_count_ge2 = false;
  /// True when the largest lesion lies at x > 0 (patient left by our convention).
  bool largest_on_left = false;
};

struct DomainStyle {
  double blur_sigma = 0.0;  // pixels
  double gamma = 1.0;
  double noise_sigma = 0.0;
  double bias_amplitude = 0.0;
  std::uint64_t seed = 0;
};

/// Randomised chest-like spec: body, lungs, heart, spine, rib shell and
/// 0-3 lesions inside the lungs. Pure function of (seed, lesion count).
PhantomSpec random_chest_spec(std::uint64_t seed, int n_lesions, int grid = 64, double spacing_mm = 4.0);

/// Derived labels. Pure function of the spec.
LabelSet labels_for(const PhantomSpec& spec);

struct Phantom {
  VoxelVolume volume;
  LabelSet labels;
};

/// Voxel value = summed attenuation of every shape containing the voxel centre,
/// clamped at zero. Throws InvalidArgument when a lesion escapes the body.
Phantom generate_phantom(const PhantomSpec& spec);

/// Uniform z-aligned cylinder filling the full z extent of the grid.
VoxelVolume make_cylinder_volume(int n, double spacing_mm, double radius_mm, double attenuation);

/// FNV-1a over the raw float payload; used for reproducibility checks.
std::uint64_t checksum(const VoxelVolume& vol);

/// blur -> gamma -> multiplicative bias field -> additive noise, clamped at 0.
/// Operates on display-domain images; identity parameters are an exact no-op.
ProjectionImage pseudo_real_transform(const ProjectionImage& img, const DomainStyle& style);

void save_volume(const std::filesystem::path& path, const VoxelVolume& vol);
VoxelVolume load_volume(const std::filesystem::path& path);
void save_projection(const std::filesystem::path& path, const ProjectionImage& img);
ProjectionImage load_projection(const std::filesystem::path& path);

}  // namespace xwin
