#include "xwin/volume.hpp"

#include "xwin/error.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace xwin {

static_assert(std::endian::native == std::endian::little, "file I/O assumes a little-endian host");

VoxelVolume VoxelVolume::zeros(int nx, int ny, int nz, Vec3 spacing) {
  VoxelVolume v;
  v.nx = nx;
  v.ny = ny;
  v.nz = nz;
  v.spacing = spacing;
  v.origin = {-(nx - 1) * spacing[0] / 2.0, -(ny - 1) * spacing[1] / 2.0, -(nz - 1) * spacing[2] / 2.0};
  v.data.assign(static_cast<std::size_t>(nx) * ny * nz, 0.0f);
  return v;
}

void VoxelVolume::validate() const {
  require(nx >= 8 && ny >= 8 && nz >= 8, "volume dimensions must be >= 8");
  require(spacing[0] > 0 && spacing[1] > 0 && spacing[2] > 0, "volume spacing must be positive");
  require(data.size() == static_cast<std::size_t>(nx) * ny * nz, "volume payload size mismatch");
  for (float v : data) {
    if (!(v >= 0.0f) || !std::isfinite(v)) throw InvalidArgument("volume attenuation must be finite and >= 0");
  }
}

ProjectionImage ProjectionImage::zeros(int nu, int nv, double pitch) {
  ProjectionImage p;
  p.nu = nu;
  p.nv = nv;
  p.pitch = pitch;
  p.data.assign(static_cast<std::size_t>(nu) * nv, 0.0f);
  return p;
}

namespace {

bool inside(const Ellipsoid& e, const Vec3& p) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    double d = (p[a] - e.center[a]) / e.semi_axes[a];
    s += d * d;
  }
  return s <= 1.0;
}

bool inside(const Lesion& l, const Vec3& p) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) s += (p[a] - l.center[a]) * (p[a] - l.center[a]);
  return s <= l.radius * l.radius;
}

// Sphere fits when its centre lies inside the body shrunk by the radius.
bool lesion_inside_body(const Lesion& l, const Ellipsoid& body) {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    double axis = body.semi_axes[a] - l.radius;
    if (axis <= 0.0) return false;
    double d = (l.center[a] - body.center[a]) / axis;
    s += d * d;
  }
  return s < 1.0;
}

double jitter(std::mt19937_64& rng, double rel) {
  std::uniform_real_distribution<double> u(1.0 - rel, 1.0 + rel);
  return u(rng);
}

}  // namespace

PhantomSpec random_chest_spec(std::uint64_t seed, int n_lesions, int grid, double spacing_mm) {
  require(n_lesions >= 0, "lesion count must be non-negative");
  PhantomSpec spec;
  spec.seed = seed;
  spec.nx = spec.ny = spec.nz = grid;
  spec.spacing = {spacing_mm, spacing_mm, spacing_mm};
  const double h = grid * spacing_mm / 2.0;
  std::mt19937_64 rng(seed);

  spec.body = {{0, 0, 0}, {0.80 * h * jitter(rng, 0.06), 0.60 * h * jitter(rng, 0.06), 0.90 * h}, 0.02};
  const Vec3 b = spec.body.semi_axes;

  // Rib cage: bone-like shell from a pair of nested ellipsoids.
  spec.organs.push_back({{0, 0, 0}, {0.95 * b[0], 0.95 * b[1], 0.95 * b[2]}, 0.03});
  spec.organs.push_back({{0, 0, 0}, {0.88 * b[0], 0.88 * b[1], 0.96 * b[2]}, -0.03});

  // Lungs.
  const double lung_x = 0.45 * b[0] * jitter(rng, 0.05);
  for (double side : {-1.0, 1.0}) {
    spec.organs.push_back({{side * lung_x, -0.05 * b[1], 0.10 * b[2]},
                           {0.36 * b[0] * jitter(rng, 0.06), 0.62 * b[1] * jitter(rng, 0.06), 0.62 * b[2]},
                           -0.015});
  }
  // Heart, spine.
  spec.organs.push_back({{0.12 * b[0], -0.20 * b[1], -0.25 * b[2]},
                         {0.24 * b[0] * jitter(rng, 0.08), 0.30 * b[1] * jitter(rng, 0.08), 0.25 * b[2]},
                         0.004});
  spec.organs.push_back({{0, 0.70 * b[1], 0}, {0.10 * b[0], 0.12 * b[1], 0.95 * b[2]}, 0.03});

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> rad(0.08 * h, 0.14 * h);
  for (int n = 0; n < n_lesions; ++n) {
    const Ellipsoid& lung = spec.organs[2 + (rng() & 1u)];
    double r = rad(rng);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Vec3 c;
      for (int a = 0; a < 3; ++a) c[a] = lung.center[a] + unit(rng) * (lung.semi_axes[a] - r);
      Lesion l{c, r, 0.015};
      Ellipsoid shrunk = lung;
      if (lesion_inside_body(l, shrunk) && lesion_inside_body(l, spec.body)) {
        spec.lesions.push_back(l);
        break;
      }
    }
  }
  return spec;
}

LabelSet labels_for(const PhantomSpec& spec) {
  LabelSet l;
  l.lesion_present = !spec.lesions.empty();
  l.lesion_count_ge2 = spec.lesions.size() >= 2;
  if (l.lesion_present) {
    auto largest = std::max_element(spec.lesions.begin(), spec.lesions.end(),
                                    [](const Lesion& a, const Lesion& b) { return a.radius < b.radius; });
    l.largest_on_left = largest->center[0] > 0.0;
  }
  return l;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  require(spec.nx >= 8 && spec.ny >= 8 && spec.nz >= 8, "phantom grid dimensions must be >= 8");
  for (const auto& l : spec.lesions) {
    if (!spec.has_body || !lesion_inside_body(l, spec.body)) {
      throw InvalidArgument("lesion lies outside the body ellipsoid");
    }
  }
  Phantom out;
  out.volume = VoxelVolume::zeros(spec.nx, spec.ny, spec.nz, spec.spacing);
  auto& vol = out.volume;
  for (int k = 0; k < vol.nz; ++k) {
    for (int j = 0; j < vol.ny; ++j) {
      for (int i = 0; i < vol.nx; ++i) {
        const Vec3 p = vol.voxel_center(i, j, k);
        double mu = 0.0;
        if (spec.has_body && inside(spec.body, p)) mu += spec.body.attenuation;
        for (const auto& o : spec.organs) {
          if (inside(o, p)) mu += o.attenuation;
        }
        for (const auto& l : spec.lesions) {
          if (inside(l, p)) mu += l.delta;
        }
        vol.at(i, j, k) = static_cast<float>(std::max(mu, 0.0));
      }
    }
  }
  out.labels = labels_for(spec);
  return out;
}

VoxelVolume make_cylinder_volume(int n, double spacing_mm, double radius_mm, double attenuation) {
  auto vol = VoxelVolume::zeros(n, n, n, {spacing_mm, spacing_mm, spacing_mm});
  for (int k = 0; k < n; ++k) {
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < n; ++i) {
        auto p = vol.voxel_center(i, j, k);
        if (p[0] * p[0] + p[1] * p[1] <= radius_mm * radius_mm) vol.at(i, j, k) = static_cast<float>(attenuation);
      }
    }
  }
  return vol;
}

std::uint64_t checksum(const VoxelVolume& vol) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(vol.data.data());
  for (std::size_t i = 0; i < vol.data.size() * sizeof(float); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    s += k[i + radius];
  }
  for (auto& v : k) v /= s;
  return k;
}

std::vector<double> blur(const std::vector<double>& src, int nu, int nv, double sigma) {
  auto k = gaussian_kernel(sigma);
  int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(src.size()), out(src.size());
  for (int v = 0; v < nv; ++v) {
    for (int u = 0; u < nu; ++u) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        int uu = std::clamp(u + t, 0, nu - 1);
        acc += k[t + radius] * src[uu + static_cast<std::size_t>(nu) * v];
      }
      tmp[u + static_cast<std::size_t>(nu) * v] = acc;
    }
  }
  for (int v = 0; v < nv; ++v) {
    for (int u = 0; u < nu; ++u) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        int vv = std::clamp(v + t, 0, nv - 1);
        acc += k[t + radius] * tmp[u + static_cast<std::size_t>(nu) * vv];
      }
      out[u + static_cast<std::size_t>(nu) * v] = acc;
    }
  }
  return out;
}

}  // namespace

ProjectionImage pseudo_real_transform(const ProjectionImage& img, const DomainStyle& style) {
  require(style.blur_sigma >= 0.0, "blur sigma must be >= 0");
  require(style.gamma > 0.0, "gamma must be > 0");
  require(style.noise_sigma >= 0.0, "noise sigma must be >= 0");
  const int nu = img.nu, nv = img.nv;
  std::vector<double> x(img.data.begin(), img.data.end());

  if (style.blur_sigma > 0.0) x = blur(x, nu, nv, style.blur_sigma);
  if (style.gamma != 1.0) {
    for (auto& v : x) v = std::pow(std::max(v, 0.0), style.gamma);
  }
  std::mt19937_64 rng(style.seed);
  if (style.bias_amplitude != 0.0) {
    // Two random low-frequency cosine modes, normalised to [-1, 1].
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> freq(0.3, 1.0);
    double fx0 = freq(rng), fy0 = freq(rng), p0 = phase(rng);
    double fx1 = freq(rng), fy1 = freq(rng), p1 = phase(rng);
    for (int v = 0; v < nv; ++v) {
      for (int u = 0; u < nu; ++u) {
        double a = static_cast<double>(u) / nu, b = static_cast<double>(v) / nv;
        double f = 0.5 * (std::cos(2 * std::numbers::pi * (fx0 * a + fy0 * b) + p0) +
                          std::cos(2 * std::numbers::pi * (fx1 * a - fy1 * b) + p1));
        x[u + static_cast<std::size_t>(nu) * v] *= 1.0 + style.bias_amplitude * f;
      }
    }
  }
  if (style.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, style.noise_sigma);
    for (auto& v : x) v += noise(rng);
  }
  ProjectionImage out = img;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = static_cast<float>(std::max(x[i], 0.0));
  return out;
}

// ---------------------------------------------------------------------------
// Binary formats: 64-byte ASCII header line padded with spaces, then raw
// little-endian float32 payload.

namespace {

constexpr std::size_t kHeaderBytes = 64;

std::string fmt_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_payload(const std::filesystem::path& path, const std::string& header_text,
                   const std::vector<float>& data) {
  std::string header = header_text;
  if (header.size() + 1 > kHeaderBytes) throw FormatError("header does not fit in 64 bytes: " + header);
  header.append(kHeaderBytes - 1 - header.size(), ' ');
  header.push_back('\n');
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!os) throw FormatError("write failed: " + path.string());
}

std::string read_header(std::ifstream& is, const std::filesystem::path& path) {
  std::string header(kHeaderBytes, '\0');
  is.read(header.data(), kHeaderBytes);
  if (is.gcount() != static_cast<std::streamsize>(kHeaderBytes)) throw FormatError("truncated header: " + path.string());
  if (header.back() != '\n') throw FormatError("malformed header line: " + path.string());
  return header;
}

std::vector<float> read_floats(std::ifstream& is, std::size_t count, const std::filesystem::path& path) {
  std::vector<float> data(count);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != count * sizeof(float)) {
    throw FormatError("truncated payload: " + path.string());
  }
  char extra;
  if (is.read(&extra, 1); is.gcount() != 0) throw FormatError("trailing bytes after payload: " + path.string());
  return data;
}

}  // namespace

void save_volume(const std::filesystem::path& path, const VoxelVolume& vol) {
  std::ostringstream h;
  h << "XWINVOL1 " << vol.nx << ' ' << vol.ny << ' ' << vol.nz;
  for (double s : vol.spacing) h << ' ' << fmt_number(s);
  for (double o : vol.origin) h << ' ' << fmt_number(o);
  write_payload(path, h.str(), vol.data);
}

VoxelVolume load_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path.string());
  std::istringstream h(read_header(is, path));
  std::string tag;
  VoxelVolume vol;
  h >> tag >> vol.nx >> vol.ny >> vol.nz >> vol.spacing[0] >> vol.spacing[1] >> vol.spacing[2] >> vol.origin[0] >>
      vol.origin[1] >> vol.origin[2];
  if (tag != "XWINVOL1" || !h) throw FormatError("not a volume header: " + path.string());
  if (vol.nx < 8 || vol.ny < 8 || vol.nz < 8) throw FormatError("volume dimensions must be >= 8");
  if (vol.spacing[0] <= 0 || vol.spacing[1] <= 0 || vol.spacing[2] <= 0) throw FormatError("non-positive spacing");
  vol.data = read_floats(is, static_cast<std::size_t>(vol.nx) * vol.ny * vol.nz, path);
  return vol;
}

void save_projection(const std::filesystem::path& path, const ProjectionImage& img) {
  std::ostringstream h;
  h << "XWINPRJ1 " << img.nu << ' ' << img.nv << ' ' << fmt_number(img.pitch);
  write_payload(path, h.str(), img.data);
}

ProjectionImage load_projection(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path.string());
  std::istringstream h(read_header(is, path));
  std::string tag;
  ProjectionImage img;
  h >> tag >> img.nu >> img.nv >> img.pitch;
  if (tag != "XWINPRJ1" || !h) throw FormatError("not a projection header: " + path.string());
  if (img.nu <= 0 || img.nv <= 0) throw FormatError("projection dimensions must be positive");
  if (img.pitch <= 0) throw FormatError("non-positive pitch");
  img.data = read_floats(is, static_cast<std::size_t>(img.nu) * img.nv, path);
  return img;
}

}  // namespace xwin
