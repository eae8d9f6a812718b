#include "xwin/dataset.hpp"

#include "xwin/error.hpp"

#include <cmath>
#include <random>
#include <string>

namespace xwin {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

int lesion_count_for(std::uint64_t id, int max_lesions) {
  if (max_lesions <= 0 || id % 2 == 0) return 0;
  return 1 + static_cast<int>((id / 2) % static_cast<std::uint64_t>(max_lesions));
}

PhantomSpec phantom_spec(const TrainConfig& cfg, std::uint64_t id) {
  return random_chest_spec(derive_seed(cfg.phantom_seed, id), lesion_count_for(id, cfg.max_lesions), cfg.volume_grid,
                           cfg.volume_spacing);
}

ProjectionCache::ProjectionCache(const TrainConfig& cfg) : cfg_(cfg) {
  if (!cfg_.cache_dir.empty()) std::filesystem::create_directories(cfg_.cache_dir);
}

const Phantom& ProjectionCache::phantom(std::uint64_t id) {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = phantoms_.find(id);
  if (it == phantoms_.end()) {
    it = phantoms_.emplace(id, std::make_unique<Phantom>(generate_phantom(phantom_spec(cfg_, id)))).first;
  }
  return *it->second;
}

ProjectionImage ProjectionCache::render(std::uint64_t id, double beta, double pitch, double roll) {
  ConeBeamGeometry g = cfg_.rig;
  g.beta = beta;
  g.pitch_angle = pitch;
  g.roll_angle = roll;
  return render_drr(phantom(id).volume, g, cfg_.step_mm);
}

std::filesystem::path ProjectionCache::disk_path(std::uint64_t id, long long key) const {
  return std::filesystem::path(cfg_.cache_dir) / ("p" + std::to_string(id) + "_b" + std::to_string(key) + ".xwp");
}

ProjectionImage ProjectionCache::line_integrals(std::uint64_t id, double beta, double pitch, double roll) {
  double lattice = beta / cfg_.delta_phi;
  bool cacheable = pitch == 0.0 && roll == 0.0 && std::abs(lattice - std::round(lattice)) < 1e-9;
  if (!cacheable) return render(id, beta, pitch, roll);

  const long long key = std::llround(beta * 1000.0);
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = projections_.find({id, key});
    if (it != projections_.end()) return it->second;
  }
  ProjectionImage img;
  bool loaded = false;
  if (!cfg_.cache_dir.empty()) {
    auto path = disk_path(id, key);
    if (std::filesystem::exists(path)) {
      img = load_projection(path);
      loaded = img.nu == cfg_.rig.nu && img.nv == cfg_.rig.nv && img.pitch == cfg_.rig.pitch;
    }
  }
  if (!loaded) {
    img = render(id, beta);
    if (!cfg_.cache_dir.empty()) save_projection(disk_path(id, key), img);
  }
  std::lock_guard<std::mutex> lock(mutex_);
  return projections_.emplace(std::make_pair(id, key), std::move(img)).first->second;
}

Eigen::MatrixXd ProjectionCache::display(std::uint64_t id, double beta, double pitch, double roll) {
  return to_matrix(to_display(line_integrals(id, beta, pitch, roll)));
}

Eigen::MatrixXd pseudo_real(const Eigen::MatrixXd& display, const DomainStyle& style, std::uint64_t image_seed) {
  DomainStyle s = style;
  s.seed = derive_seed(style.seed, image_seed);
  return to_matrix(pseudo_real_transform(from_matrix(display, 1.0), s));
}

std::vector<Eigen::MatrixXd> build_real_pool(const TrainConfig& cfg, ProjectionCache& cache) {
  std::vector<Eigen::MatrixXd> pool;
  pool.reserve(static_cast<std::size_t>(cfg.num_real));
  const int lo = static_cast<int>(std::lround(-90.0 / cfg.delta_phi));
  const int hi = static_cast<int>(std::lround(180.0 / cfg.delta_phi));
  for (int i = 0; i < cfg.num_real; ++i) {
    std::uint64_t id = static_cast<std::uint64_t>(cfg.num_phantoms + i);
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x7265616cULL, id));
    int k = std::uniform_int_distribution<int>(lo, hi)(rng);
    pool.push_back(pseudo_real(cache.display(id, k * cfg.delta_phi), cfg.real_style, id));
  }
  return pool;
}

}  // namespace xwin
