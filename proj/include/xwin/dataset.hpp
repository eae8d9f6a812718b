#pragma once

// Seeded phantom collections, the projection cache, and the pseudo-real image
// pool that stands in for the real-domain stream.

#include "xwin/config.hpp"
#include "xwin/projector.hpp"
#include "xwin/volume.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

namespace xwin {

/// splitmix64 finaliser over a running hash; used to derive independent
/// random streams from (seed, step, index, ...) tuples.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

template <typename... Ts>
std::uint64_t derive_seed(std::uint64_t seed, Ts... parts) {
  std::uint64_t h = mix_seed(seed, 0x9e3779b97f4a7c15ULL);
  ((h = mix_seed(h, static_cast<std::uint64_t>(parts))), ...);
  return h;
}

/// Lesion count of phantom `id`: cycles 0, 1, 2, ..., max_lesions.
int lesion_count_for(std::uint64_t id, int max_lesions);

/// Spec of phantom `id` of the collection rooted at `phantom_seed`.
PhantomSpec phantom_spec(const TrainConfig& cfg, std::uint64_t id);

/// Memoised phantom volumes plus line-integral projections keyed by
/// (phantom id, pose). Yaw-only poses on the delta_phi lattice are cached in
/// memory and, when a cache directory is configured, on disk.
class ProjectionCache {
 public:
  explicit ProjectionCache(const TrainConfig& cfg);

  const Phantom& phantom(std::uint64_t id);

  /// Line integrals at absolute yaw beta (degrees) plus optional tilt.
  ProjectionImage line_integrals(std::uint64_t id, double beta, double pitch = 0.0, double roll = 0.0);

  /// Display-domain image (nv x nu) fed to the network.
  Eigen::MatrixXd display(std::uint64_t id, double beta, double pitch = 0.0, double roll = 0.0);

  /// Renders without consulting the cache.
  ProjectionImage render(std::uint64_t id, double beta, double pitch = 0.0, double roll = 0.0);

  std::size_t cached_projections() const { return projections_.size(); }

 private:
  std::filesystem::path disk_path(std::uint64_t id, long long key) const;

  TrainConfig cfg_;
  std::map<std::uint64_t, std::unique_ptr<Phantom>> phantoms_;
  std::map<std::pair<std::uint64_t, long long>, ProjectionImage> projections_;
  std::mutex mutex_;
};

/// Pseudo-real version of a display image: style with a per-image seed.
Eigen::MatrixXd pseudo_real(const Eigen::MatrixXd& display, const DomainStyle& style, std::uint64_t image_seed);

/// The real-domain pool: phantoms num_phantoms .. num_phantoms + num_real - 1
/// (disjoint from the simulated set), each at a seeded yaw in [-90, 180] on
/// the action lattice, display-transformed then styled.
std::vector<Eigen::MatrixXd> build_real_pool(const TrainConfig& cfg, ProjectionCache& cache);

}  // namespace xwin
