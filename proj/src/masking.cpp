#include "xwin/masking.hpp"

#include "xwin/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace xwin {

std::vector<int> complement(const std::vector<int>& masked, int n) {
  std::vector<char> flag(static_cast<std::size_t>(n), 0);
  for (int i : masked) flag[static_cast<std::size_t>(i)] = 1;
  std::vector<int> out;
  for (int i = 0; i < n; ++i)
    if (!flag[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

namespace {

std::vector<char> draw_union(int gh, int gw, const MultiBlockParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> scale(p.scale_range.first, p.scale_range.second);
  std::uniform_real_distribution<double> aspect(p.aspect_range.first, p.aspect_range.second);
  std::vector<char> grid(static_cast<std::size_t>(gh) * gw, 0);
  for (int b = 0; b < p.n_blocks; ++b) {
    double area = scale(rng) * gh * gw;
    double a = aspect(rng);
    int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * a))), 1, gh);
    int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area / a))), 1, gw);
    int top = std::uniform_int_distribution<int>(0, gh - h)(rng);
    int left = std::uniform_int_distribution<int>(0, gw - w)(rng);
    for (int y = top; y < top + h; ++y)
      for (int x = left; x < left + w; ++x) grid[static_cast<std::size_t>(y) * gw + x] = 1;
  }
  return grid;
}

}  // namespace

MaskSpec sample_multiblock(int grid_h, int grid_w, const MultiBlockParams& p, std::uint64_t seed) {
  require(grid_h > 0 && grid_w > 0, "mask grid must be non-empty");
  require(p.n_blocks >= 1, "n_blocks must be >= 1");
  require(p.scale_range.first > 0.0 && p.scale_range.first <= p.scale_range.second && p.scale_range.second <= 1.0,
          "scale_range must lie in (0, 1]");
  require(p.aspect_range.first > 0.0 && p.aspect_range.first <= p.aspect_range.second, "invalid aspect_range");
  require(0.0 <= p.min_ratio && p.min_ratio <= p.max_ratio && p.max_ratio <= 1.0, "invalid mask ratio bounds");
  const int n = grid_h * grid_w;
  if (p.scale_range.first * n < 1.0) throw InvalidArgument("grid too small to fit the minimum mask block");

  std::mt19937_64 rng(seed);
  std::vector<char> grid;
  int count = 0;
  for (int attempt = 0; attempt < std::max(1, p.max_attempts); ++attempt) {
    grid = draw_union(grid_h, grid_w, p, rng);
    count = static_cast<int>(std::count(grid.begin(), grid.end(), 1));
    double frac = static_cast<double>(count) / n;
    if (frac >= p.min_ratio && frac <= p.max_ratio) break;
  }

  // Clamp by random trimming / padding.
  const int hi = static_cast<int>(std::floor(p.max_ratio * n + 1e-9));
  const int lo = static_cast<int>(std::ceil(p.min_ratio * n - 1e-9));
  auto flip = [&](char from, int how_many) {
    std::vector<int> candidates;
    for (int i = 0; i < n; ++i)
      if (grid[static_cast<std::size_t>(i)] == from) candidates.push_back(i);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (int i = 0; i < how_many; ++i) grid[static_cast<std::size_t>(candidates[static_cast<std::size_t>(i)])] = !from;
  };
  if (count > hi) flip(1, count - hi);
  if (count < lo) flip(0, lo - count);

  MaskSpec m;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  for (int i = 0; i < n; ++i) (grid[static_cast<std::size_t>(i)] ? m.masked : m.visible).push_back(i);
  return m;
}

}  // namespace xwin
