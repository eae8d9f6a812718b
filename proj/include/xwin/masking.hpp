#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace xwin {

struct MaskSpec {
  int grid_h = 0, grid_w = 0;
  std::vector<int> masked;   // sorted, row-major token indices
  std::vector<int> visible;  // sorted complement

  int num_tokens() const { return grid_h * grid_w; }
  double masked_fraction() const { return static_cast<double>(masked.size()) / num_tokens(); }
};

struct MultiBlockParams {
  int n_blocks = 4;
  std::pair<double, double> scale_range{0.15, 0.2};
  std::pair<double, double> aspect_range{0.75, 1.5};
  double min_ratio = 0.3;
  double max_ratio = 0.8;
  int max_attempts = 100;
};

/// Union of `n_blocks` random rectangles. If the union's fraction falls
/// outside [min_ratio, max_ratio] after `max_attempts` draws, the last draw is
/// trimmed or padded with random tokens. Pure function of its arguments.
MaskSpec sample_multiblock(int grid_h, int grid_w, const MultiBlockParams& params, std::uint64_t seed);

/// Sorted complement of `masked` over a grid of `n` tokens.
std::vector<int> complement(const std::vector<int>& masked, int n);

}  // namespace xwin
