#include "xwin/error.hpp"
#include "xwin/masking.hpp"

#include <doctest.h>

#include <algorithm>

using namespace xwin;

namespace {

constexpr double kPinnedMeanFraction = 0.500056;

void check_partition(const MaskSpec& m) {
  const int n = m.num_tokens();
  CHECK(m.masked.size() + m.visible.size() == static_cast<std::size_t>(n));
  CHECK(std::is_sorted(m.masked.begin(), m.masked.end()));
  CHECK(std::is_sorted(m.visible.begin(), m.visible.end()));
  std::vector<int> all;
  std::merge(m.masked.begin(), m.masked.end(), m.visible.begin(), m.visible.end(), std::back_inserter(all));
  for (int i = 0; i < n; ++i) REQUIRE(all[static_cast<std::size_t>(i)] == i);
}

}  // namespace

TEST_CASE("a single full-size block covers the grid up to the ratio cap") {
  MultiBlockParams p;
  p.n_blocks = 1;
  p.scale_range = {1.0, 1.0};
  p.aspect_range = {1.0, 1.0};
  p.max_ratio = 1.0;
  CHECK(sample_multiblock(8, 8, p, 1).masked.size() == 64);
  p.max_ratio = 0.8;
  auto m = sample_multiblock(8, 8, p, 1);
  CHECK(m.masked.size() == 51);
  check_partition(m);
}

TEST_CASE("sampling is a pure function of the seed") {
  MultiBlockParams p;
  auto a = sample_multiblock(8, 8, p, 77);
  auto b = sample_multiblock(8, 8, p, 77);
  CHECK(a.masked == b.masked);
  CHECK(a.visible == b.visible);
}

TEST_CASE("default parameters keep the masked fraction in bounds") {
  MultiBlockParams p;
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto m = sample_multiblock(8, 8, p, seed);
    REQUIRE(m.masked_fraction() >= 0.3);
    REQUIRE(m.masked_fraction() <= 0.8);
    check_partition(m);
  }
  for (std::uint64_t seed = 0; seed < 10000; ++seed) total += sample_multiblock(8, 8, p, seed).masked_fraction();
  MESSAGE("mean masked fraction over 1e4 seeds: " << total / 10000.0);
  CHECK(std::abs(total / 10000.0 - kPinnedMeanFraction) < 0.05);
}

TEST_CASE("invalid requests") {
  MultiBlockParams p;
  CHECK_THROWS_AS(sample_multiblock(2, 2, p, 0), InvalidArgument);
  p.n_blocks = 0;
  CHECK_THROWS_AS(sample_multiblock(8, 8, p, 0), InvalidArgument);
}

TEST_CASE("complement") {
  CHECK(complement({1, 3}, 5) == std::vector<int>{0, 2, 4});
  CHECK(complement({}, 3) == std::vector<int>{0, 1, 2});
}
