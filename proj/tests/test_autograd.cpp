#include "gradcheck.hpp"

#include <doctest.h>

using namespace xwin;
using namespace xwin::testing;

namespace {

constexpr double kTol = 1e-4;

// Scalarise an arbitrary matrix output with fixed random weights so every
// output entry contributes a distinct gradient.
Var contract(const Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(y, ag::constant(random_mat(rng, y.rows(), y.cols()))));
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 3, 4), w = random_mat(rng, 4, 2);
    Mat row = random_mat(rng, 1, 4), s = random_mat(rng, 1, 1);
    Mat pos = (random_mat(rng, 3, 4).array().abs() + 0.5).matrix();

    CHECK(gradcheck([](auto& v) { return contract(ag::matmul(v[0], v[1]), 3); }, {a, w}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::add(v[0], v[1]), 4); }, {a, b}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::sub(v[0], v[1]), 5); }, {a, b}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::mul(v[0], v[1]), 6); }, {a, b}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::add_row(v[0], v[1]), 7); }, {a, row}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::mul_scalar(v[0], v[1]), 8); }, {a, s}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::div_scalar(v[0], ag::exp(v[1])), 9); }, {a, s}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::transpose(v[0]), 10); }, {a}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::exp(v[0]), 11); }, {a}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::log(v[0]), 12); }, {pos}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::square(v[0]), 13); }, {a}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::sigmoid(v[0]), 14); }, {a}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::gelu(v[0]), 15); }, {a}) < kTol);
  }
}

TEST_CASE("row-wise ops and reductions match finite differences") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Mat x = random_mat(rng, 5, 6), g = random_mat(rng, 1, 6), b = random_mat(rng, 1, 6);
    Mat sq = random_mat(rng, 4, 4);
    CHECK(gradcheck([](auto& v) { return contract(ag::softmax_rows(v[0]), 21); }, {x}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::log_softmax_rows(v[0]), 22); }, {x}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::layer_norm_rows(v[0], v[1], v[2]), 23); }, {x, g, b}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::layer_norm_rows(v[0]), 24); }, {x}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::l2_normalize_rows(v[0]), 25); }, {x}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::mean_rows(v[0]), 26); }, {x}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::sum_rows(v[0]), 27); }, {x}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::diag(v[0]), 28); }, {sq}) < kTol);
    CHECK(gradcheck([](auto& v) { return ag::mean(ag::square(v[0])); }, {x}) < kTol);
  }
}

TEST_CASE("structural ops route gradients to the right slots") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Mat a = random_mat(rng, 2, 3), b = random_mat(rng, 4, 3), c = random_mat(rng, 2, 5), r = random_mat(rng, 1, 3);
    CHECK(gradcheck([](auto& v) { return contract(ag::concat_rows(std::vector<Var>{v[0], v[1]}), 31); }, {a, b}) <
          kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::concat_cols(std::vector<Var>{v[0], v[1]}), 32); }, {a, c}) <
          kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::slice_rows(v[0], 1, 2), 33); }, {b}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::slice_cols(v[0], 1, 3), 34); }, {c}) < kTol);
    CHECK(gradcheck(
              [](auto& v) {
                std::vector<int> idx{3, 0, 3, 1};
                return contract(ag::gather_rows(v[0], idx), 35);
              },
              {b}) < kTol);
    CHECK(gradcheck([](auto& v) { return contract(ag::repeat_rows(v[0], 4), 36); }, {r}) < kTol);
  }
}

TEST_CASE("detach and constants stop gradient flow") {
  Var x = ag::leaf(Mat::Constant(2, 2, 1.5));
  Var y = ag::sum(ag::add(ag::square(ag::detach(x)), x));
  ag::backward(y);
  CHECK(x.grad().isApprox(Mat::Ones(2, 2)));

  Var c = ag::constant(Mat::Ones(2, 2));
  CHECK_FALSE(ag::exp(c).requires_grad());
}

TEST_CASE("straight-through copies the downstream gradient to the input") {
  Var x = ag::leaf(Mat::Constant(1, 3, 0.4));
  Var q = ag::constant(Mat::Constant(1, 3, 1.0));
  Var y = ag::straight_through(x, q);
  CHECK(y.value() == q.value());
  Var loss = contract(y, 40);
  ag::backward(loss);
  std::mt19937_64 rng(40);
  Mat w = random_mat(rng, 1, 3);
  CHECK(x.grad() == w);
}

TEST_CASE("gradients accumulate across shared subexpressions") {
  Var x = ag::leaf(Mat::Constant(1, 1, 3.0));
  Var y = ag::mul(x, x);
  Var z = ag::add(y, y);
  ag::backward(z);
  CHECK(x.grad()(0, 0) == doctest::Approx(12.0));
}

TEST_CASE("clamp blocks gradient outside its range") {
  Var x = ag::leaf((Mat(1, 3) << -1.0, 0.5, 2.0).finished());
  ag::backward(ag::sum(ag::clamp(x, 0.0, 1.0)));
  CHECK(x.grad() == (Mat(1, 3) << 0.0, 1.0, 0.0).finished());
}
