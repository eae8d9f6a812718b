#include "gradcheck.hpp"
#include "xwin/error.hpp"
#include "xwin/model.hpp"

#include <doctest.h>

#include <cmath>

using namespace xwin;
using namespace xwin::nn;
using namespace xwin::testing;

namespace {

constexpr double kTol = 1e-4;

ModelConfig tiny() {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.encoder_depth = 1;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.predictor_dim = 8;
  c.predictor_depth = 1;
  c.classifier_depth = 1;
  return c;
}

Mat random_image(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat m(n, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Var contract(const Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum(ag::mul(y, ag::constant(random_mat(rng, y.rows(), y.cols()))));
}

}  // namespace

TEST_CASE("patch embedding shapes and zero input") {
  ModelConfig c = tiny();
  c.image_size = 32;
  auto store = init_params(c, 1);
  Binding p(store, false);
  CHECK(patch_embed(Mat::Zero(32, 32), p, c).rows() == 16);
  // Biases start at zero, so a zero image embeds to zero before PE.
  CHECK(patch_embed(Mat::Zero(32, 32), p, c, false).value().isZero(0.0));

  std::mt19937_64 rng(2);
  Mat img = random_image(rng, 32);
  CHECK(patch_embed(img, p, c).value() == patch_embed(img, p, c).value());
}

TEST_CASE("sinusoidal positional encoding") {
  Mat pe = sinusoidal_pe(5, 64);
  for (int c = 0; c < 64; ++c) CHECK(pe(0, c) == (c % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe.cwiseAbs().maxCoeff() <= 1.0);
  for (int i = 0; i < 32; ++i) {
    double w = 3.0 / std::pow(10000.0, 2.0 * i / 64.0);
    CHECK(pe(3, 2 * i) == doctest::Approx(std::sin(w)).epsilon(1e-14));
    CHECK(pe(3, 2 * i + 1) == doctest::Approx(std::cos(w)).epsilon(1e-14));
  }
}

TEST_CASE("encoder contracts") {
  ModelConfig c = tiny();
  auto store = init_params(c, 3);
  std::mt19937_64 rng(4);
  Mat a = random_image(rng, 16), b = random_image(rng, 16);

  SUBCASE("depth 0 reduces to the final layer norm") {
    ModelConfig c0 = c;
    c0.encoder_depth = 0;
    Binding p(store, false);
    Var tok = patch_embed(a, p, c0);
    Mat want = ag::layer_norm_rows(tok, p("encoder.norm.gamma"), p("encoder.norm.beta")).value();
    CHECK(encode(tok, p, c0, EncoderRole::student).value() == want);
  }
  SUBCASE("samples are processed independently of order") {
    Binding p(store, false);
    Mat ea = encode_image(a, p, c, EncoderRole::student).value();
    Mat eb = encode_image(b, p, c, EncoderRole::student).value();
    CHECK(encode_image(b, p, c, EncoderRole::student).value() == eb);
    CHECK(encode_image(a, p, c, EncoderRole::student).value() == ea);
  }
  SUBCASE("attention rows are distributions") {
    Binding p(store, false);
    AttentionProbe probe;
    encode(patch_embed(a, p, c), p, c, EncoderRole::student, &probe);
    REQUIRE(probe.probs.size() == static_cast<std::size_t>(c.num_heads * c.encoder_depth));
    for (const Mat& m : probe.probs)
      for (Eigen::Index r = 0; r < m.rows(); ++r) CHECK(std::abs(m.row(r).sum() - 1.0) < 1e-6);
  }
  SUBCASE("teacher passes never produce gradients") {
    Binding p(store, true);
    Var t = encode_image(a, p, c, EncoderRole::teacher);
    CHECK_FALSE(t.requires_grad());
    Var s = encode_image(a, p, c, EncoderRole::student);
    ag::backward(ag::add(ag::sum(s), ag::sum(t)));
    CHECK(grad_sq_norm(p.gradients(), "encoder.") > 0.0);
    Binding q(store, true);
    Var t2 = encode_image(b, q, c, EncoderRole::teacher);
    ag::backward(ag::add(ag::sum(t2), ag::sum(q("loss.log_tau"))));
    CHECK(grad_sq_norm(q.gradients(), "encoder.") == 0.0);
  }
  SUBCASE("non-finite input aborts") {
    Binding p(store, false);
    Mat bad = a;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(encode_image(bad, p, c, EncoderRole::student), NumericalError);
  }
}

TEST_CASE("view predictor") {
  ModelConfig c = tiny();
  auto store = init_params(c, 5);
  Binding p(store, false);
  std::mt19937_64 rng(6);
  Var ctx = encode_image(random_image(rng, 16), p, c, EncoderRole::student);

  for (double a : {-1.5, 0.0, 0.3, 1.5}) CHECK(predict_view(ctx, a, p, c).rows() == ctx.rows());
  Mat w = store.get("view_predictor.action.weight");
  REQUIRE(w.norm() > 0.0);
  CHECK(predict_view(ctx, 0.1, p, c).value() != predict_view(ctx, 0.2, p, c).value());

  std::mt19937_64 rng2(7);
  for (int trial = 0; trial < 5; ++trial) {
    Mat a = random_mat(rng2, 1, 1);
    double err = gradcheck(
        [&](const std::vector<Var>& v) {
          Binding q(store, false);
          return contract(predict_view(ctx, v[0], q, c), 70);
        },
        {a});
    CHECK(err < kTol);
  }
}

TEST_CASE("mask predictor") {
  ModelConfig c = tiny();
  c.image_size = 32;
  auto store = init_params(c, 8);
  Binding p(store, false);
  std::mt19937_64 rng(9);
  Mat img = random_image(rng, 32);
  std::vector<int> visible{0, 2, 5, 7, 9, 11, 12, 14};
  std::vector<int> masked{1, 3, 4, 6, 8, 10, 13, 15};
  Var vis = encode_visible(img, visible, p, c, EncoderRole::student);

  CHECK(predict_mask(vis, visible, {}, p, c).rows() == 0);
  Mat out = predict_mask(vis, visible, masked, p, c).value();
  CHECK(out.rows() == 8);
  CHECK(out.cols() == c.embed_dim);

  std::vector<int> swapped = masked;
  std::swap(swapped[0], swapped[5]);
  Mat out2 = predict_mask(vis, visible, swapped, p, c).value();
  CHECK((out2.row(0) - out.row(5)).norm() < 1e-12);
  CHECK((out2.row(5) - out.row(0)).norm() < 1e-12);
  CHECK((out2.row(2) - out.row(2)).norm() < 1e-12);
}

TEST_CASE("domain classifier") {
  ModelConfig c = tiny();
  auto store = init_params(c, 10);
  for (auto& [name, m] : store)
    if (name.rfind("classifier.", 0) == 0) m.setZero();
  std::mt19937_64 rng(11);
  Var tok = ag::constant(random_mat(rng, 4, c.embed_dim));
  Binding p(store, false);
  CHECK(classify_logit(tok, p, c).scalar() == 0.0);
  CHECK(classify_domain(tok, p, c).scalar() == 0.5);

  auto s2 = init_params(c, 10);
  Binding p2(s2, false);
  double l = classify_logit(tok, p2, c).scalar();
  s2.get_mut("classifier.head.bias")(0, 0) += 0.5;
  Binding p3(s2, false);
  CHECK(classify_domain(tok, p3, c).scalar() > 1.0 / (1.0 + std::exp(-l)));
}

TEST_CASE("parameter gradients match finite differences") {
  ModelConfig c = tiny();
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 3; ++trial) {
    auto store = init_params(c, 100 + trial);
    // Non-trivial norms and biases so every path carries signal.
    for (auto& [name, m] : store)
      if (name.find("bias") != std::string::npos || name.find("beta") != std::string::npos)
        m = random_mat(rng, m.rows(), m.cols(), 0.1);
    Mat img = random_image(rng, 16);
    std::vector<int> visible{0, 3}, masked{1, 2};

    CHECK(param_gradcheck(store, [&](const Binding& p) {
      return contract(encode_image(img, p, c, EncoderRole::student), 80);
    }) < kTol);
    CHECK(param_gradcheck(store, [&](const Binding& p) {
      Var ctx = encode_image(img, p, c, EncoderRole::student);
      return contract(predict_view(ctx, 0.4, p, c), 81);
    }) < kTol);
    CHECK(param_gradcheck(store, [&](const Binding& p) {
      Var vis = encode_visible(img, visible, p, c, EncoderRole::student);
      return contract(predict_mask(vis, visible, masked, p, c), 82);
    }) < kTol);
    Var tok = encode_image(img, Binding(store, false), c, EncoderRole::student);
    CHECK(param_gradcheck(store, [&](const Binding& p) {
      return ag::log(classify_domain(tok, p, c));
    }) < kTol);
  }
}

TEST_CASE("classifier gradient with respect to its input tokens") {
  ModelConfig c = tiny();
  auto store = init_params(c, 13);
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    Mat x = random_mat(rng, 4, c.embed_dim);
    CHECK(gradcheck(
              [&](const std::vector<Var>& v) {
                Binding p(store, false);
                return ag::log(classify_domain(v[0], p, c));
              },
              {x}) < kTol);
  }
}

TEST_CASE("EMA update") {
  ParamStore t, s;
  t.set("encoder.w", Mat::Zero(2, 2));
  s.set("encoder.w", Mat::Constant(2, 2, 2.0));
  s.set("classifier.w", Mat::Constant(1, 1, 5.0));

  ParamStore t1 = t;
  ema_update(t1, s, 1.0);
  CHECK(t1 == t);
  ParamStore t0 = t;
  ema_update(t0, s, 0.0);
  CHECK(t0.get("encoder.w") == s.get("encoder.w"));
  CHECK_FALSE(t0.contains("classifier.w"));
  ParamStore th = t;
  ema_update(th, s, 0.5);
  CHECK(th.get("encoder.w") == Mat::Constant(2, 2, 1.0));

  auto full = init_params(tiny(), 1);
  auto teacher = full.subset(encoder_prefixes());
  for (const auto& [name, m] : teacher) CHECK(name.rfind("encoder.", 0) == 0);
  CHECK_FALSE(teacher.contains("loss.log_tau"));
}

TEST_CASE("global average pooling") {
  Var one = ag::constant((Mat(1, 3) << 1, 2, 3).finished());
  CHECK(global_avg_pool(one).value() == one.value());
  CHECK(global_avg_pool(ag::constant(Mat::Constant(4, 3, 0.7))).value().isApprox(Mat::Constant(1, 3, 0.7)));
  Mat m = (Mat(3, 2) << 1, 2, 3, 4, 5, 6).finished();
  Mat perm = (Mat(3, 2) << 5, 6, 1, 2, 3, 4).finished();
  CHECK(global_avg_pool(ag::constant(m)).value().isApprox(global_avg_pool(ag::constant(perm)).value(), 1e-15));
}

TEST_CASE("config validation") {
  ModelConfig c = tiny();
  c.image_size = 20;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = tiny();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}
