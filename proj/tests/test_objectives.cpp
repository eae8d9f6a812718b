#include "gradcheck.hpp"
#include "xwin/objectives.hpp"

#include <doctest.h>

#include <cmath>

using namespace xwin;
using namespace xwin::obj;
using namespace xwin::testing;

namespace {

constexpr double kTol = 1e-4;

Var tau(double t) { return ag::scalar_constant(t); }

Mat uniform(int n) { return Mat::Constant(n, n, 1.0 / n); }

}  // namespace

TEST_CASE("similarity matrix") {
  Mat eye = Mat::Identity(4, 4);
  CHECK(similarity_matrix(ag::constant(eye), ag::constant(eye)).value() == eye);

  std::mt19937_64 rng(1);
  Mat z = random_mat(rng, 5, 7), t = random_mat(rng, 5, 7);
  Mat s = similarity_matrix(ag::constant(z), ag::constant(t)).value();
  CHECK(s.cwiseAbs().maxCoeff() <= 1.0 + 1e-15);
  Mat self = similarity_matrix(ag::constant(z), ag::constant(z)).value();
  for (int i = 0; i < 5; ++i) CHECK(self(i, i) == doctest::Approx(1.0).epsilon(1e-14));
  Mat raw = similarity_matrix(ag::constant(z), ag::constant(t), false).value();
  CHECK(raw.isApprox(z * t.transpose(), 1e-14));
}

TEST_CASE("row softmax") {
  CHECK(softmax_rows(Mat::Constant(3, 3, 0.4), 0.1).isApprox(uniform(3), 1e-15));
  Mat s(1, 2);
  s << 1.0, 0.0;
  Mat p = softmax_rows(s, 1.0);
  CHECK(p(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p(0, 1) == doctest::Approx(0.2689).epsilon(1e-4));
  std::mt19937_64 rng(2);
  Mat big = random_mat(rng, 6, 6, 50.0);
  Mat pb = softmax_rows(big, 0.07);
  CHECK(pb.allFinite());
  for (int i = 0; i < 6; ++i) CHECK(std::abs(pb.row(i).sum() - 1.0) < 1e-6);
}

TEST_CASE("InfoNCE values") {
  CHECK(infonce(ag::constant(Mat::Identity(3, 3))).scalar() == 0.0);
  for (int n : {2, 4, 8}) CHECK(std::abs(infonce(ag::constant(uniform(n))).scalar() - std::log(n)) < 1e-6);
  CHECK(infonce(ag::constant(uniform(8))).scalar() == doctest::Approx(2.0794).epsilon(1e-4));
}

TEST_CASE("affinity matrix") {
  Mat same = Mat::Ones(5, 1) * (Mat(1, 3) << 0.2, -1.0, 0.5).finished();
  CHECK(affinity(same, 0.07).isApprox(uniform(5), 1e-12));
  std::mt19937_64 rng(3);
  Mat t = random_mat(rng, 6, 8);
  Mat a = affinity(t, 0.1);
  for (int i = 0; i < 6; ++i) CHECK(std::abs(a.row(i).sum() - 1.0) < 1e-6);
  Mat sharp = affinity(t, 1e-3);
  for (int i = 0; i < 6; ++i) CHECK(sharp(i, i) > 0.99);
}

TEST_CASE("affinity loss") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Mat p = random_stochastic(rng, 6);
    Var pv = ag::constant(p);
    CHECK(affinity_loss(Mat::Identity(6, 6), pv).scalar() == infonce(pv).scalar());
  }
  CHECK(affinity_loss(uniform(4), ag::constant(uniform(4))).scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // Cross-entropy over row-stochastic P is minimised at P = A.
  Mat a = random_stochastic(rng, 3);
  double at_a = affinity_loss(a, ag::constant(a)).scalar();
  for (int trial = 0; trial < 500; ++trial) CHECK(affinity_loss(a, ag::constant(random_stochastic(rng, 3))).scalar() >= at_a);
  // Gradient descent over softmax logits converges onto A.
  Mat logits = Mat::Zero(3, 3);
  for (int it = 0; it < 3000; ++it) {
    Var l = ag::leaf(logits);
    Var loss = affinity_loss_from_log(a, ag::log_softmax_rows(l));
    ag::backward(loss);
    logits -= 1.0 * l.grad();
  }
  CHECK((softmax_rows(logits, 1.0) - a).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("alignment loss") {
  std::mt19937_64 rng(5);
  Mat z = random_mat(rng, 8, 6), t = random_mat(rng, 8, 6);
  auto zero = align_loss(ag::constant(z), ag::constant(t), tau(0.1), 0.1, 0.0);
  CHECK(zero.total.scalar() == zero.infonce.scalar());

  LossWeights w;
  CHECK(w.affinity == 0.4);
  // Identical rows make both P and A uniform.
  Mat same = Mat::Ones(8, 1) * random_mat(rng, 1, 6);
  auto u = align_loss(ag::constant(same), ag::constant(same), tau(0.07), 0.07, w.affinity);
  CHECK(u.total.scalar() == doctest::Approx(1.4 * std::log(8.0)).epsilon(1e-9));
  CHECK(u.total.scalar() == doctest::Approx(2.911).epsilon(1e-3));
}

TEST_CASE("MIM loss reductions") {
  Mat p = (Mat(1, 2) << 3.0, 4.0).finished();
  std::vector<Var> pr{ag::constant(p)}, tr{ag::constant(Mat::Zero(1, 2))};
  std::vector<Var> none;
  CHECK(mim_loss(pr, tr, none, none).scalar() == 12.5);
  CHECK(mim_loss(pr, tr, none, none, MimReduction::token_sum).scalar() == 25.0);
  CHECK(mim_loss(pr, pr, pr, pr).scalar() == 0.0);
  std::vector<Var> p2{ag::constant(2.0 * p)};
  CHECK(mim_loss(p2, tr, none, none).scalar() == 4.0 * 12.5);
  CHECK(parse_mim_reduction("token_sum") == MimReduction::token_sum);
  CHECK_THROWS(parse_mim_reduction("median"));
}

TEST_CASE("classifier cross-entropy") {
  auto c = [](double pr, double ps) {
    std::vector<Var> a{ag::scalar_constant(pr)}, b{ag::scalar_constant(ps)};
    return cls_loss(a, b).scalar();
  };
  CHECK(c(0.5, 0.5) == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK(c(1.0, 0.0) < 1e-6);
  double edge = c(0.5, 1.0);
  CHECK(std::isfinite(edge));
  CHECK(edge > 15.0);
}

TEST_CASE("domain loss") {
  Mat z = Mat::Constant(4, 3, 0.3);
  std::vector<Var> zv{ag::constant(z)}, tv{ag::constant(z)};
  std::vector<Var> one{ag::scalar_constant(1.0)}, half{ag::scalar_constant(0.5)};
  CHECK(std::abs(domain_loss(zv, tv, one).scalar()) < 1e-6);
  CHECK(domain_loss(zv, tv, half).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("overall loss") {
  LossWeights w;
  CHECK(w.mim == 1.0);
  CHECK(w.domain == 0.6);
  CHECK(w.cls == 1.0);
  CHECK(overall_loss(0, 0, 0, 0, w) == 0.0);
  CHECK(overall_loss(1, 1, 1, 1, w) == doctest::Approx(3.6).epsilon(1e-12));
  auto r = make_report(0.7, 1.1, 0.3, 0.9, 1.2, w);
  CHECK(r.align == doctest::Approx(0.7 + 0.4 * 1.1));
  CHECK(std::abs(r.overall - (r.align + r.mim + 0.6 * r.domain + r.cls)) <= 1e-6 * std::abs(r.overall));
  CHECK(r.all_finite());
  r.cls = std::nan("");
  CHECK_FALSE(r.all_finite());
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 2 + trial % 7;
    Mat z = random_mat(rng, n, 5), t = random_mat(rng, n, 5), lt = random_mat(rng, 1, 1, 0.3);
    Mat a = random_stochastic(rng, n), p = random_stochastic(rng, n);
    for (bool norm : {true, false}) {
      CHECK(gradcheck(
                [&](const std::vector<Var>& v) {
                  return align_loss(v[0], ag::constant(t), ag::exp(v[1]), 0.2, 0.4, norm).total;
                },
                {z, lt}) < kTol);
    }
    CHECK(gradcheck([](const std::vector<Var>& v) { return infonce(v[0]); }, {p}) < kTol);
    CHECK(gradcheck([&](const std::vector<Var>& v) { return affinity_loss(a, v[0]); }, {p}) < kTol);
    CHECK(gradcheck([&](const std::vector<Var>& v) { return ag::sum(ag::mul(similarity_matrix(v[0], v[1]), ag::constant(a))); },
                    {z, t}) < kTol);

    Mat pr = random_mat(rng, 3, 4), tg = random_mat(rng, 3, 4), ps = random_mat(rng, 2, 4), ts = random_mat(rng, 2, 4);
    for (auto red : {MimReduction::element_mean, MimReduction::token_sum}) {
      CHECK(gradcheck(
                [&](const std::vector<Var>& v) {
                  std::vector<Var> a1{v[0]}, b1{ag::constant(tg)}, a2{v[1]}, b2{ag::constant(ts)};
                  return mim_loss(a1, b1, a2, b2, red);
                },
                {pr, ps}) < kTol);
    }

    std::uniform_real_distribution<double> u(0.05, 0.95);
    Mat q1 = Mat::Constant(1, 1, u(rng)), q2 = Mat::Constant(1, 1, u(rng));
    CHECK(gradcheck(
              [](const std::vector<Var>& v) {
                std::vector<Var> a1{v[0]}, a2{v[1]};
                return cls_loss(a1, a2);
              },
              {q1, q2}) < kTol);
    CHECK(gradcheck(
              [&](const std::vector<Var>& v) {
                std::vector<Var> zz{v[0]}, tt{ag::constant(tg)}, pp{v[1]};
                return domain_loss(zz, tt, pp);
              },
              {pr, q1}) < kTol);
  }
}

TEST_CASE("no gradient flows through the affinity matrix or detached targets") {
  std::mt19937_64 rng(7);
  Var z = ag::leaf(random_mat(rng, 4, 3));
  Var t = ag::leaf(random_mat(rng, 4, 3));
  auto terms = align_loss(z, ag::detach(t), tau(0.1), 0.1, 0.4);
  ag::backward(terms.total);
  CHECK(z.has_grad());
  CHECK_FALSE(t.has_grad());
}
