#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "mixnn/families.hpp"

using namespace mixnn;
using namespace mixnn::fam;
using namespace mixnn::ad;

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

Var vec(Tape& t, std::vector<double> v) {
  return t.constant(Shape{static_cast<int>(v.size()), 1}, std::move(v));
}

std::vector<double> rand_vec(std::size_t n, unsigned seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("gaussian_nll") {
  Tape t;
  SUBCASE("at the mean with unit variance") {
    Var nll = gaussian_nll(vec(t, {1.0}), t.scalar_const(0.0), vec(t, {1.0}));
    CHECK(nll.scalar() == doctest::Approx(0.9189385332046727).epsilon(1e-12));
  }
  SUBCASE("two-sigma miss") {
    Var nll = gaussian_nll(vec(t, {0.0}), t.scalar_const(0.0), vec(t, {2.0}));
    CHECK(nll.scalar() == doctest::Approx(0.9189385332046727 + 2.0));
  }
  SUBCASE("random inputs match the scalar formula") {
    auto mu = rand_vec(20, 1, -2, 2);
    auto y = rand_vec(20, 2, -2, 2);
    const double ls2 = 0.37;
    Var nll = gaussian_nll(t.constant(Shape{20, 1}, std::vector<double>(mu)),
                           t.scalar_const(ls2),
                           t.constant(Shape{20, 1}, std::vector<double>(y)));
    double expect = 0;
    for (int i = 0; i < 20; ++i) {
      const double s2 = std::exp(ls2);
      expect += 0.5 * (std::log(2 * M_PI * s2) + (y[i] - mu[i]) * (y[i] - mu[i]) / s2);
    }
    expect /= 20;
    CHECK(nll.scalar() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("gradient vanishes at y = mu") {
    Tape t2;
    Var mu = t2.leaf(Shape{3, 1}, std::vector<double>{1.0, -0.5, 2.0});
    Var nll = gaussian_nll(mu, t2.scalar_const(0.3),
                           t2.constant(Shape{3, 1}, std::vector<double>{1.0, -0.5, 2.0}));
    t2.backward(nll);
    for (double g : mu.grad()) CHECK(std::abs(g) < 1e-14);
  }
}

TEST_CASE("binomial_nll") {
  Tape t;
  SUBCASE("logit zero") {
    Var nll = binomial_nll(vec(t, {0.0}), vec(t, {1.0}));
    CHECK(nll.scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("extreme logit stays finite and near zero") {
    Var nll = binomial_nll(vec(t, {40.0}), vec(t, {1.0}));
    CHECK(nll.scalar() < 1e-15);
    CHECK(std::isfinite(nll.scalar()));
  }
  SUBCASE("matches -log p at moderate logits") {
    auto logits = rand_vec(15, 3, -3, 3);
    std::vector<double> y;
    for (std::size_t i = 0; i < logits.size(); ++i) y.push_back(i % 2 ? 1.0 : 0.0);
    Var nll = binomial_nll(t.constant(Shape{15, 1}, std::vector<double>(logits)),
                           t.constant(Shape{15, 1}, std::vector<double>(y)));
    double expect = 0;
    for (int i = 0; i < 15; ++i) {
      const double pr = 1.0 / (1.0 + std::exp(-logits[i]));
      expect += -std::log(y[i] == 1.0 ? pr : 1.0 - pr);
    }
    expect /= 15;
    CHECK(nll.scalar() == doctest::Approx(expect).epsilon(1e-10));
  }
}

TEST_CASE("multinomial_nll") {
  Tape t;
  SUBCASE("uniform logits, four classes") {
    Var logits = t.constant(Shape{1, 4}, std::vector<double>{0, 0, 0, 0});
    CHECK(multinomial_nll(logits, {2}).scalar() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("confident correct prediction") {
    Var logits = t.constant(Shape{1, 3}, std::vector<double>{0, 30, 0});
    CHECK(multinomial_nll(logits, {1}).scalar() < 1e-10);
  }
  SUBCASE("permutation equivariance") {
    auto lv = rand_vec(4, 7, -2, 2);
    Var a = t.constant(Shape{1, 4}, std::vector<double>(lv));
    const double base = multinomial_nll(a, {2}).scalar();
    std::vector<int> perm{3, 0, 2, 1};  // position of old class j in new order
    std::vector<double> shuffled(4);
    for (int j = 0; j < 4; ++j) shuffled[perm[j]] = lv[j];
    Var b = t.constant(Shape{1, 4}, std::vector<double>(shuffled));
    CHECK(multinomial_nll(b, {perm[2]}).scalar() ==
          doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("label range validated") {
    Var logits = t.constant(Shape{1, 3}, std::vector<double>{0, 0, 0});
    CHECK_THROWS_AS(multinomial_nll(logits, {3}), DataError);
  }
}

TEST_CASE("poisson_nll") {
  Tape t;
  CHECK(poisson_nll(vec(t, {0.0}), vec(t, {0.0})).scalar() == doctest::Approx(1.0));
  CHECK(poisson_nll(vec(t, {0.0}), vec(t, {1.0})).scalar() == doctest::Approx(1.0));
  SUBCASE("log-gamma equals log factorial for small counts") {
    for (int y = 0; y <= 20; ++y) {
      Var nll = poisson_nll(vec(t, {0.5}), vec(t, {static_cast<double>(y)}));
      double fact = 0;
      for (int k = 2; k <= y; ++k) fact += std::log(static_cast<double>(k));
      const double expect = std::exp(0.5) - y * 0.5 + fact;
      CHECK(nll.scalar() == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("negbin_nll") {
  Tape t;
  SUBCASE("approaches the Poisson limit as phi grows") {
    const double eta = 0.7;
    for (double y : {0.0, 1.0, 4.0}) {
      Var p = poisson_nll(vec(t, {eta}), vec(t, {y}));
      Var nb = negbin_nll(vec(t, {eta}), t.scalar_const(std::log(1e6)), vec(t, {y}));
      CHECK(std::abs(p.scalar() - nb.scalar()) < 1e-3);
    }
  }
  SUBCASE("y = 0 closed form") {
    const double eta = 0.4, phi = 2.5;
    const double mu = std::exp(eta);
    Var nb = negbin_nll(vec(t, {eta}), t.scalar_const(std::log(phi)), vec(t, {0.0}));
    CHECK(nb.scalar() == doctest::Approx(phi * std::log(1.0 + mu / phi)).epsilon(1e-10));
  }
  SUBCASE("simulated variance matches mu + mu^2/phi") {
    // NB2 with mu = 2, phi = 1: variance = 6.
    const double mu = 2.0, phi = 1.0;
    std::mt19937_64 rng(42);
    std::gamma_distribution<double> gd(phi, mu / phi);
    const int draws = 200000;
    double s1 = 0, s2 = 0;
    for (int i = 0; i < draws; ++i) {
      std::poisson_distribution<int> pd(gd(rng));
      const double y = pd(rng);
      s1 += y;
      s2 += y * y;
    }
    const double mean = s1 / draws;
    const double var = s2 / draws - mean * mean;
    CHECK(std::abs(var - 6.0) < 0.05 * 6.0);
  }
}

TEST_CASE("mvgaussian_nll") {
  Tape t;
  SUBCASE("identity covariance reduces to summed univariate terms") {
    const int m = 3;
    auto mu = rand_vec(m, 8, -1, 1);
    auto y = rand_vec(m, 9, -1, 1);
    std::vector<double> eye(m * m, 0.0);
    for (int i = 0; i < m; ++i) eye[i * m + i] = 1.0;
    Var nll = mvgaussian_nll(t.constant(Shape{1, m}, std::vector<double>(mu)),
                             t.constant(Shape{m, m}, std::move(eye)),
                             t.constant(Shape{1, m}, std::vector<double>(m, 0.0)),
                             t.constant(Shape{1, m}, std::vector<double>(y)));
    double expect = 0;
    for (int i = 0; i < m; ++i)
      expect += 0.5 * (kLog2Pi + (y[i] - mu[i]) * (y[i] - mu[i]));
    CHECK(nll.scalar() == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("m = 1 equals gaussian_nll") {
    Var g = gaussian_nll(vec(t, {0.4}), t.scalar_const(0.0), vec(t, {1.2}));
    std::vector<double> one{1.0};
    Var mv = mvgaussian_nll(t.constant(Shape{1, 1}, std::vector<double>{0.4}),
                            t.constant(Shape{1, 1}, std::vector<double>(one)),
                            t.constant(Shape{1, 1}, std::vector<double>{0.0}),
                            t.constant(Shape{1, 1}, std::vector<double>{1.2}));
    CHECK(mv.scalar() == doctest::Approx(g.scalar()).epsilon(1e-12));
  }
  SUBCASE("random SPD covariance matches the dense-inverse quadratic form") {
    const int m = 4, n = 6;
    std::mt19937_64 rng(13);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd a(m, m);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) a(i, j) = nd(rng);
    Eigen::MatrixXd sigma = a * a.transpose() + 2.0 * Eigen::MatrixXd::Identity(m, m);
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    Eigen::MatrixXd l = llt.matrixL();

    auto muv = rand_vec(n * m, 14, -1, 1);
    auto yv = rand_vec(n * m, 15, -1, 1);
    std::vector<double> lv(m * m, 0.0), logd(m);
    for (int i = 0; i < m; ++i) {
      logd[i] = std::log(l(i, i));
      for (int j = 0; j <= i; ++j) lv[i * m + j] = l(i, j);
    }
    Var nll = mvgaussian_nll(t.constant(Shape{n, m}, std::vector<double>(muv)),
                             t.constant(Shape{m, m}, std::move(lv)),
                             t.constant(Shape{1, m}, std::move(logd)),
                             t.constant(Shape{n, m}, std::vector<double>(yv)));
    Eigen::MatrixXd sigma_inv = sigma.inverse();
    double expect = 0;
    const double logdet = std::log(sigma.determinant());
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd r(m);
      for (int j = 0; j < m; ++j) r(j) = yv[i * m + j] - muv[i * m + j];
      expect += 0.5 * (m * kLog2Pi + logdet + r.dot(sigma_inv * r));
    }
    expect /= n;
    CHECK(nll.scalar() == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("multilabel_nll") {
  Tape t;
  SUBCASE("all-zero logits over three labels") {
    Var nll = multilabel_nll(t.constant(Shape{1, 3}, std::vector<double>{0, 0, 0}),
                             t.constant(Shape{1, 3}, std::vector<double>{1, 0, 1}));
    CHECK(nll.scalar() == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("single label equals binomial") {
    Var a = multilabel_nll(t.constant(Shape{2, 1}, std::vector<double>{0.7, -0.3}),
                           t.constant(Shape{2, 1}, std::vector<double>{1, 0}));
    Var b = binomial_nll(t.constant(Shape{2, 1}, std::vector<double>{0.7, -0.3}),
                         t.constant(Shape{2, 1}, std::vector<double>{1, 0}));
    CHECK(a.scalar() == doctest::Approx(b.scalar()).epsilon(1e-12));
  }
  SUBCASE("coordinate additivity over random splits") {
    auto lv = rand_vec(8, 21, -2, 2);
    std::vector<double> yv{1, 0, 1, 1, 0, 0, 1, 0};
    Var whole = multilabel_nll(t.constant(Shape{1, 8}, std::vector<double>(lv)),
                               t.constant(Shape{1, 8}, std::vector<double>(yv)));
    Var left = multilabel_nll(
        t.constant(Shape{1, 3}, std::vector<double>(lv.begin(), lv.begin() + 3)),
        t.constant(Shape{1, 3}, std::vector<double>(yv.begin(), yv.begin() + 3)));
    Var right = multilabel_nll(
        t.constant(Shape{1, 5}, std::vector<double>(lv.begin() + 3, lv.end())),
        t.constant(Shape{1, 5}, std::vector<double>(yv.begin() + 3, yv.end())));
    CHECK(whole.scalar() ==
          doctest::Approx(left.scalar() + right.scalar()).epsilon(1e-12));
  }
}

TEST_CASE("output SEM") {
  std::vector<OutcomeSpec> outcomes(2);
  outcomes[0].name = "a";
  outcomes[0].targets = {"a"};
  outcomes[1].name = "b";
  outcomes[1].targets = {"b"};

  SUBCASE("edge substitution") {
    Tape t;
    // theta_b' = theta_b + 0.5 theta_a via edge a -> b.
    std::vector<double> b(4, 0.0);
    b[1 * 2 + 0] = 0.5;
    Var theta = t.constant(Shape{3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Var bsem = t.constant(Shape{2, 2}, std::move(b));
    auto out = apply_output_sem(theta, bsem).values();
    CHECK(out[0] == doctest::Approx(1.0));
    CHECK(out[1] == doctest::Approx(2.0 + 0.5));
    CHECK(out[3] == doctest::Approx(4.0 + 1.5));
    CHECK(out[5] == doctest::Approx(6.0 + 2.5));
  }
  SUBCASE("strictly triangular coupling is exact") {
    Tape t;
    const int p = 4;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    std::vector<double> bl(p * p, 0.0);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < i; ++j) bl[i * p + j] = nd(rng);
    Var theta = t.constant(Shape{5, p}, rand_vec(5 * p, 31, -1, 1));
    Var b = t.constant(Shape{p, p}, std::vector<double>(bl));
    Var coupled = apply_output_sem(theta, b);
    // residual check: (I - B) theta' = theta
    Eigen::MatrixXd bm(p, p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) bm(i, j) = bl[i * p + j];
    for (int r = 0; r < 5; ++r) {
      Eigen::VectorXd tr(p), orig(p);
      for (int j = 0; j < p; ++j) {
        tr(j) = coupled.values()[r * p + j];
        orig(j) = theta.values()[r * p + j];
      }
      Eigen::VectorXd resid = (Eigen::MatrixXd::Identity(p, p) - bm) * tr - orig;
      CHECK(resid.cwiseAbs().maxCoeff() < 1e-10);
    }
  }
  SUBCASE("cyclic edge list rejected with the cycle path") {
    std::vector<OutputEdge> edges;
    edges.push_back({"a", "b", 0.5});
    edges.push_back({"b", "a", std::nullopt});
    try {
      resolve_edges(edges, outcomes);
      FAIL("expected cycle rejection");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("cycle") != std::string::npos);
      CHECK(std::string(e.what()).find("->") != std::string::npos);
    }
  }
  SUBCASE("unknown outcome reference rejected") {
    std::vector<OutputEdge> edges{{"a", "zzz", 1.0}};
    CHECK_THROWS_AS(resolve_edges(edges, outcomes), DataError);
  }
}
