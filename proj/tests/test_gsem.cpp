#include <doctest.h>

#include <Eigen/SVD>
#include <cmath>
#include <random>

#include "mixnn/gsem.hpp"
#include "mixnn/sim.hpp"

using namespace mixnn;
using namespace mixnn::gsem;
using namespace mixnn::ad;

namespace {

std::vector<double> rand_vec(std::size_t n, unsigned seed, double lo = -1,
                             double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Truncated-series matrix exponential, independent of the tape op.
Eigen::MatrixXd expm_series(const Eigen::MatrixXd& a) {
  Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  Eigen::MatrixXd term = acc;
  for (int k = 1; k <= 60; ++k) {
    term = term * a / k;
    acc += term;
    if (term.cwiseAbs().maxCoeff() < 1e-16) break;
  }
  return acc;
}

}  // namespace

TEST_CASE("static_transform") {
  Tape t;
  SUBCASE("zero adjacency is the identity") {
    Var xi = t.constant(Shape{2, 3}, rand_vec(6, 1));
    Var b = t.constant(Shape{3, 3}, std::vector<double>(9, 0.0));
    auto eta = static_transform(xi, b);
    for (int i = 0; i < 6; ++i)
      CHECK(eta.values()[i] == doctest::Approx(xi.values()[i]));
  }
  SUBCASE("forward substitution example") {
    Var xi = t.constant(Shape{1, 2}, std::vector<double>{1.0, 0.0});
    std::vector<double> bv(4, 0.0);
    bv[1 * 2 + 0] = 0.5;  // eta_2 depends on eta_1
    Var b = t.constant(Shape{2, 2}, std::move(bv));
    auto eta = static_transform(xi, b).values();
    CHECK(eta[0] == doctest::Approx(1.0));
    CHECK(eta[1] == doctest::Approx(0.5));
  }
  SUBCASE("residual check on a random strict-lower matrix") {
    const int d = 6, n = 4;
    auto bv = rand_vec(d * d, 2);
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) bv[i * d + j] = 0.0;
    Var b = t.constant(Shape{d, d}, std::vector<double>(bv));
    Var xi = t.constant(Shape{n, d}, rand_vec(n * d, 3));
    auto eta = static_transform(xi, b);
    // ||(I - B) eta - xi||_inf < 1e-10
    for (int r = 0; r < n; ++r) {
      for (int i = 0; i < d; ++i) {
        double v = eta.values()[r * d + i];
        for (int j = 0; j < d; ++j) v -= bv[i * d + j] * eta.values()[r * d + j];
        CHECK(std::abs(v - xi.values()[r * d + i]) < 1e-10);
      }
    }
  }
}

TEST_CASE("dag_penalty") {
  Tape t;
  SUBCASE("zero matrix") {
    Var b = t.constant(Shape{3, 3}, std::vector<double>(9, 0.0));
    CHECK(dag_penalty(b).scalar() == doctest::Approx(0.0));
  }
  SUBCASE("strictly lower-triangular matrices have zero penalty") {
    for (unsigned seed = 0; seed < 5; ++seed) {
      const int d = 5;
      auto bv = rand_vec(d * d, 100 + seed, -2, 2);
      for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) bv[i * d + j] = 0.0;
      Var b = t.constant(Shape{d, d}, std::move(bv));
      CHECK(std::abs(dag_penalty(b).scalar()) < 1e-10);
    }
  }
  SUBCASE("two-cycle value matches 2cosh(1) - 2 and the series oracle") {
    Var b = t.constant(Shape{2, 2}, std::vector<double>{0, 1, 1, 0});
    const double got = dag_penalty(b).scalar();
    CHECK(got == doctest::Approx(2.0 * std::cosh(1.0) - 2.0).epsilon(1e-9));
    Eigen::MatrixXd had(2, 2);
    had << 0, 1, 1, 0;
    CHECK(got == doctest::Approx(expm_series(had).trace() - 2.0).epsilon(1e-9));
  }
  SUBCASE("cycles produce positive penalty") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (int rep = 0; rep < 20; ++rep) {
      const int d = 4;
      std::vector<double> bv(d * d, 0.0);
      const int i = rep % d, j = (rep + 1) % d;
      bv[i * d + j] = u(rng);
      bv[j * d + i] = u(rng);
      Var b = t.constant(Shape{d, d}, std::move(bv));
      CHECK(dag_penalty(b).scalar() > 1e-6);
    }
  }
}

TEST_CASE("sparse_penalty") {
  Tape t;
  CHECK(sparse_penalty(t.constant(Shape{2, 2}, std::vector<double>(4, 0.0))).scalar() ==
        doctest::Approx(0.0));
  CHECK(sparse_penalty(t.constant(Shape{2, 2}, std::vector<double>{0, 0, -2, 0})).scalar() ==
        doctest::Approx(2.0));
  auto bv = rand_vec(16, 4, -2, 2);
  double expect = 0;
  for (double v : bv) expect += std::abs(v);
  CHECK(sparse_penalty(t.constant(Shape{4, 4}, std::vector<double>(bv))).scalar() ==
        doctest::Approx(expect).epsilon(1e-12));
}

namespace {

AttentionParams make_attention(Tape& t, int d, int heads, bool zero_qk,
                               unsigned seed) {
  AttentionParams p;
  p.n_heads = heads;
  p.value_embed = t.constant(Shape{d, d}, rand_vec(d * d, seed, -0.5, 0.5));
  p.pos_embed = t.constant(Shape{d, d}, rand_vec(d * d, seed + 1, -0.5, 0.5));
  if (zero_qk) {
    p.wq = t.constant(Shape{d, d}, std::vector<double>(d * d, 0.0));
    p.wk = t.constant(Shape{d, d}, std::vector<double>(d * d, 0.0));
  } else {
    p.wq = t.constant(Shape{d, d}, rand_vec(d * d, seed + 2, -0.5, 0.5));
    p.wk = t.constant(Shape{d, d}, rand_vec(d * d, seed + 3, -0.5, 0.5));
  }
  p.wv = t.constant(Shape{d, d}, rand_vec(d * d, seed + 4, -0.5, 0.5));
  p.wo = t.constant(Shape{d, 1}, rand_vec(d, seed + 5, -0.5, 0.5));
  return p;
}

}  // namespace

TEST_CASE("dynamic_attention") {
  SUBCASE("zero query/key weights give uniform attention") {
    Tape t;
    const int d = 4;
    Var eta = t.constant(Shape{3, d}, rand_vec(3 * d, 7));
    auto res = dynamic_attention(eta, make_attention(t, d, 2, true, 20));
    for (const auto& b : res.b_d) {
      for (double v : b.values()) CHECK(v == doctest::Approx(1.0 / d));
    }
  }
  SUBCASE("attention rows sum to one") {
    Tape t;
    const int d = 6;
    Var eta = t.constant(Shape{2, d}, rand_vec(2 * d, 8));
    auto res = dynamic_attention(eta, make_attention(t, d, 3, false, 30));
    for (const auto& b : res.b_d) {
      for (int i = 0; i < d; ++i) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += b.values()[i * d + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-10));
      }
    }
  }
  SUBCASE("head split must divide the width") {
    Tape t;
    Var eta = t.constant(Shape{1, 5}, rand_vec(5, 9));
    CHECK_THROWS_AS(dynamic_attention(eta, make_attention(t, 5, 2, false, 40)),
                    DataError);
  }
  SUBCASE("gradient through attention matches finite differences") {
    const int d = 4;
    auto eta0 = rand_vec(2 * d, 10);
    const double err = finite_diff_check(
        [&](Tape& t, Var x) {
          auto p = make_attention(t, d, 2, false, 50);
          auto res = dynamic_attention(x, p);
          Var w = t.constant(Shape{2, d}, rand_vec(2 * d, 60));
          return sum(mul(res.output, w));
        },
        Shape{2, d}, eta0);
    CHECK(err < 1e-5);
  }
}

TEST_CASE("hybrid_transform") {
  SUBCASE("reduces to the static solve when B_d is absent") {
    Tape t;
    const int d = 5, n = 3;
    auto bv = rand_vec(d * d, 11, -0.4, 0.4);
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) bv[i * d + j] = 0.0;
    Var b = t.constant(Shape{d, d}, std::vector<double>(bv));
    Var xi = t.constant(Shape{n, d}, rand_vec(n * d, 12));
    Var direct = static_transform(xi, b);
    int failures = 0;
    Var iterated = hybrid_transform(xi, b, nullptr, {}, &failures);
    CHECK(failures == 0);
    for (int i = 0; i < n * d; ++i) {
      CHECK(std::abs(direct.values()[i] - iterated.values()[i]) < 1e-8);
    }
  }
  SUBCASE("constant B_d with spectral radius 0.5 matches the dense solve") {
    Tape t;
    const int d = 4, n = 2;
    // Diagonalizable matrix with spectral radius exactly 0.5.
    Eigen::MatrixXd bd = Eigen::MatrixXd::Zero(d, d);
    bd(0, 1) = 0.5;
    bd(1, 0) = 0.25;   // eigenvalues +-sqrt(0.125) ~ 0.354
    bd(2, 2) = 0.5;
    bd(3, 2) = 0.3;
    std::vector<double> bdv(d * d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) bdv[i * d + j] = bd(i, j);

    Var zero_b = t.constant(Shape{d, d}, std::vector<double>(d * d, 0.0));
    auto xiv = rand_vec(n * d, 13);
    Var xi = t.constant(Shape{n, d}, std::vector<double>(xiv));
    auto bd_fn = [&](Var eta) {
      std::vector<Var> out;
      for (int i = 0; i < eta.rows(); ++i) {
        out.push_back(eta.tape()->constant(Shape{d, d}, std::vector<double>(bdv)));
      }
      return out;
    };
    int failures = 0;
    Var eta = hybrid_transform(xi, zero_b, bd_fn, {}, &failures);

    Eigen::MatrixXd sys = Eigen::MatrixXd::Identity(d, d) - bd;
    for (int r = 0; r < n; ++r) {
      Eigen::VectorXd xr(d);
      for (int j = 0; j < d; ++j) xr(j) = xiv[r * d + j];
      Eigen::VectorXd solved = sys.fullPivLu().solve(xr);
      for (int j = 0; j < d; ++j) {
        CHECK(std::abs(eta.values()[r * d + j] - solved(j)) < 1e-6);
      }
    }
  }
  SUBCASE("zero input stays zero") {
    Tape t;
    Var b = t.constant(Shape{3, 3}, rand_vec(9, 14, -0.2, 0.2));
    Var xi = t.constant(Shape{2, 3}, std::vector<double>(6, 0.0));
    Var eta = hybrid_transform(xi, b, nullptr);
    for (double v : eta.values()) CHECK(v == doctest::Approx(0.0));
  }
  SUBCASE("non-contractive systems are counted as failures") {
    Tape t;
    std::vector<double> bv(4, 0.0);
    bv[1] = 2.0;
    bv[2] = 2.0;  // spectral radius 2
    Var b = t.constant(Shape{2, 2}, std::move(bv));
    Var xi = t.constant(Shape{1, 2}, std::vector<double>{1.0, 1.0});
    int failures = 0;
    HybridOptions opts;
    opts.max_iters = 10;  // keep the divergence bounded
    hybrid_transform(xi, b, nullptr, opts, &failures);
    CHECK(failures == 1);
  }
}

TEST_CASE("contraction_penalty") {
  Tape t;
  SUBCASE("zero matrix") {
    Var z = t.constant(Shape{3, 3}, std::vector<double>(9, 0.0));
    CHECK(contraction_penalty(z, z).scalar() == doctest::Approx(0.0));
  }
  SUBCASE("diagonal case") {
    std::vector<double> d1(9, 0.0), d2(9, 0.0);
    d1[0] = 0.5;
    d1[4] = 0.2;
    Var a = t.constant(Shape{3, 3}, std::move(d1));
    Var b = t.constant(Shape{3, 3}, std::move(d2));
    CHECK(contraction_penalty(a, b).scalar() == doctest::Approx(0.25).epsilon(1e-9));
  }
  SUBCASE("random matrix matches the SVD oracle") {
    const int d = 8;
    auto mv = rand_vec(d * d, 15);
    Var m = t.constant(Shape{d, d}, std::vector<double>(mv));
    Var z = t.constant(Shape{d, d}, std::vector<double>(d * d, 0.0));
    Eigen::MatrixXd em(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) em(i, j) = mv[i * d + j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(em);
    const double expect = svd.singularValues()(0) * svd.singularValues()(0);
    CHECK(contraction_penalty(m, z).scalar() == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("structural regression recovers a chain") {
  auto chain = sim::simulate_sem_chain(800, 0.1, 21);
  Eigen::MatrixXd x(800, 4);
  const char* cols[] = {"x1", "x2", "x3", "y"};
  for (int j = 0; j < 4; ++j) {
    const auto& col = chain.data.at(cols[j]).num;
    for (int i = 0; i < 800; ++i) x(i, j) = col[i];
  }
  StructureFitOptions opts;
  opts.seed = 5;
  Eigen::MatrixXd b = fit_structure(x, opts);

  // Thresholded graph: acyclic and dominated by the true chain edges.
  CHECK_FALSE(find_cycle(b, 0.3).has_value());
  int found = 0, correct = 0;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (std::abs(b(i, j)) > 0.3) {
        ++found;
        if (chain.adjacency(i, j) != 0.0) ++correct;
      }
    }
  }
  CHECK(found >= 3);
  CHECK(static_cast<double>(correct) / found >= 0.8);
}

TEST_CASE("find_cycle") {
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(3, 3);
  b(0, 1) = 1.0;
  b(1, 2) = 1.0;
  CHECK_FALSE(find_cycle(b, 0.5).has_value());
  b(2, 0) = 1.0;
  auto cycle = find_cycle(b, 0.5);
  REQUIRE(cycle.has_value());
  CHECK(cycle->size() >= 3);
}
