#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mixnn/tensor.hpp"

using namespace mixnn;
using namespace mixnn::ad;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed, double lo = -1.0,
                               double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("forward op values") {
  Tape t;
  SUBCASE("sigmoid(0) = 0.5") {
    Var x = t.leaf(Shape{1, 1}, std::vector<double>{0.0});
    CHECK(sigmoid(x).scalar() == doctest::Approx(0.5));
  }
  SUBCASE("softmax of constant row is uniform") {
    Var x = t.leaf(Shape{1, 4}, std::vector<double>{0, 0, 0, 0});
    auto v = softmax_rows(x).values();
    for (double p : v) CHECK(p == doctest::Approx(0.25));
  }
  SUBCASE("cholesky of diag(4,9)") {
    Var a = t.leaf(Shape{2, 2}, std::vector<double>{4, 0, 0, 9});
    auto l = cholesky(a).values();
    CHECK(l[0] == doctest::Approx(2.0));
    CHECK(l[1] == doctest::Approx(0.0));
    CHECK(l[2] == doctest::Approx(0.0));
    CHECK(l[3] == doctest::Approx(3.0));
  }
  SUBCASE("cholesky reports the failing leading minor") {
    Var a = t.leaf(Shape{2, 2}, std::vector<double>{1, 2, 2, 1});
    CHECK_THROWS_WITH_AS(cholesky(a),
                         "cholesky: leading minor 2 is not positive definite",
                         NumericalError);
  }
  SUBCASE("dropout scales kept units by 1/(1-p) in train mode") {
    std::mt19937_64 rng(1);
    Var x = t.leaf(Shape{1, 1000}, std::vector<double>(1000, 1.0));
    Var d = dropout(x, 0.25, true, rng);
    int kept = 0;
    for (double v : d.values()) {
      if (v != 0.0) {
        CHECK(v == doctest::Approx(1.0 / 0.75));
        ++kept;
      }
    }
    CHECK(kept > 650);
    CHECK(kept < 850);
  }
  SUBCASE("dropout in eval mode is the identity") {
    std::mt19937_64 rng(1);
    Var x = t.leaf(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
    Var d = dropout(x, 0.5, false, rng);
    CHECK(d.id() == x.id());
  }
  SUBCASE("non-finite forward value raises") {
    Var x = t.leaf(Shape{1, 1}, std::vector<double>{-1.0});
    CHECK_THROWS_AS(log(x), NumericalError);
  }
}

TEST_CASE("simple backward results") {
  SUBCASE("d/dx x^2 at 3 is 6") {
    Tape t;
    Var x = t.leaf(Shape{1, 1}, std::vector<double>{3.0});
    Var y = mul(x, x);
    t.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("grad of sum(A*B) wrt A is row sums of B^T layout") {
    Tape t;
    auto av = random_vec(6, 11);
    auto bv = random_vec(6, 12);
    Var a = t.leaf(Shape{2, 3}, av);
    Var b = t.constant(Shape{3, 2}, bv);
    t.backward(sum(matmul(a, b)));
    // d sum(AB) / dA = ones * B^T
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 3; ++j) {
        double expect = bv[j * 2] + bv[j * 2 + 1];
        CHECK(a.grad()[i * 3 + j] == doctest::Approx(expect));
      }
    }
  }
  SUBCASE("backward requires a scalar root") {
    Tape t;
    Var x = t.leaf(Shape{2, 1}, std::vector<double>{1, 2});
    CHECK_THROWS_AS(t.backward(x), NumericalError);
  }
  SUBCASE("fan-out accumulates additively") {
    Tape t;
    Var x = t.leaf(Shape{1, 1}, std::vector<double>{2.0});
    Var y = add(mul(x, x), x);  // x^2 + x -> 2x + 1 = 5
    t.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(5.0));
  }
}

TEST_CASE("finite differences agree with backward for every op") {
  const double tol = 1e-5;
  auto check = [&](const char* name, Shape s,
                   const std::function<Var(Tape&, Var)>& f, unsigned seed,
                   double lo = -1.0, double hi = 1.0, double tol2 = 1e-5) {
    auto x0 = random_vec(static_cast<std::size_t>(s.size()), seed, lo, hi);
    const double err = finite_diff_check(f, s, x0);
    INFO(name);
    CHECK(err < tol2);
  };

  check("add", Shape{3, 4}, [](Tape& t, Var x) {
    Var c = t.constant(Shape{3, 4}, random_vec(12, 1));
    return sum(mul(add(x, c), add(x, c)));
  }, 2);
  check("sub+mul", Shape{3, 4}, [](Tape& t, Var x) {
    Var c = t.constant(Shape{3, 4}, random_vec(12, 3));
    return mean(mul(sub(x, c), x));
  }, 4);
  check("bias row broadcast", Shape{1, 4}, [](Tape& t, Var x) {
    Var h = t.constant(Shape{5, 4}, random_vec(20, 5));
    return sum(mul(add(h, x), add(h, x)));
  }, 6);
  check("column broadcast", Shape{5, 1}, [](Tape& t, Var x) {
    Var h = t.constant(Shape{5, 4}, random_vec(20, 7));
    return sum(mul(h, x));
  }, 8);
  check("matmul", Shape{3, 4}, [](Tape& t, Var x) {
    Var b = t.constant(Shape{4, 2}, random_vec(8, 9));
    return sum(mul(matmul(x, b), matmul(x, b)));
  }, 10);
  check("transpose", Shape{3, 4}, [](Tape& t, Var x) {
    Var b = t.constant(Shape{3, 2}, random_vec(6, 11));
    return sum(matmul(transpose(x), b));
  }, 12);
  check("exp", Shape{2, 3}, [](Tape&, Var x) { return sum(exp(x)); }, 13);
  check("log", Shape{2, 3}, [](Tape&, Var x) { return sum(log(x)); }, 14, 0.5,
        2.0);
  check("pow", Shape{2, 3}, [](Tape&, Var x) { return sum(pow(x, 3.0)); }, 15);
  check("lgamma", Shape{2, 3}, [](Tape&, Var x) { return sum(lgamma(x)); }, 16,
        0.5, 5.0);
  check("sigmoid", Shape{2, 3}, [](Tape&, Var x) { return sum(sigmoid(x)); },
        17);
  check("tanh", Shape{2, 3}, [](Tape&, Var x) { return sum(tanh(x)); }, 18);
  check("relu away from kink", Shape{2, 3},
        [](Tape&, Var x) { return sum(relu(x)); }, 19, 0.2, 1.0);
  check("gelu", Shape{2, 3}, [](Tape&, Var x) { return sum(gelu(x)); }, 20);
  check("mean", Shape{4, 3}, [](Tape&, Var x) { return mean(mul(x, x)); }, 21);
  check("sum_rows", Shape{4, 3},
        [](Tape&, Var x) { return sum(mul(sum_rows(x), sum_rows(x))); }, 22);
  check("sum_cols", Shape{4, 3},
        [](Tape&, Var x) { return sum(mul(sum_cols(x), sum_cols(x))); }, 23);
  check("softmax", Shape{3, 5}, [](Tape& t, Var x) {
    Var w = t.constant(Shape{3, 5}, random_vec(15, 24));
    return sum(mul(softmax_rows(x), w));
  }, 25);
  check("logsumexp", Shape{3, 5},
        [](Tape&, Var x) { return sum(logsumexp_rows(x)); }, 26);
  check("layer_norm", Shape{3, 5}, [](Tape& t, Var x) {
    Var w = t.constant(Shape{3, 5}, random_vec(15, 27));
    return sum(mul(layer_norm_rows(x), w));
  }, 28);
  check("concat+slice", Shape{3, 4}, [](Tape& t, Var x) {
    Var c = t.constant(Shape{3, 2}, random_vec(6, 29));
    std::vector<Var> parts{x, c};
    Var cc = concat_cols(parts);
    return sum(mul(slice_cols(cc, 1, 5), slice_cols(cc, 0, 4)));
  }, 30);
  check("concat_rows+slice_rows", Shape{2, 3}, [](Tape& t, Var x) {
    Var c = t.constant(Shape{2, 3}, random_vec(6, 31));
    std::vector<Var> parts{c, x};
    Var cc = concat_rows(parts);
    return sum(mul(slice_rows(cc, 1, 3), slice_rows(cc, 0, 2)));
  }, 32);
  check("reshape", Shape{2, 6}, [](Tape& t, Var x) {
    Var b = t.constant(Shape{4, 2}, random_vec(8, 33));
    return sum(matmul(reshape(x, Shape{3, 4}), b));
  }, 34);
  check("gather_rows", Shape{4, 3}, [](Tape& t, Var x) {
    std::vector<int> idx{2, 0, 2, 3, 1};
    Var g = gather_rows(x, idx);
    Var w = t.constant(Shape{5, 3}, random_vec(15, 35));
    return sum(mul(g, w));
  }, 36);
  check("triangular_solve wrt matrix", Shape{4, 4}, [](Tape& t, Var x) {
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 3.0;
    Var tmat = add(x, t.constant(Shape{4, 4}, eye));
    Var b = t.constant(Shape{4, 2}, random_vec(8, 37));
    Var y = triangular_solve(tmat, b, /*lower=*/true);
    return sum(mul(y, y));
  }, 38);
  check("triangular_solve wrt rhs", Shape{4, 2}, [](Tape& t, Var x) {
    auto lv = random_vec(16, 39);
    for (int i = 0; i < 4; ++i) {
      lv[i * 4 + i] = 2.5;
      for (int j = i + 1; j < 4; ++j) lv[i * 4 + j] = 0.0;
    }
    Var l = t.constant(Shape{4, 4}, lv);
    Var y = triangular_solve(l, x, /*lower=*/true);
    return sum(mul(y, y));
  }, 40);
  check("triangular_solve upper unit diag", Shape{3, 3}, [](Tape& t, Var x) {
    Var b = t.constant(Shape{3, 2}, random_vec(6, 41));
    Var y = triangular_solve(x, b, /*lower=*/false, /*unit_diag=*/true);
    return sum(mul(y, y));
  }, 42);
  check("cholesky", Shape{3, 3}, [](Tape& t, Var x) {
    std::vector<double> eye(9, 0.0);
    for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 4.0;
    Var spd = add(matmul(x, transpose(x)), t.constant(Shape{3, 3}, eye));
    return sum(cholesky(spd));
  }, 43);
  check("l1_norm away from zero", Shape{2, 3},
        [](Tape&, Var x) { return l1_norm(x); }, 44, 0.3, 1.5);
  check("matexp composite", Shape{3, 3}, [](Tape&, Var x) {
    return trace(matexp(mul(x, x)));
  }, 45);
  check("spectral norm composite", Shape{4, 4}, [](Tape&, Var x) {
    return spectral_norm_sq(x);
  }, 46, -1.0, 1.0, 1e-4);
  (void)tol;
}

TEST_CASE("finite_diff_check contract") {
  SUBCASE("sum(exp(x)) well below 1e-6") {
    auto x0 = random_vec(6, 50);
    double err = finite_diff_check(
        [](Tape&, Var x) { return sum(exp(x)); }, Shape{2, 3}, x0);
    CHECK(err < 1e-6);
  }
  SUBCASE("constant function has zero error") {
    auto x0 = random_vec(4, 51);
    double err = finite_diff_check(
        [](Tape& t, Var x) {
          (void)x;
          return t.scalar_const(3.5);
        },
        Shape{2, 2}, x0);
    CHECK(err == 0.0);
  }
  // ReLU at its kink is excluded by contract: checks run at offset points.
  SUBCASE("relu at offset points passes") {
    std::vector<double> x0{0.5, -0.5, 1.0, -1.0};
    double err = finite_diff_check(
        [](Tape&, Var x) { return sum(relu(x)); }, Shape{2, 2}, x0);
    CHECK(err < 1e-8);
  }
}

TEST_CASE("backward is linear in the objective") {
  auto x0 = random_vec(6, 60, 0.5, 1.5);
  const double a = 1.7, b = -2.3;
  auto gf = [&](double ca, double cb) {
    Tape t;
    Var x = t.leaf(Shape{2, 3}, x0);
    Var f = sum(mul(x, x));
    Var g = sum(exp(x));
    t.backward(add(scale(f, ca), scale(g, cb)));
    return x.grad();
  };
  auto gab = gf(a, b);
  auto gfa = gf(1, 0);
  auto ggb = gf(0, 1);
  for (std::size_t i = 0; i < gab.size(); ++i) {
    CHECK(gab[i] == doctest::Approx(a * gfa[i] + b * ggb[i]).epsilon(1e-12));
  }
}

TEST_CASE("algebraic invariants") {
  SUBCASE("softmax rows sum to one") {
    Tape t;
    Var x = t.leaf(Shape{4, 6}, random_vec(24, 70, -3, 3));
    auto v = softmax_rows(x).values();
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < 6; ++j) s += v[i * 6 + j];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  SUBCASE("logsumexp dominates the row max") {
    Tape t;
    auto xv = random_vec(24, 71, -3, 3);
    Var x = t.leaf(Shape{4, 6}, xv);
    auto v = logsumexp_rows(x).values();
    for (int i = 0; i < 4; ++i) {
      double mx = xv[i * 6];
      for (int j = 1; j < 6; ++j) mx = std::max(mx, xv[i * 6 + j]);
      CHECK(v[i] >= mx);
    }
  }
  SUBCASE("triangular_solve(L, L y) recovers y") {
    Tape t;
    auto lv = random_vec(25, 72);
    for (int i = 0; i < 5; ++i) {
      lv[i * 5 + i] = 2.0 + 0.1 * i;
      for (int j = i + 1; j < 5; ++j) lv[i * 5 + j] = 0.0;
    }
    auto yv = random_vec(15, 73);
    Var l = t.constant(Shape{5, 5}, lv);
    Var y = t.constant(Shape{5, 3}, yv);
    Var b = matmul(l, y);
    auto sol = triangular_solve(l, b, true).values();
    for (std::size_t i = 0; i < sol.size(); ++i) {
      CHECK(std::abs(sol[i] - yv[i]) < 1e-10);
    }
  }
}
