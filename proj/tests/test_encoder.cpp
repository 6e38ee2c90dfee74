#include <doctest.h>

#include <cmath>
#include <random>

#include "mixnn/encoder.hpp"

using namespace mixnn;
using namespace mixnn::enc;
using namespace mixnn::ad;

TEST_CASE("center_rows") {
  Tape t;
  SUBCASE("two-level example") {
    Var mu = t.constant(Shape{2, 1}, std::vector<double>{1.0, 3.0});
    auto c = center_rows(mu).values();
    CHECK(c[0] == doctest::Approx(-1.0));
    CHECK(c[1] == doctest::Approx(1.0));
  }
  SUBCASE("already centered is unchanged") {
    Var mu = t.constant(Shape{2, 2}, std::vector<double>{1, -2, -1, 2});
    auto c = center_rows(mu).values();
    CHECK(c[0] == doctest::Approx(1.0));
    CHECK(c[3] == doctest::Approx(2.0));
  }
  SUBCASE("shift invariance") {
    std::vector<double> base{0.3, -0.7, 1.1, -0.7};
    Var mu = t.constant(Shape{4, 1}, std::vector<double>(base));
    auto c0 = center_rows(mu).values();
    std::vector<double> shifted = base;
    for (auto& v : shifted) v += 5.5;
    Var mu2 = t.constant(Shape{4, 1}, std::move(shifted));
    auto c1 = center_rows(mu2).values();
    for (int i = 0; i < 4; ++i) CHECK(c0[i] == doctest::Approx(c1[i]));
  }
}

TEST_CASE("sample_table") {
  SUBCASE("eval mode returns the means exactly") {
    Tape t;
    std::mt19937_64 rng(1);
    Var mu = t.constant(Shape{3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
    Var lv = t.constant(Shape{3, 2}, std::vector<double>(6, std::log(0.01)));
    Var v = sample_table(t, mu, lv, Var(), /*train=*/false, rng);
    for (int i = 0; i < 6; ++i)
      CHECK(v.values()[i] == doctest::Approx(mu.values()[i]));
  }
  SUBCASE("train-mode draws have the right moments") {
    std::mt19937_64 rng(7);
    const int draws = 100000;
    double s1 = 0, s2 = 0;
    for (int d = 0; d < draws; ++d) {
      Tape t;
      Var mu = t.constant(Shape{1, 1}, std::vector<double>{0.0});
      Var lv = t.constant(Shape{1, 1}, std::vector<double>{0.0});  // sigma = 1
      Var v = sample_table(t, mu, lv, Var(), /*train=*/true, rng);
      s1 += v.values()[0];
      s2 += v.values()[0] * v.values()[0];
    }
    const double mean = s1 / draws;
    const double var = s2 / draws - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.02);
  }
  SUBCASE("correlating transform is applied across levels") {
    Tape t;
    std::mt19937_64 rng(2);
    Var mu = t.constant(Shape{2, 1}, std::vector<double>{1.0, 0.0});
    Var lv = t.constant(Shape{2, 1}, std::vector<double>(2, std::log(0.01)));
    // L = [[1,0],[0.5,1]] mixes level 0 into level 1.
    Var chol = t.constant(Shape{2, 2}, std::vector<double>{1, 0, 0.5, 1});
    Var v = sample_table(t, mu, lv, chol, /*train=*/false, rng);
    CHECK(v.values()[0] == doctest::Approx(1.0));
    CHECK(v.values()[1] == doctest::Approx(0.5));
  }
}

TEST_CASE("gather_with_unknown") {
  Tape t;
  Var table = t.constant(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  SUBCASE("zero strategy maps unseen levels to the zero vector") {
    std::vector<int> idx{1, -1, 0};
    auto rows = gather_with_unknown(table, idx, Var()).values();
    CHECK(rows[0] == doctest::Approx(4.0));
    CHECK(rows[3] == doctest::Approx(0.0));
    CHECK(rows[4] == doctest::Approx(0.0));
    CHECK(rows[6] == doctest::Approx(1.0));
  }
  SUBCASE("learned strategy uses the stored row") {
    Var unknown = t.constant(Shape{1, 3}, std::vector<double>{0.3, 0.2, 0.1});
    std::vector<int> idx{-1};
    auto rows = gather_with_unknown(table, idx, unknown).values();
    CHECK(rows[0] == doctest::Approx(0.3));
    CHECK(rows[2] == doctest::Approx(0.1));
  }
  SUBCASE("no unknowns avoids the extension") {
    std::vector<int> idx{0, 1};
    auto rows = gather_with_unknown(table, idx, Var()).values();
    CHECK(rows[0] == doctest::Approx(1.0));
    CHECK(rows[5] == doctest::Approx(6.0));
  }
}

TEST_CASE("combine") {
  Tape t;
  Var h = t.constant(Shape{2, 2}, std::vector<double>{1, 1, 2, 2});
  SUBCASE("zero effects leave the fixed part") {
    Var z = t.constant(Shape{2, 1}, std::vector<double>{1, 1});
    Var u = t.constant(Shape{2, 2}, std::vector<double>(4, 0.0));
    std::vector<Var> zs{z}, us{u};
    auto out = combine(h, zs, us).values();
    for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(h.values()[i]));
  }
  SUBCASE("intercept term adds the gathered rows") {
    Var z = t.constant(Shape{2, 1}, std::vector<double>{1, 1});
    Var u = t.constant(Shape{2, 2}, std::vector<double>{0.5, -0.5, 1.0, 2.0});
    std::vector<Var> zs{z}, us{u};
    auto out = combine(h, zs, us).values();
    CHECK(out[0] == doctest::Approx(1.5));
    CHECK(out[1] == doctest::Approx(0.5));
    CHECK(out[2] == doctest::Approx(3.0));
    CHECK(out[3] == doctest::Approx(4.0));
  }
  SUBCASE("scalar slope broadcasts across the embedding") {
    Var z = t.constant(Shape{1, 1}, std::vector<double>{2.0});
    Var u = t.constant(Shape{1, 3}, std::vector<double>{0.1, 0.2, 0.3});
    Var h1 = t.constant(Shape{1, 3}, std::vector<double>(3, 0.0));
    std::vector<Var> zs{z}, us{u};
    auto out = combine(h1, zs, us).values();
    CHECK(out[0] == doctest::Approx(0.2));
    CHECK(out[1] == doctest::Approx(0.4));
    CHECK(out[2] == doctest::Approx(0.6));
  }
}

TEST_CASE("categorical embedding widths") {
  EncoderConfig cfg;
  CHECK(cat_embed_dim(cfg, "a", 2) == 1);
  CHECK(cat_embed_dim(cfg, "a", 7) == 4);
  CHECK(cat_embed_dim(cfg, "a", 100) == 16);
  cfg.cat_embed_dims["a"] = 5;
  CHECK(cat_embed_dim(cfg, "a", 100) == 5);
}
