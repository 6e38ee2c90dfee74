#include <doctest.h>

#include <random>

#include "mixnn/formula.hpp"

using namespace mixnn;
using namespace mixnn::formula;

namespace {

ColumnTable toy_table() {
  ColumnTable t;
  t.add_numeric("y", {1.0, 2.0, 3.0});
  t.add_numeric("x1", {0.1, 0.2, 0.3});
  t.add_numeric("x2", {1.0, 0.0, 1.0});
  t.add_numeric("t", {1.0, 2.0, 3.0});
  t.add_categorical("g", {0, 1, 0}, {"a", "b"});
  return t;
}

}  // namespace

TEST_CASE("parse_formula grammar") {
  SUBCASE("fixed terms plus random intercept") {
    auto ast = parse_formula("y ~ x1 + x2 + (1|group_id)");
    CHECK(ast.responses == std::vector<std::string>{"y"});
    REQUIRE(ast.fixed.size() == 3);  // x1, x2, intercept
    CHECK(ast.fixed[0].name == "x1");
    CHECK(ast.fixed[1].name == "x2");
    CHECK(ast.has_intercept());
    REQUIRE(ast.random.size() == 1);
    CHECK(ast.random[0].group == "group_id");
    CHECK(ast.random[0].include_intercept);
    CHECK(ast.random[0].slopes.empty());
  }
  SUBCASE("intercept only") {
    auto ast = parse_formula("y ~ 1");
    CHECK(ast.responses == std::vector<std::string>{"y"});
    REQUIRE(ast.fixed.size() == 1);
    CHECK(ast.fixed[0].kind == TermKind::Intercept);
    CHECK(ast.random.empty());
  }
  SUBCASE("random slope with implicit intercept") {
    auto ast = parse_formula("Reaction ~ Days + (Days|Subject)");
    REQUIRE(ast.random.size() == 1);
    CHECK(ast.random[0].include_intercept);
    CHECK(ast.random[0].slopes == std::vector<std::string>{"Days"});
    CHECK(ast.random[0].group == "Subject");
  }
  SUBCASE("multitask form with empty response list") {
    auto ast = parse_formula("~ x1 + x2 + (1|subject_id)");
    CHECK(ast.responses.empty());
    CHECK(ast.random.size() == 1);
  }
  SUBCASE("slope-only random term") {
    auto ast = parse_formula("y ~ (0 + t|g)");
    REQUIRE(ast.random.size() == 1);
    CHECK_FALSE(ast.random[0].include_intercept);
    CHECK(ast.random[0].slopes == std::vector<std::string>{"t"});
  }
  SUBCASE("(x|g) and (1 + x|g) are the same AST") {
    CHECK(parse_formula("y ~ (t|g)") == parse_formula("y ~ (1 + t|g)"));
  }
  SUBCASE("zero removes the intercept") {
    auto ast = parse_formula("y ~ 0 + x1");
    CHECK_FALSE(ast.has_intercept());
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(parse_formula("y x1"), DataError);        // missing ~
    CHECK_THROWS_AS(parse_formula("y ~ (x1|g"), DataError);   // unbalanced
    CHECK_THROWS_AS(parse_formula("y ~ (|g)"), DataError);    // empty slopes
    CHECK_THROWS_AS(parse_formula("y ~ x1 + x1"), DataError); // duplicate
    CHECK_THROWS_AS(parse_formula(""), DataError);
    CHECK_THROWS_AS(parse_formula("y ~ (t|a + b)"), DataError);
  }
}

TEST_CASE("printer round trip") {
  const char* cases[] = {
      "y ~ x1 + x2 + (1|g)",
      "y ~ 1",
      "Reaction ~ Days + (Days|Subject)",
      "~ x1 + x2 + (1|subject_id)",
      "y ~ 0 + x1 + (0 + t|g)",
      "y1 + y2 ~ x1 + (t|g) + (1|h)",
  };
  for (const char* text : cases) {
    auto ast = parse_formula(text);
    CAPTURE(text);
    CHECK(parse_formula(print_formula(ast)) == ast);
  }
}

TEST_CASE("build_design") {
  auto table = toy_table();
  ColumnKinds schema;

  SUBCASE("group index coding follows first occurrence") {
    auto ast = parse_formula("y ~ (1|g)");
    auto d = build_design(ast, table, schema);
    REQUIRE(d.terms.size() == 1);
    CHECK(d.terms[0].group_index == std::vector<int>{0, 1, 0});
    CHECK(d.terms[0].n_levels == 2);
  }
  SUBCASE("intercept + slope z layout") {
    auto ast = parse_formula("y ~ (t|g)");
    auto d = build_design(ast, table, schema);
    REQUIRE(d.terms.size() == 1);
    CHECK(d.terms[0].z_cols == 2);
    // column 0 = intercept ones, column 1 = t
    CHECK(d.terms[0].z[0] == 1.0);
    CHECK(d.terms[0].z[1] == 1.0);
    CHECK(d.terms[0].z[2] == 1.0);
    CHECK(d.terms[0].z[3] == 2.0);
    CHECK(d.terms[0].z[4] == 1.0);
    CHECK(d.terms[0].z[5] == 3.0);
  }
  SUBCASE("missing column names the column") {
    auto ast = parse_formula("y ~ x9");
    CHECK_THROWS_WITH_AS(build_design(ast, table, schema),
                         "formula references missing column 'x9'", DataError);
  }
  SUBCASE("categorical fixed effect coded with schema") {
    schema["g"] = ColKind::Categorical;
    auto ast = parse_formula("y ~ x1 + g");
    auto d = build_design(ast, table, schema);
    REQUIRE(d.cats.size() == 1);
    CHECK(d.cats[0].cardinality == 2);
    CHECK(d.cats[0].codes == std::vector<int>{0, 1, 0});
  }
  SUBCASE("NaN in grouping column is rejected") {
    ColumnTable t2 = table;
    t2.add_numeric("gn", {1.0, std::nan(""), 2.0});
    auto ast = parse_formula("y ~ (1|gn)");
    CHECK_THROWS_AS(build_design(ast, t2, schema), DataError);
  }
  SUBCASE("non-numeric slope is rejected") {
    auto ast = parse_formula("y ~ (g|g)");
    CHECK_THROWS_AS(build_design(ast, table, schema), DataError);
  }
  SUBCASE("fitted levels map unseen group levels to -1") {
    auto ast = parse_formula("y ~ (1|g)");
    auto d = build_design(ast, table, schema);
    auto fitted = capture_levels(d);

    ColumnTable fresh;
    fresh.add_numeric("y", {1.0, 1.0});
    fresh.add_numeric("t", {1.0, 1.0});
    fresh.add_numeric("x1", {0.0, 0.0});
    fresh.add_numeric("x2", {0.0, 0.0});
    fresh.add_categorical("g", {0, 1}, {"b", "zzz"});
    auto d2 = build_design(ast, fresh, schema, &fitted);
    CHECK(d2.terms[0].group_index == std::vector<int>{1, -1});
  }
  SUBCASE("unseen categorical level maps to the reserved code") {
    schema["g"] = ColKind::Categorical;
    auto ast = parse_formula("y ~ g");
    auto d = build_design(ast, table, schema);
    auto fitted = capture_levels(d);
    ColumnTable fresh;
    fresh.add_numeric("y", {1.0});
    fresh.add_categorical("g", {0}, {"new_level"});
    auto d2 = build_design(ast, fresh, schema, &fitted);
    CHECK(d2.cats[0].codes == std::vector<int>{2});  // cardinality = unknown
  }
}

TEST_CASE("row permutation permutes designs identically") {
  auto table = toy_table();
  ColumnKinds schema;
  auto ast = parse_formula("y ~ x1 + (t|g)");
  auto d = build_design(ast, table, schema);
  auto fitted = capture_levels(d);

  std::vector<int> perm{2, 0, 1};
  auto permuted = table.select_rows(perm);
  auto dp = build_design(ast, permuted, schema, &fitted);
  for (int i = 0; i < 3; ++i) {
    CHECK(dp.x_cont[i] == d.x_cont[perm[i]]);
    CHECK(dp.terms[0].group_index[i] == d.terms[0].group_index[perm[i]]);
    for (int c = 0; c < 2; ++c) {
      CHECK(dp.terms[0].z[i * 2 + c] == d.terms[0].z[perm[i] * 2 + c]);
    }
  }
}
