// Copyright 2026 The mixnn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mixnn/columns.hpp"

// R-style model formulas:
//   [resp [+ resp]*] ~ term (+ term)* (+ (slopes|group))*
// "(x|g)" implies a group intercept plus slope x, "(1|g)" is intercept-only,
// "(0 + x|g)" is slope-only. A "0" fixed term removes the global intercept.
// The grammar is documented in docs/formula.md.

namespace mixnn::formula {

enum class TermKind { Intercept, Continuous, Categorical };

struct FixedTerm {
  TermKind kind = TermKind::Continuous;
  std::string name;  // empty for the intercept

  bool operator==(const FixedTerm& o) const {
    // Kind resolution (continuous vs categorical) happens at design-build
    // time, so AST equality compares structure only.
    const bool self_icpt = kind == TermKind::Intercept;
    const bool other_icpt = o.kind == TermKind::Intercept;
    return self_icpt == other_icpt && name == o.name;
  }
};

struct RandomTerm {
  std::vector<std::string> slopes;  // may be empty (intercept only)
  bool include_intercept = true;
  std::string group;

  bool operator==(const RandomTerm&) const = default;
};

struct FormulaAst {
  std::vector<std::string> responses;  // empty allowed (multitask form)
  std::vector<FixedTerm> fixed;
  std::vector<RandomTerm> random;

  bool has_intercept() const;
  bool operator==(const FormulaAst&) const = default;
};

FormulaAst parse_formula(const std::string& text);
std::string print_formula(const FormulaAst& ast);  // canonical form

enum class ColKind { Continuous, Categorical };
using ColumnKinds = std::map<std::string, ColKind>;

// Per-column level vocabulary captured at fit time, so that prediction-time
// designs code levels consistently; unseen levels map to the reserved code
// equal to the training cardinality.
struct FittedLevels {
  std::map<std::string, std::vector<std::string>> levels;
};

struct CatDesign {
  std::string name;
  std::vector<int> codes;  // in [0, cardinality]; cardinality = unknown
  int cardinality = 0;     // training-time level count
  std::vector<std::string> levels;
};

struct REDesign {
  std::string group;
  std::vector<std::string> slope_names;
  bool include_intercept = true;
  std::vector<int> group_index;  // -1 marks an unseen level at predict time
  int n_levels = 0;
  std::vector<std::string> levels;
  std::vector<double> z;  // n x z_cols, row-major; intercept column first
  int z_cols = 0;
};

struct DesignMatrices {
  int n = 0;
  bool intercept = true;
  std::vector<std::string> cont_names;
  std::vector<double> x_cont;  // n x p_cont row-major
  int p_cont = 0;
  std::vector<CatDesign> cats;
  std::vector<REDesign> terms;
};

// Builds design structures from a column table. When `fitted` is given the
// level coding of categorical and grouping columns is reused instead of
// rebuilt; unseen categorical levels get the reserved unknown code and unseen
// group levels get index -1.
DesignMatrices build_design(const FormulaAst& ast, const ColumnTable& data,
                            const ColumnKinds& schema,
                            const FittedLevels* fitted = nullptr);

FittedLevels capture_levels(const DesignMatrices& design);

}  // namespace mixnn::formula
