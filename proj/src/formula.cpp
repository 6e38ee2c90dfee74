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

#include "mixnn/formula.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

namespace mixnn::formula {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  if (!(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_'))
    return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'))
      return false;
  }
  return true;
}

// Splits on '+' at paren depth zero.
std::vector<std::string> split_terms(const std::string& s) {
  std::vector<std::string> out;
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '(') ++depth;
    if (c == ')') --depth;
    if (depth < 0) throw DataError("formula: unbalanced parentheses");
    if (c == '+' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (depth != 0) throw DataError("formula: unbalanced parentheses");
  out.push_back(trim(cur));
  return out;
}

RandomTerm parse_random(const std::string& inner) {
  const auto bar = inner.find('|');
  if (bar == std::string::npos) {
    throw DataError("formula: random term '(" + inner + ")' lacks '|'");
  }
  RandomTerm term;
  term.group = trim(inner.substr(bar + 1));
  if (!valid_name(term.group)) {
    throw DataError("formula: random term grouping '" + term.group +
                    "' must be a single column name");
  }
  const std::string lhs = trim(inner.substr(0, bar));
  if (lhs.empty()) {
    throw DataError("formula: empty slope specification '(|" + term.group +
                    ")'");
  }
  for (const std::string& part : split_terms(lhs)) {
    if (part == "1") {
      term.include_intercept = true;
    } else if (part == "0") {
      term.include_intercept = false;
    } else if (valid_name(part)) {
      term.slopes.push_back(part);
    } else {
      throw DataError("formula: bad slope term '" + part + "'");
    }
  }
  return term;
}

}  // namespace

bool FormulaAst::has_intercept() const {
  for (const auto& t : fixed) {
    if (t.kind == TermKind::Intercept) return true;
  }
  return false;
}

FormulaAst parse_formula(const std::string& text) {
  if (trim(text).empty()) throw DataError("formula: empty string");
  const auto tilde = text.find('~');
  if (tilde == std::string::npos) throw DataError("formula: missing '~'");
  if (text.find('~', tilde + 1) != std::string::npos) {
    throw DataError("formula: more than one '~'");
  }

  FormulaAst ast;
  const std::string lhs = trim(text.substr(0, tilde));
  if (!lhs.empty()) {
    for (const std::string& r : split_terms(lhs)) {
      if (!valid_name(r)) throw DataError("formula: bad response '" + r + "'");
      ast.responses.push_back(r);
    }
  }

  bool intercept = true;
  const std::string rhs = trim(text.substr(tilde + 1));
  if (rhs.empty()) throw DataError("formula: empty right-hand side");
  for (const std::string& term : split_terms(rhs)) {
    if (term.empty()) throw DataError("formula: empty term");
    if (term.front() == '(') {
      if (term.back() != ')') throw DataError("formula: unbalanced parentheses");
      ast.random.push_back(parse_random(term.substr(1, term.size() - 2)));
    } else if (term == "1") {
      intercept = true;
    } else if (term == "0") {
      intercept = false;
    } else if (valid_name(term)) {
      FixedTerm f;
      f.name = term;
      for (const auto& existing : ast.fixed) {
        if (existing.name == term) {
          throw DataError("formula: duplicate fixed term '" + term + "'");
        }
      }
      ast.fixed.push_back(f);
    } else {
      throw DataError("formula: bad term '" + term + "'");
    }
  }
  if (intercept) {
    FixedTerm icpt;
    icpt.kind = TermKind::Intercept;
    ast.fixed.push_back(icpt);
  }
  return ast;
}

std::string print_formula(const FormulaAst& ast) {
  std::ostringstream out;
  for (std::size_t i = 0; i < ast.responses.size(); ++i) {
    if (i) out << " + ";
    out << ast.responses[i];
  }
  if (!ast.responses.empty()) out << ' ';
  out << "~ ";

  std::vector<std::string> terms;
  if (!ast.has_intercept()) terms.push_back("0");
  for (const auto& f : ast.fixed) {
    if (f.kind != TermKind::Intercept) terms.push_back(f.name);
  }
  if (terms.empty()) terms.push_back("1");
  for (const auto& r : ast.random) {
    std::ostringstream t;
    t << '(';
    if (r.slopes.empty()) {
      t << '1';
    } else {
      if (!r.include_intercept) t << "0 + ";
      for (std::size_t i = 0; i < r.slopes.size(); ++i) {
        if (i) t << " + ";
        t << r.slopes[i];
      }
    }
    t << '|' << r.group << ')';
    terms.push_back(t.str());
  }
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (i) out << " + ";
    out << terms[i];
  }
  return out.str();
}

namespace {

constexpr int kMaxLevels = 1 << 16;

// Returns string labels for a column usable as grouping/categorical input.
std::vector<std::string> row_labels(const Column& col, const std::string& name,
                                    std::size_t n) {
  std::vector<std::string> out(n);
  if (col.kind == Column::Kind::Categorical) {
    for (std::size_t i = 0; i < n; ++i) {
      if (col.codes[i] < 0) {
        throw DataError("column '" + name + "': missing value in row " +
                        std::to_string(i));
      }
      out[i] = col.levels[col.codes[i]];
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = col.num[i];
      if (std::isnan(v)) {
        throw DataError("column '" + name + "': NaN in row " +
                        std::to_string(i));
      }
      std::ostringstream ss;
      ss.precision(15);
      ss << v;
      out[i] = ss.str();
    }
  }
  return out;
}

void code_levels(const std::vector<std::string>& labels,
                 const std::vector<std::string>* fitted,
                 std::vector<int>& codes, std::vector<std::string>& levels,
                 bool reserve_unknown, const std::string& name) {
  std::map<std::string, int> level_of;
  if (fitted) {
    levels = *fitted;
    for (std::size_t i = 0; i < levels.size(); ++i)
      level_of[levels[i]] = static_cast<int>(i);
  }
  codes.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = level_of.find(labels[i]);
    if (it == level_of.end()) {
      if (fitted) {
        // Unseen level: reserved unknown code (or -1 for group indices).
        codes[i] = reserve_unknown ? static_cast<int>(fitted->size()) : -1;
        continue;
      }
      it = level_of.emplace(labels[i], static_cast<int>(levels.size())).first;
      levels.push_back(labels[i]);
      if (static_cast<int>(levels.size()) > kMaxLevels) {
        throw DataError("column '" + name + "' exceeds " +
                        std::to_string(kMaxLevels) + " levels");
      }
    }
    if (it != level_of.end()) codes[i] = it->second;
  }
}

}  // namespace

DesignMatrices build_design(const FormulaAst& ast, const ColumnTable& data,
                            const ColumnKinds& schema,
                            const FittedLevels* fitted) {
  DesignMatrices d;
  d.n = static_cast<int>(data.n_rows);
  d.intercept = ast.has_intercept();

  auto kind_of = [&](const std::string& name) {
    auto it = schema.find(name);
    return it == schema.end() ? ColKind::Continuous : it->second;
  };

  for (const auto& f : ast.fixed) {
    if (f.kind == TermKind::Intercept) continue;
    if (!data.has(f.name)) {
      throw DataError("formula references missing column '" + f.name + "'");
    }
    const Column& col = data.at(f.name);
    if (kind_of(f.name) == ColKind::Categorical) {
      CatDesign cat;
      cat.name = f.name;
      auto labels = row_labels(col, f.name, data.n_rows);
      const std::vector<std::string>* fl = nullptr;
      if (fitted) {
        auto it = fitted->levels.find(f.name);
        if (it != fitted->levels.end()) fl = &it->second;
      }
      code_levels(labels, fl, cat.codes, cat.levels, /*reserve_unknown=*/true,
                  f.name);
      cat.cardinality = static_cast<int>(cat.levels.size());
      d.cats.push_back(std::move(cat));
    } else {
      if (col.kind != Column::Kind::Numeric) {
        throw DataError("column '" + f.name +
                        "' is categorical but used as continuous");
      }
      d.cont_names.push_back(f.name);
    }
  }
  d.p_cont = static_cast<int>(d.cont_names.size());
  d.x_cont.resize(static_cast<std::size_t>(d.n) * d.p_cont);
  for (int j = 0; j < d.p_cont; ++j) {
    const auto& v = data.at(d.cont_names[j]).num;
    for (int i = 0; i < d.n; ++i) {
      if (std::isnan(v[i])) {
        throw DataError("column '" + d.cont_names[j] + "': NaN in row " +
                        std::to_string(i));
      }
      d.x_cont[static_cast<std::size_t>(i) * d.p_cont + j] = v[i];
    }
  }

  for (const auto& r : ast.random) {
    if (!data.has(r.group)) {
      throw DataError("formula references missing column '" + r.group + "'");
    }
    REDesign term;
    term.group = r.group;
    term.include_intercept = r.include_intercept;
    term.slope_names = r.slopes;

    auto labels = row_labels(data.at(r.group), r.group, data.n_rows);
    const std::vector<std::string>* fl = nullptr;
    if (fitted) {
      auto it = fitted->levels.find(r.group);
      if (it != fitted->levels.end()) fl = &it->second;
    }
    code_levels(labels, fl, term.group_index, term.levels,
                /*reserve_unknown=*/false, r.group);
    term.n_levels = static_cast<int>(term.levels.size());

    term.z_cols = (r.include_intercept ? 1 : 0) + static_cast<int>(r.slopes.size());
    if (term.z_cols == 0) {
      throw DataError("random term for '" + r.group +
                      "' has neither intercept nor slopes");
    }
    term.z.assign(static_cast<std::size_t>(d.n) * term.z_cols, 0.0);
    int col_idx = 0;
    if (r.include_intercept) {
      for (int i = 0; i < d.n; ++i)
        term.z[static_cast<std::size_t>(i) * term.z_cols] = 1.0;
      ++col_idx;
    }
    for (const auto& s : r.slopes) {
      if (!data.has(s)) {
        throw DataError("formula references missing column '" + s + "'");
      }
      const Column& sc = data.at(s);
      if (sc.kind != Column::Kind::Numeric) {
        throw DataError("slope column '" + s + "' must be numeric");
      }
      for (int i = 0; i < d.n; ++i) {
        if (std::isnan(sc.num[i])) {
          throw DataError("column '" + s + "': NaN in row " + std::to_string(i));
        }
        term.z[static_cast<std::size_t>(i) * term.z_cols + col_idx] = sc.num[i];
      }
      ++col_idx;
    }
    d.terms.push_back(std::move(term));
  }
  return d;
}

FittedLevels capture_levels(const DesignMatrices& design) {
  FittedLevels out;
  for (const auto& c : design.cats) out.levels[c.name] = c.levels;
  for (const auto& t : design.terms) out.levels[t.group] = t.levels;
  return out;
}

}  // namespace mixnn::formula
