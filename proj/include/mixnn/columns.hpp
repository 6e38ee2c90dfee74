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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mixnn/common.hpp"

namespace mixnn {

// Column-oriented dataset. Numeric columns hold doubles (NaN = missing);
// categorical columns hold dense integer codes with a level map
// (code -1 = missing).
struct Column {
  enum class Kind { Numeric, Categorical };
  Kind kind = Kind::Numeric;
  std::vector<double> num;
  std::vector<int> codes;
  std::vector<std::string> levels;  // code -> label, first-occurrence order

  std::size_t size() const {
    return kind == Kind::Numeric ? num.size() : codes.size();
  }
};

struct ColumnTable {
  std::vector<std::string> names;  // column order as loaded/declared
  std::map<std::string, Column> cols;
  std::size_t n_rows = 0;

  bool has(const std::string& name) const { return cols.count(name) > 0; }
  const Column& at(const std::string& name) const;
  Column& at(const std::string& name);
  void add_numeric(const std::string& name, std::vector<double> v);
  void add_categorical(const std::string& name, std::vector<int> codes,
                       std::vector<std::string> levels);
  ColumnTable select_rows(const std::vector<int>& rows) const;
};

struct LoadOptions {
  std::set<std::string> categorical;  // columns to level-code
  std::set<std::string> targets;      // rows missing any of these are dropped
  bool impute_mean = false;           // fill missing features by column mean
};

struct LoadReport {
  std::size_t rows_read = 0;
  std::size_t rows_dropped_missing_target = 0;
  std::size_t cells_imputed = 0;
};

// RFC-4180 CSV with a header row. Throws DataError on ragged rows (with the
// line number), unparseable numerics, or missing features when imputation is
// off.
ColumnTable load_csv(const std::string& path, const LoadOptions& opts,
                     LoadReport* report = nullptr);

// Parses CSV content from a string (same contract as load_csv).
ColumnTable parse_csv(const std::string& content, const LoadOptions& opts,
                      LoadReport* report = nullptr);

void write_csv(const std::string& path, const ColumnTable& table);
std::string format_csv(const ColumnTable& table);

}  // namespace mixnn
