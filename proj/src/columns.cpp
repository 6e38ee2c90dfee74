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

#include "mixnn/columns.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace mixnn {

const Column& ColumnTable::at(const std::string& name) const {
  auto it = cols.find(name);
  if (it == cols.end()) throw DataError("column '" + name + "' not found");
  return it->second;
}

Column& ColumnTable::at(const std::string& name) {
  auto it = cols.find(name);
  if (it == cols.end()) throw DataError("column '" + name + "' not found");
  return it->second;
}

void ColumnTable::add_numeric(const std::string& name, std::vector<double> v) {
  if (!cols.count(name)) names.push_back(name);
  Column c;
  c.kind = Column::Kind::Numeric;
  c.num = std::move(v);
  n_rows = c.num.size();
  cols[name] = std::move(c);
}

void ColumnTable::add_categorical(const std::string& name,
                                  std::vector<int> codes,
                                  std::vector<std::string> levels) {
  if (!cols.count(name)) names.push_back(name);
  Column c;
  c.kind = Column::Kind::Categorical;
  c.codes = std::move(codes);
  c.levels = std::move(levels);
  n_rows = c.codes.size();
  cols[name] = std::move(c);
}

ColumnTable ColumnTable::select_rows(const std::vector<int>& rows) const {
  ColumnTable out;
  out.names = names;
  out.n_rows = rows.size();
  for (const auto& [name, col] : cols) {
    Column c;
    c.kind = col.kind;
    c.levels = col.levels;
    if (col.kind == Column::Kind::Numeric) {
      c.num.reserve(rows.size());
      for (int r : rows) c.num.push_back(col.num[r]);
    } else {
      c.codes.reserve(rows.size());
      for (int r : rows) c.codes.push_back(col.codes[r]);
    }
    out.cols[name] = std::move(c);
  }
  return out;
}

namespace {

// One CSV record, honoring quoted fields. Returns false at end of input.
bool next_record(const std::string& s, std::size_t& pos, std::size_t& line,
                 std::vector<std::string>& fields) {
  fields.clear();
  if (pos >= s.size()) return false;
  std::string field;
  bool quoted = false;
  bool any = false;
  while (pos <= s.size()) {
    if (pos == s.size()) {
      fields.push_back(field);
      ++pos;
      return true;
    }
    const char c = s[pos];
    if (quoted) {
      if (c == '"') {
        if (pos + 1 < s.size() && s[pos + 1] == '"') {
          field.push_back('"');
          pos += 2;
        } else {
          quoted = false;
          ++pos;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
        ++pos;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty()) {
          throw DataError("CSV line " + std::to_string(line) +
                          ": stray quote inside unquoted field");
        }
        quoted = true;
        ++pos;
        any = true;
        break;
      case ',':
        fields.push_back(field);
        field.clear();
        ++pos;
        any = true;
        break;
      case '\r':
        ++pos;
        break;
      case '\n':
        fields.push_back(field);
        ++pos;
        ++line;
        return true;
      default:
        field.push_back(c);
        ++pos;
        any = true;
        break;
    }
  }
  return any;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

}  // namespace

ColumnTable parse_csv(const std::string& content, const LoadOptions& opts,
                      LoadReport* report) {
  std::size_t pos = 0, line = 1;
  std::vector<std::string> header;
  if (!next_record(content, pos, line, header) || header.empty()) {
    throw DataError("CSV: missing header row");
  }
  const std::size_t ncol = header.size();

  // Raw cells first; nulls tracked as empty strings.
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> rec;
  std::size_t record_line = line;
  while (next_record(content, pos, line, rec)) {
    if (rec.size() == 1 && rec[0].empty()) continue;  // trailing blank line
    if (rec.size() != ncol) {
      throw DataError("CSV line " + std::to_string(record_line) + ": expected " +
                      std::to_string(ncol) + " fields, got " +
                      std::to_string(rec.size()));
    }
    rows.push_back(rec);
    record_line = line;
  }

  LoadReport rep;
  rep.rows_read = rows.size();

  std::vector<int> header_index(ncol);
  for (std::size_t j = 0; j < ncol; ++j) header_index[j] = static_cast<int>(j);

  // Drop rows with a missing target cell.
  std::vector<bool> keep(rows.size(), true);
  for (std::size_t j = 0; j < ncol; ++j) {
    if (!opts.targets.count(header[j])) continue;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i][j].empty()) keep[i] = false;
    }
  }
  std::vector<std::vector<std::string>> kept;
  kept.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (keep[i]) kept.push_back(std::move(rows[i]));
  }
  rep.rows_dropped_missing_target = rep.rows_read - kept.size();

  ColumnTable table;
  table.n_rows = kept.size();
  for (std::size_t j = 0; j < ncol; ++j) {
    const std::string& name = header[j];
    if (opts.categorical.count(name)) {
      std::vector<int> codes(kept.size(), -1);
      std::vector<std::string> levels;
      std::map<std::string, int> level_of;
      for (std::size_t i = 0; i < kept.size(); ++i) {
        const std::string& cell = kept[i][j];
        if (cell.empty()) continue;
        auto it = level_of.find(cell);
        if (it == level_of.end()) {
          it = level_of.emplace(cell, static_cast<int>(levels.size())).first;
          levels.push_back(cell);
        }
        codes[i] = it->second;
      }
      table.add_categorical(name, std::move(codes), std::move(levels));
    } else {
      std::vector<double> v(kept.size());
      double mean_acc = 0;
      std::size_t mean_n = 0;
      std::vector<std::size_t> missing;
      for (std::size_t i = 0; i < kept.size(); ++i) {
        const std::string& cell = kept[i][j];
        if (cell.empty()) {
          v[i] = std::nan("");
          missing.push_back(i);
          continue;
        }
        double d;
        if (!parse_double(cell, d)) {
          throw DataError("column '" + name + "': cannot parse '" + cell +
                          "' as a number");
        }
        v[i] = d;
        mean_acc += d;
        ++mean_n;
      }
      if (!missing.empty()) {
        if (opts.impute_mean && mean_n > 0) {
          const double m = mean_acc / static_cast<double>(mean_n);
          for (std::size_t i : missing) v[i] = m;
          rep.cells_imputed += missing.size();
        } else if (!opts.impute_mean) {
          throw DataError("column '" + name + "' has " +
                          std::to_string(missing.size()) +
                          " missing values (use mean imputation to fill)");
        }
      }
      table.add_numeric(name, std::move(v));
    }
  }
  table.n_rows = kept.size();
  if (report) *report = rep;
  return table;
}

ColumnTable load_csv(const std::string& path, const LoadOptions& opts,
                     LoadReport* report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), opts, report);
}

namespace {

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

std::string format_number(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

std::string format_csv(const ColumnTable& table) {
  std::ostringstream out;
  for (std::size_t j = 0; j < table.names.size(); ++j) {
    if (j) out << ',';
    out << csv_escape(table.names[j]);
  }
  out << '\n';
  for (std::size_t i = 0; i < table.n_rows; ++i) {
    for (std::size_t j = 0; j < table.names.size(); ++j) {
      if (j) out << ',';
      const Column& c = table.cols.at(table.names[j]);
      if (c.kind == Column::Kind::Numeric) {
        if (!std::isnan(c.num[i])) out << format_number(c.num[i]);
      } else {
        const int code = c.codes[i];
        if (code >= 0) out << csv_escape(c.levels[code]);
      }
    }
    out << '\n';
  }
  return out.str();
}

void write_csv(const std::string& path, const ColumnTable& table) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << format_csv(table);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw DataError("cannot rename temporary file onto '" + path + "'");
  }
}

}  // namespace mixnn
