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

#include "mixnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mixnn::ad {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericalError(std::string("op '") + op +
                           "' produced a non-finite value");
    }
  }
}

// C(n x m) += / = A(n x k) * B(k x m), row-major.
void mm(const double* a, const double* b, double* c, int n, int k, int m,
        bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(n) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// GA(n x k) += G(n x m) * B^T, with B stored (k x m).
void mm_bt(const double* g, const double* b, double* ga, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* grow = g + static_cast<std::size_t>(i) * m;
    double* garow = ga + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<std::size_t>(p) * m;
      double s = 0.0;
      for (int j = 0; j < m; ++j) s += grow[j] * brow[j];
      garow[p] += s;
    }
  }
}

// GB(k x m) += A^T * G, with A stored (n x k), G (n x m).
void mm_at(const double* a, const double* g, double* gb, int n, int k, int m) {
  for (int i = 0; i < n; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    const double* grow = g + static_cast<std::size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* gbrow = gb + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) gbrow[j] += av * grow[j];
    }
  }
}

// Plain triangular solve on raw buffers: T X = B, X overwrites result.
// T is n x n, B/X are n x m.
void tri_solve_raw(const double* t, const double* b, double* x, int n, int m,
                   bool lower, bool unit_diag) {
  std::memcpy(x, b, sizeof(double) * static_cast<std::size_t>(n) * m);
  if (lower) {
    for (int i = 0; i < n; ++i) {
      double* xi = x + static_cast<std::size_t>(i) * m;
      const double* ti = t + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < i; ++j) {
        const double tij = ti[j];
        if (tij == 0.0) continue;
        const double* xj = x + static_cast<std::size_t>(j) * m;
        for (int c = 0; c < m; ++c) xi[c] -= tij * xj[c];
      }
      if (!unit_diag) {
        const double d = ti[i];
        for (int c = 0; c < m; ++c) xi[c] /= d;
      }
    }
  } else {
    for (int i = n - 1; i >= 0; --i) {
      double* xi = x + static_cast<std::size_t>(i) * m;
      const double* ti = t + static_cast<std::size_t>(i) * n;
      for (int j = i + 1; j < n; ++j) {
        const double tij = ti[j];
        if (tij == 0.0) continue;
        const double* xj = x + static_cast<std::size_t>(j) * m;
        for (int c = 0; c < m; ++c) xi[c] -= tij * xj[c];
      }
      if (!unit_diag) {
        const double d = ti[i];
        for (int c = 0; c < m; ++c) xi[c] /= d;
      }
    }
  }
}

// Solve T^T Y = G given T (n x n); Y n x m. T^T of a lower matrix is upper.
void tri_solve_transposed_raw(const double* t, const double* g, double* y,
                              int n, int m, bool lower, bool unit_diag) {
  std::memcpy(y, g, sizeof(double) * static_cast<std::size_t>(n) * m);
  if (lower) {
    // T^T is upper with (T^T)_{ij} = T_{ji}.
    for (int i = n - 1; i >= 0; --i) {
      double* yi = y + static_cast<std::size_t>(i) * m;
      for (int j = i + 1; j < n; ++j) {
        const double tji = t[static_cast<std::size_t>(j) * n + i];
        if (tji == 0.0) continue;
        const double* yj = y + static_cast<std::size_t>(j) * m;
        for (int c = 0; c < m; ++c) yi[c] -= tji * yj[c];
      }
      if (!unit_diag) {
        const double d = t[static_cast<std::size_t>(i) * n + i];
        for (int c = 0; c < m; ++c) yi[c] /= d;
      }
    }
  } else {
    for (int i = 0; i < n; ++i) {
      double* yi = y + static_cast<std::size_t>(i) * m;
      for (int j = 0; j < i; ++j) {
        const double tji = t[static_cast<std::size_t>(j) * n + i];
        if (tji == 0.0) continue;
        const double* yj = y + static_cast<std::size_t>(j) * m;
        for (int c = 0; c < m; ++c) yi[c] -= tji * yj[c];
      }
      if (!unit_diag) {
        const double d = t[static_cast<std::size_t>(i) * n + i];
        for (int c = 0; c < m; ++c) yi[c] /= d;
      }
    }
  }
}

double digamma(double x) {
  // Shift into the asymptotic regime, then use the standard expansion.
  double result = 0.0;
  while (x < 6.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  result += std::log(x) - 0.5 * inv -
            inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  return result;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const bool rows_ok = a.rows == b.rows || a.rows == 1 || b.rows == 1;
  const bool cols_ok = a.cols == b.cols || a.cols == 1 || b.cols == 1;
  if (!rows_ok || !cols_ok) {
    throw NumericalError(std::string("op '") + op + "': shape mismatch (" +
                         std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         " vs " + std::to_string(b.rows) + "x" +
                         std::to_string(b.cols) + ")");
  }
  return Shape{std::max(a.rows, b.rows), std::max(a.cols, b.cols)};
}

inline int bcast_index(const Shape& s, int i, int j) {
  return (s.rows == 1 ? 0 : i) * s.cols + (s.cols == 1 ? 0 : j);
}

}  // namespace

// --- Var / Tape --------------------------------------------------------------

const Shape& Var::shape() const { return tape_->node(id_).shape; }
const std::vector<double>& Var::values() const { return tape_->node(id_).val; }
const std::vector<double>& Var::grad() const { return tape_->node(id_).grad; }

double Var::scalar() const {
  const auto& n = tape_->node(id_);
  if (n.shape.size() != 1) {
    throw NumericalError("scalar() called on a non-scalar node");
  }
  return n.val[0];
}

Var Tape::leaf(Shape s, std::span<const double> v) {
  Node n;
  n.shape = s;
  n.val.assign(v.begin(), v.end());
  n.grad.assign(n.val.size(), 0.0);
  n.requires_grad = true;
  n.op = "leaf";
  check_finite("leaf", n.val);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Shape s, std::span<const double> v) {
  Node n;
  n.shape = s;
  n.val.assign(v.begin(), v.end());
  n.grad.assign(n.val.size(), 0.0);
  n.requires_grad = false;
  n.op = "const";
  check_finite("const", n.val);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Shape s, std::vector<double>&& v) {
  Node n;
  n.shape = s;
  n.val = std::move(v);
  n.grad.assign(n.val.size(), 0.0);
  n.requires_grad = false;
  n.op = "const";
  check_finite("const", n.val);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::scalar_const(double v) {
  return constant(Shape{1, 1}, std::vector<double>{v});
}

Var Tape::emit(const char* op, Shape s, std::vector<double>&& val,
               std::vector<int> parents, std::function<void(Tape&, int)> back) {
  check_finite(op, val);
  Node n;
  n.shape = s;
  n.val = std::move(val);
  n.grad.assign(n.val.size(), 0.0);
  n.op = op;
  for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  n.parents = std::move(parents);
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw NumericalError("backward: foreign root");
  auto& rn = node(root.id());
  if (rn.shape.size() != 1) throw NumericalError("backward: root is not scalar");
  rn.grad[0] += 1.0;
  for (int i = root.id(); i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.requires_grad && n.back) n.back(*this, i);
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

// --- elementwise binary ------------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul };

Var binary(const char* name, BinOp op, Var a, Var b) {
  Tape& t = *a.tape();
  const Shape sa = a.shape(), sb = b.shape();
  const Shape out = broadcast_shape(name, sa, sb);
  const auto& va = a.values();
  const auto& vb = b.values();
  std::vector<double> v(out.size());
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) {
      const double x = va[bcast_index(sa, i, j)];
      const double y = vb[bcast_index(sb, i, j)];
      double r = 0;
      switch (op) {
        case BinOp::Add: r = x + y; break;
        case BinOp::Sub: r = x - y; break;
        case BinOp::Mul: r = x * y; break;
      }
      v[i * out.cols + j] = r;
    }
  }
  const int ia = a.id(), ib = b.id();
  return t.emit(name, out, std::move(v), {ia, ib},
                [ia, ib, sa, sb, out, op](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& na = tp.node(ia);
                  auto& nb = tp.node(ib);
                  for (int i = 0; i < out.rows; ++i) {
                    for (int j = 0; j < out.cols; ++j) {
                      const double go = g[i * out.cols + j];
                      if (go == 0.0) continue;
                      const int ka = bcast_index(sa, i, j);
                      const int kb = bcast_index(sb, i, j);
                      switch (op) {
                        case BinOp::Add:
                          if (na.requires_grad) na.grad[ka] += go;
                          if (nb.requires_grad) nb.grad[kb] += go;
                          break;
                        case BinOp::Sub:
                          if (na.requires_grad) na.grad[ka] += go;
                          if (nb.requires_grad) nb.grad[kb] -= go;
                          break;
                        case BinOp::Mul:
                          if (na.requires_grad) na.grad[ka] += go * nb.val[kb];
                          if (nb.requires_grad) nb.grad[kb] += go * na.val[ka];
                          break;
                      }
                    }
                  }
                });
}

using UnaryFn = double (*)(double);
using UnaryDFn = double (*)(double x, double y);  // derivative from input/output

Var unary(const char* name, Var a, UnaryFn f, UnaryDFn df) {
  Tape& t = *a.tape();
  const auto& va = a.values();
  std::vector<double> v(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) v[i] = f(va[i]);
  const int ia = a.id();
  return t.emit(name, a.shape(), std::move(v), {ia},
                [ia, df](Tape& tp, int self) {
                  auto& n = tp.node(self);
                  auto& pa = tp.node(ia);
                  for (std::size_t i = 0; i < n.val.size(); ++i) {
                    pa.grad[i] += n.grad[i] * df(pa.val[i], n.val[i]);
                  }
                });
}

}  // namespace

Var add(Var a, Var b) { return binary("add", BinOp::Add, a, b); }
Var sub(Var a, Var b) { return binary("sub", BinOp::Sub, a, b); }
Var mul(Var a, Var b) { return binary("mul", BinOp::Mul, a, b); }

Var matmul(Var a, Var b) {
  Tape& t = *a.tape();
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.cols != sb.rows) {
    throw NumericalError("op 'matmul': inner dimensions disagree (" +
                         std::to_string(sa.cols) + " vs " +
                         std::to_string(sb.rows) + ")");
  }
  std::vector<double> v(static_cast<std::size_t>(sa.rows) * sb.cols);
  mm(a.values().data(), b.values().data(), v.data(), sa.rows, sa.cols, sb.cols,
     false);
  const int ia = a.id(), ib = b.id();
  return t.emit("matmul", Shape{sa.rows, sb.cols}, std::move(v), {ia, ib},
                [ia, ib, sa, sb](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& na = tp.node(ia);
                  auto& nb = tp.node(ib);
                  if (na.requires_grad) {
                    mm_bt(g.data(), nb.val.data(), na.grad.data(), sa.rows,
                          sa.cols, sb.cols);
                  }
                  if (nb.requires_grad) {
                    mm_at(na.val.data(), g.data(), nb.grad.data(), sa.rows,
                          sa.cols, sb.cols);
                  }
                });
}

Var transpose(Var a) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  const auto& va = a.values();
  std::vector<double> v(va.size());
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) v[j * s.rows + i] = va[i * s.cols + j];
  const int ia = a.id();
  return t.emit("transpose", Shape{s.cols, s.rows}, std::move(v), {ia},
                [ia, s](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i)
                    for (int j = 0; j < s.cols; ++j)
                      pa.grad[i * s.cols + j] += g[j * s.rows + i];
                });
}

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var pow(Var a, double p) {
  Tape& t = *a.tape();
  const auto& va = a.values();
  std::vector<double> v(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) v[i] = std::pow(va[i], p);
  const int ia = a.id();
  return t.emit("pow", a.shape(), std::move(v), {ia},
                [ia, p](Tape& tp, int self) {
                  auto& n = tp.node(self);
                  auto& pa = tp.node(ia);
                  for (std::size_t i = 0; i < n.val.size(); ++i) {
                    pa.grad[i] +=
                        n.grad[i] * p * std::pow(pa.val[i], p - 1.0);
                  }
                });
}

Var lgamma(Var a) {
  return unary("lgamma", a, [](double x) { return std::lgamma(x); },
               [](double x, double) { return digamma(x); });
}

Var sigmoid(Var a) {
  return unary("sigmoid", a,
               [](double x) {
                 return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                               : std::exp(x) / (1.0 + std::exp(x));
               },
               [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  // Exact erf form; derivative is Phi(x) + x * phi(x).
  return unary("gelu", a,
               [](double x) {
                 return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
               },
               [](double x, double) {
                 const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                 const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                 return cdf + x * pdf;
               });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  double s = 0;
  for (double x : a.values()) s += x;
  const int ia = a.id();
  return t.emit("sum", Shape{1, 1}, std::vector<double>{s}, {ia},
                [ia](Tape& tp, int self) {
                  const double g = tp.node(self).grad[0];
                  auto& pa = tp.node(ia);
                  for (auto& gi : pa.grad) gi += g;
                });
}

Var mean(Var a) {
  Tape& t = *a.tape();
  const double inv = 1.0 / a.shape().size();
  double s = 0;
  for (double x : a.values()) s += x;
  const int ia = a.id();
  return t.emit("mean", Shape{1, 1}, std::vector<double>{s * inv}, {ia},
                [ia, inv](Tape& tp, int self) {
                  const double g = tp.node(self).grad[0] * inv;
                  auto& pa = tp.node(ia);
                  for (auto& gi : pa.grad) gi += g;
                });
}

Var sum_rows(Var a) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  const auto& va = a.values();
  std::vector<double> v(s.rows, 0.0);
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) v[i] += va[i * s.cols + j];
  const int ia = a.id();
  return t.emit("sum_rows", Shape{s.rows, 1}, std::move(v), {ia},
                [ia, s](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i)
                    for (int j = 0; j < s.cols; ++j)
                      pa.grad[i * s.cols + j] += g[i];
                });
}

Var sum_cols(Var a) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  const auto& va = a.values();
  std::vector<double> v(s.cols, 0.0);
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) v[j] += va[i * s.cols + j];
  const int ia = a.id();
  return t.emit("sum_cols", Shape{1, s.cols}, std::move(v), {ia},
                [ia, s](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i)
                    for (int j = 0; j < s.cols; ++j)
                      pa.grad[i * s.cols + j] += g[j];
                });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  const auto& va = a.values();
  std::vector<double> v(va.size());
  for (int i = 0; i < s.rows; ++i) {
    const double* row = va.data() + static_cast<std::size_t>(i) * s.cols;
    double mx = row[0];
    for (int j = 1; j < s.cols; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < s.cols; ++j) z += std::exp(row[j] - mx);
    for (int j = 0; j < s.cols; ++j) v[i * s.cols + j] = std::exp(row[j] - mx) / z;
  }
  const int ia = a.id();
  return t.emit("softmax", s, std::move(v), {ia},
                [ia, s](Tape& tp, int self) {
                  auto& n = tp.node(self);
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i) {
                    const double* y = n.val.data() + static_cast<std::size_t>(i) * s.cols;
                    const double* gy = n.grad.data() + static_cast<std::size_t>(i) * s.cols;
                    double dot = 0;
                    for (int j = 0; j < s.cols; ++j) dot += gy[j] * y[j];
                    for (int j = 0; j < s.cols; ++j)
                      pa.grad[i * s.cols + j] += y[j] * (gy[j] - dot);
                  }
                });
}

Var logsumexp_rows(Var a) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  const auto& va = a.values();
  std::vector<double> v(s.rows);
  std::vector<double> soft(va.size());
  for (int i = 0; i < s.rows; ++i) {
    const double* row = va.data() + static_cast<std::size_t>(i) * s.cols;
    double mx = row[0];
    for (int j = 1; j < s.cols; ++j) mx = std::max(mx, row[j]);
    double z = 0;
    for (int j = 0; j < s.cols; ++j) z += std::exp(row[j] - mx);
    v[i] = mx + std::log(z);
    for (int j = 0; j < s.cols; ++j)
      soft[i * s.cols + j] = std::exp(row[j] - mx) / z;
  }
  const int ia = a.id();
  return t.emit("logsumexp", Shape{s.rows, 1}, std::move(v), {ia},
                [ia, s, soft = std::move(soft)](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i)
                    for (int j = 0; j < s.cols; ++j)
                      pa.grad[i * s.cols + j] += g[i] * soft[i * s.cols + j];
                });
}

Var layer_norm_rows(Var a, double eps) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  const auto& va = a.values();
  std::vector<double> v(va.size());
  std::vector<double> inv_sd(s.rows);
  for (int i = 0; i < s.rows; ++i) {
    const double* row = va.data() + static_cast<std::size_t>(i) * s.cols;
    double m = 0;
    for (int j = 0; j < s.cols; ++j) m += row[j];
    m /= s.cols;
    double var = 0;
    for (int j = 0; j < s.cols; ++j) var += (row[j] - m) * (row[j] - m);
    var /= s.cols;
    const double isd = 1.0 / std::sqrt(var + eps);
    inv_sd[i] = isd;
    for (int j = 0; j < s.cols; ++j) v[i * s.cols + j] = (row[j] - m) * isd;
  }
  const int ia = a.id();
  return t.emit("layer_norm", s, std::move(v), {ia},
                [ia, s, inv_sd = std::move(inv_sd)](Tape& tp, int self) {
                  auto& n = tp.node(self);
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i) {
                    const double* y = n.val.data() + static_cast<std::size_t>(i) * s.cols;
                    const double* gy = n.grad.data() + static_cast<std::size_t>(i) * s.cols;
                    double mg = 0, mgy = 0;
                    for (int j = 0; j < s.cols; ++j) {
                      mg += gy[j];
                      mgy += gy[j] * y[j];
                    }
                    mg /= s.cols;
                    mgy /= s.cols;
                    for (int j = 0; j < s.cols; ++j)
                      pa.grad[i * s.cols + j] +=
                          inv_sd[i] * (gy[j] - mg - y[j] * mgy);
                  }
                });
}

Var dropout(Var a, double p, bool train, std::mt19937_64& rng) {
  if (!train || p <= 0.0) return a;  // eval mode is the identity
  if (p >= 1.0) throw NumericalError("dropout: p must be < 1");
  Tape& t = *a.tape();
  const auto& va = a.values();
  const double keep = 1.0 - p;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> mask(va.size());
  std::vector<double> v(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) {
    mask[i] = u(rng) < p ? 0.0 : 1.0 / keep;
    v[i] = va[i] * mask[i];
  }
  const int ia = a.id();
  return t.emit("dropout", a.shape(), std::move(v), {ia},
                [ia, mask = std::move(mask)](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    pa.grad[i] += g[i] * mask[i];
                });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw NumericalError("concat_cols: no inputs");
  Tape& t = *parts[0].tape();
  const int rows = parts[0].rows();
  int cols = 0;
  std::vector<int> ids;
  std::vector<int> widths;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw NumericalError("concat_cols: row mismatch");
    cols += p.cols();
    ids.push_back(p.id());
    widths.push_back(p.cols());
  }
  std::vector<double> v(static_cast<std::size_t>(rows) * cols);
  int off = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& pv = t.node(ids[k]).val;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < widths[k]; ++j)
        v[static_cast<std::size_t>(i) * cols + off + j] = pv[i * widths[k] + j];
    off += widths[k];
  }
  return t.emit("concat_cols", Shape{rows, cols}, std::move(v), ids,
                [ids, widths, rows, cols](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  int off2 = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    auto& pn = tp.node(ids[k]);
                    if (pn.requires_grad) {
                      for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < widths[k]; ++j)
                          pn.grad[i * widths[k] + j] +=
                              g[static_cast<std::size_t>(i) * cols + off2 + j];
                    }
                    off2 += widths[k];
                  }
                });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw NumericalError("concat_rows: no inputs");
  Tape& t = *parts[0].tape();
  const int cols = parts[0].cols();
  int rows = 0;
  std::vector<int> ids;
  std::vector<int> heights;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw NumericalError("concat_rows: column mismatch");
    rows += p.rows();
    ids.push_back(p.id());
    heights.push_back(p.rows());
  }
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(rows) * cols);
  for (int id : ids) {
    const auto& pv = t.node(id).val;
    v.insert(v.end(), pv.begin(), pv.end());
  }
  return t.emit("concat_rows", Shape{rows, cols}, std::move(v), ids,
                [ids, heights, cols](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  std::size_t off = 0;
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    auto& pn = tp.node(ids[k]);
                    const std::size_t count =
                        static_cast<std::size_t>(heights[k]) * cols;
                    if (pn.requires_grad) {
                      for (std::size_t i = 0; i < count; ++i)
                        pn.grad[i] += g[off + i];
                    }
                    off += count;
                  }
                });
}

Var slice_cols(Var a, int c0, int c1) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  if (c0 < 0 || c1 > s.cols || c0 >= c1)
    throw NumericalError("slice_cols: bad range");
  const int w = c1 - c0;
  const auto& va = a.values();
  std::vector<double> v(static_cast<std::size_t>(s.rows) * w);
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < w; ++j) v[i * w + j] = va[i * s.cols + c0 + j];
  const int ia = a.id();
  return t.emit("slice_cols", Shape{s.rows, w}, std::move(v), {ia},
                [ia, s, c0, w](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (int i = 0; i < s.rows; ++i)
                    for (int j = 0; j < w; ++j)
                      pa.grad[i * s.cols + c0 + j] += g[i * w + j];
                });
}

Var slice_rows(Var a, int r0, int r1) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  if (r0 < 0 || r1 > s.rows || r0 >= r1)
    throw NumericalError("slice_rows: bad range");
  const int h = r1 - r0;
  const auto& va = a.values();
  std::vector<double> v(va.begin() + static_cast<std::size_t>(r0) * s.cols,
                        va.begin() + static_cast<std::size_t>(r1) * s.cols);
  const int ia = a.id();
  return t.emit("slice_rows", Shape{h, s.cols}, std::move(v), {ia},
                [ia, s, r0, h](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  const std::size_t off = static_cast<std::size_t>(r0) * s.cols;
                  for (std::size_t i = 0;
                       i < static_cast<std::size_t>(h) * s.cols; ++i)
                    pa.grad[off + i] += g[i];
                });
}

Var reshape(Var a, Shape s) {
  Tape& t = *a.tape();
  if (s.size() != a.shape().size())
    throw NumericalError("reshape: element count mismatch");
  std::vector<double> v = a.values();
  const int ia = a.id();
  return t.emit("reshape", s, std::move(v), {ia},
                [ia](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) pa.grad[i] += g[i];
                });
}

Var gather_rows(Var table, std::span<const int> index) {
  Tape& t = *table.tape();
  const Shape s = table.shape();
  const auto& tv = table.values();
  std::vector<double> v(index.size() * static_cast<std::size_t>(s.cols));
  std::vector<int> idx(index.begin(), index.end());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= s.rows)
      throw DataError("gather_rows: index " + std::to_string(idx[i]) +
                      " out of range [0, " + std::to_string(s.rows) + ")");
    std::memcpy(v.data() + i * s.cols,
                tv.data() + static_cast<std::size_t>(idx[i]) * s.cols,
                sizeof(double) * s.cols);
  }
  const int it = table.id();
  const int n = static_cast<int>(idx.size());
  return t.emit("gather_rows", Shape{n, s.cols}, std::move(v), {it},
                [it, s, idx = std::move(idx)](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pt = tp.node(it);
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    for (int j = 0; j < s.cols; ++j)
                      pt.grad[static_cast<std::size_t>(idx[i]) * s.cols + j] +=
                          g[i * s.cols + j];
                });
}

Var scale(Var a, double k) {
  Tape& t = *a.tape();
  const auto& va = a.values();
  std::vector<double> v(va.size());
  for (std::size_t i = 0; i < va.size(); ++i) v[i] = va[i] * k;
  const int ia = a.id();
  return t.emit("scale", a.shape(), std::move(v), {ia},
                [ia, k](Tape& tp, int self) {
                  auto& g = tp.node(self).grad;
                  auto& pa = tp.node(ia);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    pa.grad[i] += g[i] * k;
                });
}

Var neg(Var a) { return scale(a, -1.0); }

Var l1_norm(Var a) {
  Tape& t = *a.tape();
  double s = 0;
  for (double x : a.values()) s += std::abs(x);
  const int ia = a.id();
  return t.emit("l1_norm", Shape{1, 1}, std::vector<double>{s}, {ia},
                [ia](Tape& tp, int self) {
                  const double g = tp.node(self).grad[0];
                  auto& pa = tp.node(ia);
                  for (std::size_t i = 0; i < pa.val.size(); ++i) {
                    const double x = pa.val[i];
                    pa.grad[i] += g * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
                  }
                });
}

Var triangular_solve(Var tvar, Var b, bool lower, bool unit_diag) {
  Tape& t = *tvar.tape();
  const Shape st = tvar.shape(), sb = b.shape();
  if (st.rows != st.cols)
    throw NumericalError("triangular_solve: matrix not square");
  if (st.cols != sb.rows)
    throw NumericalError("triangular_solve: dimension mismatch");
  const int n = st.rows, m = sb.cols;
  std::vector<double> x(static_cast<std::size_t>(n) * m);
  tri_solve_raw(tvar.values().data(), b.values().data(), x.data(), n, m, lower,
                unit_diag);
  const int it = tvar.id(), ib = b.id();
  return t.emit(
      "triangular_solve", sb, std::move(x), {it, ib},
      [it, ib, n, m, lower, unit_diag](Tape& tp, int self) {
        auto& nself = tp.node(self);
        auto& nt = tp.node(it);
        auto& nb = tp.node(ib);
        // gB = T^{-T} gX; gT = -gB X^T restricted to the triangle.
        std::vector<double> gb(static_cast<std::size_t>(n) * m);
        tri_solve_transposed_raw(nt.val.data(), nself.grad.data(), gb.data(), n,
                                 m, lower, unit_diag);
        if (nb.requires_grad) {
          for (std::size_t i = 0; i < gb.size(); ++i) nb.grad[i] += gb[i];
        }
        if (nt.requires_grad) {
          const double* xv = nself.val.data();
          for (int i = 0; i < n; ++i) {
            const int jlo = lower ? 0 : i + (unit_diag ? 1 : 0);
            const int jhi = lower ? i + (unit_diag ? 0 : 1) : n;
            for (int j = jlo; j < jhi; ++j) {
              double s = 0;
              for (int c = 0; c < m; ++c)
                s += gb[static_cast<std::size_t>(i) * m + c] *
                     xv[static_cast<std::size_t>(j) * m + c];
              nt.grad[static_cast<std::size_t>(i) * n + j] -= s;
            }
          }
        }
      });
}

Var cholesky(Var a) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  if (s.rows != s.cols) throw NumericalError("cholesky: matrix not square");
  const int n = s.rows;
  const auto& av = a.values();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) {
      if (std::abs(av[i * n + j] - av[j * n + i]) > 1e-10) {
        throw NumericalError("cholesky: input is not symmetric");
      }
    }
  }
  std::vector<double> l(static_cast<std::size_t>(n) * n, 0.0);
  for (int k = 0; k < n; ++k) {
    double d = av[k * n + k];
    for (int j = 0; j < k; ++j) d -= l[k * n + j] * l[k * n + j];
    if (d <= 0.0) {
      throw NumericalError("cholesky: leading minor " + std::to_string(k + 1) +
                           " is not positive definite");
    }
    l[k * n + k] = std::sqrt(d);
    for (int i = k + 1; i < n; ++i) {
      double v = av[i * n + k];
      for (int j = 0; j < k; ++j) v -= l[i * n + j] * l[k * n + j];
      l[i * n + k] = v / l[k * n + k];
    }
  }
  const int ia = a.id();
  return t.emit(
      "cholesky", s, std::move(l), {ia}, [ia, n](Tape& tp, int self) {
        auto& nself = tp.node(self);
        auto& pa = tp.node(ia);
        const double* lv = nself.val.data();
        // dA = (S + S^T)/2 with S = L^{-T} Phi(L^T dL) L^{-1}; Phi keeps the
        // lower triangle and halves the diagonal.
        std::vector<double> p(static_cast<std::size_t>(n) * n, 0.0);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j <= i; ++j) {
            double s2 = 0;
            for (int k = i; k < n; ++k)
              s2 += lv[static_cast<std::size_t>(k) * n + i] *
                    nself.grad[static_cast<std::size_t>(k) * n + j];
            p[static_cast<std::size_t>(i) * n + j] = (i == j) ? 0.5 * s2 : s2;
          }
        }
        // Y = L^{-T} P
        std::vector<double> y(static_cast<std::size_t>(n) * n);
        tri_solve_transposed_raw(lv, p.data(), y.data(), n, n, true, false);
        // S = Y L^{-1}  <=>  S L = Y  <=>  L^T S^T = Y^T
        std::vector<double> yt(static_cast<std::size_t>(n) * n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            yt[static_cast<std::size_t>(j) * n + i] =
                y[static_cast<std::size_t>(i) * n + j];
        std::vector<double> st(static_cast<std::size_t>(n) * n);
        tri_solve_transposed_raw(lv, yt.data(), st.data(), n, n, true, false);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < n; ++j)
            pa.grad[static_cast<std::size_t>(i) * n + j] +=
                0.5 * (st[static_cast<std::size_t>(j) * n + i] +
                       st[static_cast<std::size_t>(i) * n + j]);
      });
}

// --- composite helpers -------------------------------------------------------

Var trace(Var a) {
  const Shape s = a.shape();
  if (s.rows != s.cols) throw NumericalError("trace: matrix not square");
  std::vector<double> maskv(static_cast<std::size_t>(s.rows) * s.cols, 0.0);
  for (int i = 0; i < s.rows; ++i) maskv[static_cast<std::size_t>(i) * s.cols + i] = 1.0;
  Var m = a.tape()->constant(s, std::move(maskv));
  return sum(mul(a, m));
}

Var matexp(Var a, double tol) {
  Tape& t = *a.tape();
  const Shape s = a.shape();
  if (s.rows != s.cols) throw NumericalError("matexp: matrix not square");
  const int n = s.rows;
  double norm = 0;
  for (int i = 0; i < n; ++i) {
    double rs = 0;
    for (int j = 0; j < n; ++j) rs += std::abs(a.values()[i * n + j]);
    norm = std::max(norm, rs);
  }
  int squarings = 0;
  while (norm > 0.5 && squarings < 30) {
    norm *= 0.5;
    ++squarings;
  }
  Var x = scale(a, std::pow(0.5, squarings));
  std::vector<double> eye(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eye[static_cast<std::size_t>(i) * n + i] = 1.0;
  Var acc = t.constant(s, std::move(eye));
  Var term = x;
  acc = add(acc, term);
  for (int k = 2; k <= 40; ++k) {
    term = scale(matmul(term, x), 1.0 / k);
    acc = add(acc, term);
    double mx = 0;
    for (double v : term.values()) mx = std::max(mx, std::abs(v));
    if (mx < tol) break;
  }
  for (int k = 0; k < squarings; ++k) acc = matmul(acc, acc);
  return acc;
}

Var spectral_norm_sq(Var m, int iters, std::uint64_t seed) {
  Tape& t = *m.tape();
  const Shape s = m.shape();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> v0(s.cols);
  double nrm = 0;
  for (auto& x : v0) {
    x = nd(rng);
    nrm += x * x;
  }
  nrm = std::sqrt(nrm);
  for (auto& x : v0) x /= nrm;
  Var v = t.constant(Shape{s.cols, 1}, std::move(v0));
  Var mt = transpose(m);
  for (int k = 0; k < iters; ++k) {
    Var w = matmul(mt, matmul(m, v));
    Var wn = pow(sum(mul(w, w)), 0.5);
    v = mul(w, pow(wn, -1.0));
  }
  Var mv = matmul(m, v);
  return mul(sum(mul(mv, mv)), pow(sum(mul(v, v)), -1.0));
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, Shape xshape,
                         std::span<const double> x0, double step) {
  std::vector<double> x(x0.begin(), x0.end());
  Tape tape;
  Var leaf = tape.leaf(xshape, x);
  Var y = f(tape, leaf);
  tape.backward(y);
  const std::vector<double> analytic = leaf.grad();

  double max_err = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    Tape tp;
    const double fp = f(tp, tp.leaf(xshape, x)).scalar();
    x[i] = saved - step;
    Tape tm;
    const double fm = f(tm, tm.leaf(xshape, x)).scalar();
    x[i] = saved;
    const double numeric = (fp - fm) / (2.0 * step);
    const double err =
        std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace mixnn::ad
