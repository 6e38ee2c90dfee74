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

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mixnn/common.hpp"

// Reverse-mode differentiation over dense row-major matrices. A Tape owns
// the nodes of one forward pass; backward() replays it in reverse. All
// storage is 64-bit. Shapes are rank-2 (scalars are 1x1, column vectors
// n x 1). Broadcasting is limited to bias rows (1 x m against n x m),
// per-row scalars (n x 1 against n x m) and true scalars.

namespace mixnn::ad {

struct Shape {
  int rows = 1;
  int cols = 1;
  int size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Shape& shape() const;
  const std::vector<double>& values() const;
  const std::vector<double>& grad() const;
  double scalar() const;  // requires 1x1
  int rows() const { return shape().rows; }
  int cols() const { return shape().cols; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  // Leaf that participates in differentiation (parameters, probed inputs).
  Var leaf(Shape s, std::span<const double> v);
  // Constant data; no gradient is tracked.
  Var constant(Shape s, std::span<const double> v);
  Var constant(Shape s, std::vector<double>&& v);
  Var scalar_const(double v);

  void backward(Var root);  // root must be scalar
  void zero_grad();
  std::size_t size() const { return nodes_.size(); }

  // Internal node record. Exposed for op implementations and inspection.
  struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;  // (tape, own id); empty for leaves

    double& g(int i) { return grad[i]; }
  };

  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }

  // Appends a node, verifying every produced value is finite.
  Var emit(const char* op, Shape s, std::vector<double>&& val,
           std::vector<int> parents, std::function<void(Tape&, int)> back);

 private:
  std::vector<Node> nodes_;
};

// --- forward ops -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var matmul(Var a, Var b);
Var transpose(Var a);
Var exp(Var a);
Var log(Var a);
Var pow(Var a, double p);
Var lgamma(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var gelu(Var a);
Var sum(Var a);            // all entries -> 1x1
Var mean(Var a);           // -> 1x1
Var sum_rows(Var a);       // n x m -> n x 1
Var sum_cols(Var a);       // n x m -> 1 x m
Var softmax_rows(Var a);
Var logsumexp_rows(Var a);  // -> n x 1
Var layer_norm_rows(Var a, double eps = 1e-5);
Var dropout(Var a, double p, bool train, std::mt19937_64& rng);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, int c0, int c1);  // [c0, c1)
Var slice_rows(Var a, int r0, int r1);
Var reshape(Var a, Shape s);
Var gather_rows(Var table, std::span<const int> index);
Var scale(Var a, double k);
Var neg(Var a);
Var l1_norm(Var a);  // -> 1x1

// Solves T X = B for X where T is triangular. unit_diag treats diag(T) as 1.
Var triangular_solve(Var t, Var b, bool lower, bool unit_diag = false);
// Lower Cholesky factor of a symmetric positive definite matrix. Reports the
// failing leading minor (1-based) on non-SPD input.
Var cholesky(Var a);

// --- composite helpers (built from the ops above) ---------------------------

Var matexp(Var a, double tol = 1e-12);          // scaling and squaring
Var trace(Var a);
Var spectral_norm_sq(Var m, int iters = 20, std::uint64_t seed = 0x5eed);

// --- gradient checking -------------------------------------------------------

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
// f must be deterministic (dropout in eval mode, fixed noise).
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, Shape xshape,
                         std::span<const double> x0, double step = 1e-5);

}  // namespace mixnn::ad
