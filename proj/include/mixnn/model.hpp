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
#include <random>
#include <string>
#include <vector>

#include "mixnn/columns.hpp"
#include "mixnn/covariance.hpp"
#include "mixnn/encoder.hpp"
#include "mixnn/families.hpp"
#include "mixnn/formula.hpp"
#include "mixnn/gsem.hpp"
#include "mixnn/manifold.hpp"
#include "mixnn/tensor.hpp"

namespace mixnn {

struct Tensor {
  ad::Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
};

// Named parameter tensors; iteration order is the sorted name order, which
// keeps the optimizer and persistence deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, ad::Shape shape,
              std::vector<double> init);
  bool has(const std::string& name) const { return tensors_.count(name) > 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  std::vector<std::string> names() const;
  void zero_grad();
  std::map<std::string, Tensor>& raw() { return tensors_; }
  const std::map<std::string, Tensor>& raw() const { return tensors_; }

 private:
  std::map<std::string, Tensor> tensors_;
};

struct BackboneConfig {
  enum class Kind { Gsem, Manifold };
  Kind kind = Kind::Gsem;
  gsem::GsemConfig gsem;
  std::vector<mani::ManifoldBlockConfig> manifold;
  mani::Aggregation aggregation = mani::Aggregation::Sum;
};

struct ModelConfig {
  std::string formula_text;
  formula::ColumnKinds schema;
  enc::EncoderConfig encoder;
  BackboneConfig backbone;
  std::vector<fam::OutcomeSpec> outcomes;  // derived from the formula if empty
  fam::OutputSemMode output_sem = fam::OutputSemMode::None;
  std::vector<fam::OutputEdge> output_edges;
  std::map<std::string, cov::CovarianceSpec> cov_map;  // keyed by group column
};

// One variational table per (grouping factor, slope term).
struct TableInfo {
  std::string group;
  std::string slope;  // "1" for the intercept column
  std::string key;    // parameter prefix
  int term_index = 0;
  int z_col = 0;
  int n_levels = 0;
  bool has_cov = false;
  cov::CovarianceSpec cov;

  bool centering_applies() const { return !has_cov || cov.exchangeable(); }
};

struct PreparedData {
  formula::DesignMatrices design;
  std::vector<std::vector<double>> y_num;  // per outcome, n x width row-major
  std::vector<std::vector<int>> y_class;   // per outcome (multinomial labels)
  int n = 0;
};

struct ForwardResult {
  ad::Var x_cont;  // probe node when requested
  ad::Var h_fixed;
  ad::Var h_encoder;
  ad::Var h_backbone;
  std::vector<ad::Var> theta;     // per outcome, post output-SEM
  std::vector<ad::Var> u_rows;    // per table, gathered effects (n x d)
  std::vector<ad::Var> z_cols;    // per table (n x 1)
  std::vector<ad::Var> contribs;  // per table, z (x) u (n x d)
  ad::Var first_structure_eta;    // post-transform activations, first layer
  ad::Var kl;
  ad::Var dag_pen, sparse_pen, contract_pen;  // invalid when not applicable
  std::map<std::string, ad::Var>* leaves = nullptr;
  int hybrid_failures = 0;
};

struct LossResult {
  ad::Var total;
  std::map<std::string, double> components;
  int hybrid_failures = 0;
};

struct ForwardOptions {
  bool train = false;
  bool sample_re = false;           // sample random effects without dropout
  bool probe_inputs = false;        // x_cont becomes a differentiable leaf
  double unknown_remap_rate = 0.0;  // learned-unknown training signal
  std::vector<int> mute_tables;     // table indices whose contribution is zeroed
};

class Model {
 public:
  ModelConfig cfg;
  formula::FormulaAst ast;
  formula::FittedLevels fitted_levels;
  std::vector<TableInfo> tables;
  int encoder_width = 0;
  ParamStore params;
  std::vector<std::string> warnings;
  unsigned long long build_seed = 0;

  static Model build(const ModelConfig& cfg, const ColumnTable& data,
                     unsigned long long seed);

  PreparedData prepare(const ColumnTable& data, bool require_targets) const;

  ForwardResult forward(ad::Tape& tape, const PreparedData& data,
                        const std::vector<int>& rows, const ForwardOptions& opts,
                        std::mt19937_64& rng,
                        std::map<std::string, ad::Var>& leaves) const;

  // Per-batch objective: sum_k w_k * row_scale * mean-NLL_k
  //   + kl_fraction * (lambda_kl KL + lambda_dag DAG + ...).
  LossResult batch_loss(ad::Tape& tape, const PreparedData& data,
                        const std::vector<int>& rows, const ForwardOptions& opts,
                        std::mt19937_64& rng, double lambda_kl,
                        double lambda_dag, double lambda_contract,
                        double lambda_sparse, double row_scale,
                        double kl_fraction,
                        std::map<std::string, ad::Var>& leaves) const;

  // Learned adjacency of the first structured backbone layer (raw values,
  // mask applied). Throws DataError when the model has no structured layer.
  Eigen::MatrixXd structure_matrix() const;

  // Appends fresh rows to variational tables for levels unseen at build time
  // (warm starts); returns the number of new levels added.
  int extend_levels(const ColumnTable& data);

  // Projects variational means onto the centered subspace (exchangeable
  // covariances only); applied after every optimizer step.
  void center_tables();

  double mean_group_size(const PreparedData& data) const;

  // Family-parameter tensors referenced by an outcome's likelihood.
  std::vector<std::string> family_param_names(int outcome_index) const;

 private:
  ad::Var head_forward(ad::Tape& tape, ad::Var h, int outcome_index,
                       std::map<std::string, ad::Var>& leaves) const;
  ad::Var param_leaf(ad::Tape& tape, const std::string& name,
                     std::map<std::string, ad::Var>& leaves) const;
};

}  // namespace mixnn
