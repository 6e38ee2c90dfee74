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
#include <span>
#include <string>
#include <vector>

#include "mixnn/model.hpp"

namespace mixnn {

struct TrainConfig {
  double lr = 0.001;
  int batch_size = 256;
  int epochs = 100;
  double lambda_kl = -1.0;  // negative = auto (1 / mean group size)
  double lambda_dag = 0.1;
  double lambda_contract = 0.1;
  double lambda_sparse = 0.001;
  std::optional<double> clip_norm;
  int patience = 20;
  enum class Scheduler { None, Plateau, Cosine };
  Scheduler scheduler = Scheduler::None;
  unsigned long long seed = 0;
  std::string log_file;  // line-delimited JSON stream when non-empty
  double unknown_remap_rate = 0.01;  // learned-unknown training signal

  void validate() const;
};

struct FitReport {
  std::vector<double> train_loss;  // per-epoch mean batch objective
  std::map<std::string, std::vector<double>> components;
  std::vector<double> val_loss;    // per-row validation objective
  int stopped_epoch = 0;           // last epoch executed (1-based)
  int best_epoch = 0;
  double best_val = 0.0;
  int hybrid_failures = 0;
  double lambda_kl_used = 0.0;
};

// Bias-corrected Adam update on one tensor (t is the 1-based step count).
void adam_step(std::span<double> value, std::span<const double> grad,
               std::vector<double>& m, std::vector<double>& v, int t, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Scales every gradient so the global L2 norm is at most max_norm; returns
// the factor applied.
double clip_gradients(ParamStore& params, double max_norm);

// 1 / mean group size across all grouping factors' levels.
double kl_scale_auto(const Model& model, const PreparedData& data);

FitReport fit(Model& model, const ColumnTable& train,
              const ColumnTable* validation, const TrainConfig& cfg);

// Extends variational tables with any new group levels, then continues
// optimization from the loaded parameters.
FitReport warm_start_fit(Model& model, const ColumnTable& train,
                         const ColumnTable* validation, const TrainConfig& cfg);

}  // namespace mixnn
