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

#include "mixnn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace mixnn {

void TrainConfig::validate() const {
  if (lr <= 0) throw DataError("train config: lr must be > 0");
  if (batch_size <= 0) throw DataError("train config: batch_size must be > 0");
  if (epochs < 0) throw DataError("train config: epochs must be >= 0");
  if (patience < 1) throw DataError("train config: patience must be >= 1");
  for (double l : {lambda_dag, lambda_contract, lambda_sparse}) {
    if (l < 0) throw DataError("train config: penalty weights must be >= 0");
  }
  if (clip_norm && *clip_norm <= 0) {
    throw DataError("train config: clip_norm must be > 0");
  }
}

void adam_step(std::span<double> value, std::span<const double> grad,
               std::vector<double>& m, std::vector<double>& v, int t, double lr,
               double beta1, double beta2, double eps) {
  if (m.size() != value.size()) m.assign(value.size(), 0.0);
  if (v.size() != value.size()) v.assign(value.size(), 0.0);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < value.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
    value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

double clip_gradients(ParamStore& params, double max_norm) {
  double sq = 0;
  for (const auto& [name, t] : params.raw()) {
    for (double g : t.grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double factor = max_norm / norm;
  for (auto& [name, t] : params.raw()) {
    for (double& g : t.grad) g *= factor;
  }
  return factor;
}

double kl_scale_auto(const Model& model, const PreparedData& data) {
  return 1.0 / model.mean_group_size(data);
}

namespace {

struct AdamSlots {
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> mv;
  int t = 0;
};

void apply_gradients(Model& model, const std::map<std::string, ad::Var>& leaves,
                     const std::optional<double>& clip, AdamSlots& adam,
                     double lr) {
  model.params.zero_grad();
  for (const auto& [name, leaf] : leaves) {
    const auto& g = leaf.grad();
    auto& t = model.params.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
  }
  if (clip) clip_gradients(model.params, *clip);
  ++adam.t;
  for (const auto& name : model.params.names()) {
    auto& tensor = model.params.at(name);
    auto& slots = adam.mv[name];
    adam_step(tensor.value, tensor.grad, slots.first, slots.second, adam.t, lr);
  }
}

double validation_loss(const Model& model, const PreparedData& val,
                       double lambda_kl, const TrainConfig& cfg,
                       std::mt19937_64& rng) {
  ad::Tape tape;
  std::map<std::string, ad::Var> leaves;
  std::vector<int> all(val.n);
  std::iota(all.begin(), all.end(), 0);
  ForwardOptions opts;  // eval mode
  auto res = model.batch_loss(tape, val, all, opts, rng, lambda_kl,
                              cfg.lambda_dag, cfg.lambda_contract,
                              cfg.lambda_sparse,
                              /*row_scale=*/1.0,
                              /*kl_fraction=*/1.0 / val.n, leaves);
  return res.total.scalar();
}

}  // namespace

FitReport fit(Model& model, const ColumnTable& train,
              const ColumnTable* validation, const TrainConfig& cfg) {
  cfg.validate();
  if (train.n_rows == 0) throw DataError("fit: empty training data");

  PreparedData data = model.prepare(train, /*require_targets=*/true);
  std::optional<PreparedData> val;
  if (validation) val = model.prepare(*validation, /*require_targets=*/true);

  FitReport report;
  const double lambda_kl =
      cfg.lambda_kl < 0 ? kl_scale_auto(model, data) : cfg.lambda_kl;
  report.lambda_kl_used = lambda_kl;

  std::mt19937_64 rng(cfg.seed);
  AdamSlots adam;
  const int n = data.n;
  const int bs = std::min(cfg.batch_size, n);
  const double remap =
      model.cfg.encoder.unknown_strategy == enc::UnknownStrategy::Learned
          ? cfg.unknown_remap_rate
          : 0.0;

  std::ofstream log;
  if (!cfg.log_file.empty()) {
    log.open(cfg.log_file, std::ios::app);
    if (!log) throw DataError("cannot open log file '" + cfg.log_file + "'");
  }

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  double best_val = std::numeric_limits<double>::infinity();
  std::map<std::string, Tensor> best_params;
  int since_best = 0;
  double lr = cfg.lr;
  double plateau_best = std::numeric_limits<double>::infinity();
  int plateau_since = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.scheduler == TrainConfig::Scheduler::Cosine && cfg.epochs > 1) {
      lr = cfg.lr * 0.5 * (1.0 + std::cos(M_PI * (epoch - 1) / (cfg.epochs - 1)));
      lr = std::max(lr, 1e-8);
    }
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0;
    std::map<std::string, double> epoch_components;
    int batches = 0;
    for (int start = 0; start < n; start += bs) {
      const int end = std::min(n, start + bs);
      std::vector<int> rows(order.begin() + start, order.begin() + end);
      ad::Tape tape;
      std::map<std::string, ad::Var> leaves;
      ForwardOptions opts;
      opts.train = true;
      opts.unknown_remap_rate = remap;
      LossResult loss;
      try {
        loss = model.batch_loss(tape, data, rows, opts, rng, lambda_kl,
                                cfg.lambda_dag, cfg.lambda_contract,
                                cfg.lambda_sparse,
                                /*row_scale=*/static_cast<double>(n),
                                /*kl_fraction=*/static_cast<double>(rows.size()) / n,
                                leaves);
        if (!std::isfinite(loss.total.scalar())) {
          throw NumericalError("loss is not finite");
        }
        tape.backward(loss.total);
      } catch (const NumericalError& e) {
        throw NumericalError("training aborted at epoch " +
                             std::to_string(epoch) + ", batch " +
                             std::to_string(batches + 1) + ": " + e.what());
      }
      report.hybrid_failures += loss.hybrid_failures;
      apply_gradients(model, leaves, cfg.clip_norm, adam, lr);
      model.center_tables();
      epoch_loss += loss.total.scalar();
      for (const auto& [k, v] : loss.components) epoch_components[k] += v;
      ++batches;
    }
    epoch_loss /= batches;
    for (auto& [k, v] : epoch_components) v /= batches;
    report.train_loss.push_back(epoch_loss);
    for (const auto& [k, v] : epoch_components) report.components[k].push_back(v);
    report.stopped_epoch = epoch;

    double vloss = std::numeric_limits<double>::quiet_NaN();
    if (val) {
      vloss = validation_loss(model, *val, lambda_kl, cfg, rng);
      report.val_loss.push_back(vloss);
      if (vloss < best_val - 1e-12) {
        best_val = vloss;
        report.best_epoch = epoch;
        best_params = model.params.raw();
        since_best = 0;
      } else {
        ++since_best;
      }
    }

    if (log) {
      nlohmann::json line;
      line["epoch"] = epoch;
      line["loss"] = epoch_loss;
      line["lr"] = lr;
      for (const auto& [k, v] : epoch_components) line["components"][k] = v;
      if (val) line["val_loss"] = vloss;
      log << line.dump() << '\n';
    }

    if (cfg.scheduler == TrainConfig::Scheduler::Plateau) {
      const double monitored = val ? vloss : epoch_loss;
      if (monitored < plateau_best - 1e-12) {
        plateau_best = monitored;
        plateau_since = 0;
      } else if (++plateau_since >= 10) {
        lr = std::max(lr * 0.5, 1e-5);
        plateau_since = 0;
      }
    }

    if (val && since_best >= cfg.patience) break;
  }

  if (val && !best_params.empty()) {
    model.params.raw() = best_params;
    report.best_val = best_val;
  }
  return report;
}

FitReport warm_start_fit(Model& model, const ColumnTable& train,
                         const ColumnTable* validation, const TrainConfig& cfg) {
  model.extend_levels(train);
  return fit(model, train, validation, cfg);
}

}  // namespace mixnn
