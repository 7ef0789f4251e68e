// Copyright 2026 The voxlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "voxlens/trainer.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

namespace voxlens {
namespace {

constexpr int kChunkImages = 8;

void require_positive(const char* name, double value) {
  if (!(value > 0)) throw ConfigError(std::string(name) + " must be positive");
}

}  // namespace

void AdamWConfig::validate() const {
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2 must lie in [0, 1)");
  require_positive("epsilon", epsilon);
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
}

OptimState init_optim(const EncoderParams& params, const AdamWConfig& hyper) {
  hyper.validate();
  OptimState state;
  state.hyper = hyper;
  state.first_moment = EncoderParams::zeros(params.config);
  state.second_moment = EncoderParams::zeros(params.config);
  return state;
}

void adamw_update(Matrix& param, const Matrix& grad, Matrix& first_moment,
                  Matrix& second_moment, std::int64_t step,
                  const AdamWConfig& hyper, double lr) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() ||
      first_moment.rows() != grad.rows() || first_moment.cols() != grad.cols() ||
      second_moment.rows() != grad.rows() || second_moment.cols() != grad.cols()) {
    throw DimensionError("adamw_update: parameter, gradient and moment shapes differ");
  }
  if (step < 1) throw ConfigError("adamw_update: step is 1-based");
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  const double decay = 1.0 - lr * hyper.weight_decay;
  for (Eigen::Index k = 0; k < param.size(); ++k) {
    const double g = grad.data()[k];
    double& m = first_moment.data()[k];
    double& v = second_moment.data()[k];
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
    double& p = param.data()[k];
    p *= decay;
    p -= lr * (m / c1) / (std::sqrt(v / c2) + hyper.epsilon);
  }
}

void adamw_step(EncoderParams& params, const EncoderParams& grads,
                OptimState& state, double lr) {
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.first_moment.tensors();
  auto v = state.second_moment.tensors();
  if (p.size() != g.size()) throw DimensionError("adamw_step: tensor count mismatch");
  for (std::size_t t = 0; t < g.size(); ++t) {
    if (!g[t].tensor->allFinite()) {
      throw NumericError("non-finite gradient in " + std::string(g[t].name) +
                         " at optimizer step " + std::to_string(state.step + 1));
    }
  }
  ++state.step;
  for (std::size_t t = 0; t < p.size(); ++t) {
    adamw_update(*p[t].tensor, *g[t].tensor, *m[t].tensor, *v[t].tensor,
                 state.step, state.hyper, lr);
  }
}

std::int64_t ScheduleConfig::warmup_steps() const {
  return std::llround(warmup_fraction * static_cast<double>(total_steps));
}

void ScheduleConfig::validate() const {
  require_positive("initial_lr", initial_lr);
  if (!(initial_lr <= max_lr)) throw ConfigError("initial_lr must not exceed max_lr");
  if (total_steps < 1) throw ConfigError("total_steps must be positive");
  if (!(warmup_fraction > 0 && warmup_fraction < 1)) {
    throw ConfigError("warmup_fraction must lie in (0, 1)");
  }
  require_positive("final_lr_fraction", final_lr_fraction);
}

double onecycle_lr(const ScheduleConfig& s, std::int64_t step) {
  s.validate();
  if (step < 0 || step > s.total_steps) {
    throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " +
                      std::to_string(s.total_steps) + "]");
  }
  const std::int64_t warm = s.warmup_steps();
  if (step == 0 && warm > 0) return s.initial_lr;
  if (step == warm) return s.max_lr;
  if (step < warm) {
    const double t = static_cast<double>(step) / static_cast<double>(warm);
    return s.max_lr + (s.initial_lr - s.max_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  const double final_lr = s.max_lr * s.final_lr_fraction;
  const double t = static_cast<double>(step - warm) / static_cast<double>(s.total_steps - warm);
  return final_lr + (s.max_lr - final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (steps_per_epoch < 0) throw ConfigError("steps_per_epoch must be non-negative");
  if (images_per_batch < 1) throw ConfigError("images_per_batch must be positive");
  if (voxels_per_batch < 1) throw ConfigError("voxels_per_batch must be positive");
  if (eval_every < 1) throw ConfigError("eval_every must be positive");
  if (workers < 1) throw ConfigError("workers must be positive");
}

nlohmann::json to_json(const AdamWConfig& c) {
  return {{"beta1", c.beta1}, {"beta2", c.beta2}, {"epsilon", c.epsilon},
          {"weight_decay", c.weight_decay}};
}

nlohmann::json to_json(const ScheduleConfig& c) {
  return {{"initial_lr", c.initial_lr}, {"max_lr", c.max_lr},
          {"total_steps", c.total_steps}, {"warmup_fraction", c.warmup_fraction},
          {"final_lr_fraction", c.final_lr_fraction}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"steps_per_epoch", c.steps_per_epoch},
          {"images_per_batch", c.images_per_batch},
          {"voxels_per_batch", c.voxels_per_batch}, {"eval_every", c.eval_every},
          {"seed", c.seed}, {"workers", c.workers}};
}

AdamWConfig adamw_config_from_json(const nlohmann::json& j) {
  AdamWConfig c;
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.validate();
  return c;
}

ScheduleConfig schedule_config_from_json(const nlohmann::json& j) {
  ScheduleConfig c;
  c.initial_lr = j.value("initial_lr", c.initial_lr);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
  c.images_per_batch = j.value("images_per_batch", c.images_per_batch);
  c.voxels_per_batch = j.value("voxels_per_batch", c.voxels_per_batch);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.workers = j.value("workers", c.workers);
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainLogEntry& e) {
  nlohmann::json j = {{"step", e.step}, {"epoch", e.epoch}, {"lr", e.lr}, {"loss", e.loss}};
  if (e.val_r2) j["val_r2"] = *e.val_r2;
  return j;
}

int R2Result::n_valid() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), true));
}

R2Result r2_scores(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw DimensionError("r2_scores: prediction and target shapes differ");
  }
  if (targets.rows() == 0) throw InsufficientDataError("r2_scores: empty split");
  R2Result out;
  const Eigen::Index n = targets.rows();
  double total = 0.0;
  int count = 0;
  for (Eigen::Index v = 0; v < targets.cols(); ++v) {
    const double mean = targets.col(v).sum() / static_cast<double>(n);
    double ss_tot = 0.0, ss_res = 0.0, ss_raw = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double y = targets(i, v);
      ss_tot += (y - mean) * (y - mean);
      ss_res += (y - predictions(i, v)) * (y - predictions(i, v));
      ss_raw += y * y;
    }
    const bool ok = ss_tot > 1e-20 * std::max(ss_raw, 1e-300);
    out.valid.push_back(ok);
    out.per_voxel.push_back(ok ? 1.0 - ss_res / ss_tot
                               : std::numeric_limits<double>::quiet_NaN());
    if (ok) {
      total += out.per_voxel.back();
      ++count;
    }
  }
  out.mean = count > 0 ? total / count : std::numeric_limits<double>::quiet_NaN();
  return out;
}

Matrix predict_rows(const EncoderParams& params, std::span<const Matrix> tokens,
                    std::span<const int> rows, int workers) {
  std::vector<int> voxels(params.config.n_voxels);
  std::iota(voxels.begin(), voxels.end(), 0);
  Matrix out(static_cast<Eigen::Index>(rows.size()), params.config.n_voxels);
  const int n_chunks = (static_cast<int>(rows.size()) + kChunkImages - 1) / kChunkImages;
  parallel_for(n_chunks, workers, [&](int c) {
    const std::size_t begin = static_cast<std::size_t>(c) * kChunkImages;
    const std::size_t end = std::min(rows.size(), begin + kChunkImages);
    std::vector<Matrix> batch;
    for (std::size_t r = begin; r < end; ++r) batch.push_back(tokens[rows[r]]);
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        predict(params, batch, voxels);
  });
  return out;
}

R2Result evaluate_r2(const EncoderParams& params, std::span<const Matrix> tokens,
                     const Matrix& targets, std::span<const int> rows, int workers) {
  if (rows.empty()) throw InsufficientDataError("evaluate_r2: empty split");
  Matrix y(static_cast<Eigen::Index>(rows.size()), targets.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) y.row(r) = targets.row(rows[r]);
  return r2_scores(predict_rows(params, tokens, rows, workers), y);
}

AccuracyResult prediction_accuracy(const R2Result& r2,
                                   std::span<const double> noise_ceiling) {
  if (noise_ceiling.size() != r2.per_voxel.size()) {
    throw DimensionError("prediction_accuracy: noise ceiling length differs from R²");
  }
  AccuracyResult out;
  double total = 0.0;
  int count = 0;
  for (std::size_t v = 0; v < r2.per_voxel.size(); ++v) {
    const bool ok = r2.valid[v] && std::isfinite(noise_ceiling[v]) && noise_ceiling[v] > 0;
    out.valid.push_back(ok);
    out.per_voxel.push_back(ok ? r2.per_voxel[v] / noise_ceiling[v]
                               : std::numeric_limits<double>::quiet_NaN());
    if (ok) {
      total += out.per_voxel.back();
      ++count;
    }
  }
  out.mean = count > 0 ? total / count : std::numeric_limits<double>::quiet_NaN();
  return out;
}

TrainResult train(const EncoderParams& init, const TrainData& data,
                  const TrainConfig& config, ScheduleConfig schedule,
                  const AdamWConfig& hyper) {
  config.validate();
  if (data.targets == nullptr) throw ConfigError("train: targets missing");
  if (data.train.empty()) throw InsufficientDataError("train: empty training split");
  const Matrix& targets = *data.targets;
  const int n_voxels = init.config.n_voxels;
  if (targets.cols() != n_voxels ||
      targets.rows() != static_cast<Eigen::Index>(data.tokens.size())) {
    throw DimensionError("train: targets must be n_images × n_voxels");
  }
  const int n_train = static_cast<int>(data.train.size());
  const int batch_images = std::min(config.images_per_batch, n_train);
  const int batch_voxels = std::min(config.voxels_per_batch, n_voxels);
  const int steps_per_epoch = config.steps_per_epoch > 0
                                  ? config.steps_per_epoch
                                  : (n_train + batch_images - 1) / batch_images;
  schedule.total_steps = static_cast<std::int64_t>(steps_per_epoch) * config.epochs;
  schedule.validate();

  TrainResult result;
  result.last = init;
  result.best = init;
  result.best_val_r2 = -std::numeric_limits<double>::infinity();
  OptimState state = init_optim(init, hyper);
  std::mt19937_64 rng(derive_seed(config.seed, "train", 0));
  std::vector<int> order = data.train;
  std::vector<int> voxel_pool(n_voxels);
  std::iota(voxel_pool.begin(), voxel_pool.end(), 0);
  EncoderParams& params = result.last;
  std::int64_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < steps_per_epoch; ++s, ++step) {
      std::vector<int> batch(batch_images);
      for (int b = 0; b < batch_images; ++b) {
        batch[b] = order[(static_cast<std::size_t>(s) * batch_images + b) % n_train];
      }
      for (int k = 0; k < batch_voxels; ++k) {
        std::uniform_int_distribution<int> pick(k, n_voxels - 1);
        std::swap(voxel_pool[k], voxel_pool[pick(rng)]);
      }
      std::vector<int> voxels(voxel_pool.begin(), voxel_pool.begin() + batch_voxels);
      std::sort(voxels.begin(), voxels.end());

      const double n_entries = static_cast<double>(batch_images) * batch_voxels;
      const int n_chunks = (batch_images + kChunkImages - 1) / kChunkImages;
      std::vector<EncoderParams> chunk_grads(n_chunks);
      std::vector<double> chunk_sse(n_chunks, 0.0);
      parallel_for(n_chunks, config.workers, [&](int c) {
        const int begin = c * kChunkImages;
        const int end = std::min(batch_images, begin + kChunkImages);
        std::vector<Matrix> tokens;
        Matrix y(end - begin, batch_voxels);
        for (int b = begin; b < end; ++b) {
          tokens.push_back(data.tokens[batch[b]]);
          for (int k = 0; k < batch_voxels; ++k) y(b - begin, k) = targets(batch[b], voxels[k]);
        }
        ForwardResult fwd = forward(params, tokens, voxels);
        const Matrix residual = fwd.predictions - y;
        chunk_sse[c] = residual.squaredNorm();
        chunk_grads[c] = backward(params, fwd.cache, (2.0 / n_entries) * residual).params;
      });
      EncoderParams grads = std::move(chunk_grads[0]);
      for (int c = 1; c < n_chunks; ++c) {
        auto total = grads.tensors();
        auto part = chunk_grads[c].tensors();
        for (std::size_t t = 0; t < total.size(); ++t) *total[t].tensor += *part[t].tensor;
      }
      const double loss =
          std::accumulate(chunk_sse.begin(), chunk_sse.end(), 0.0) / n_entries;
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged: non-finite loss at step " + std::to_string(step));
      }
      const double lr = onecycle_lr(schedule, step);
      adamw_step(params, grads, state, lr);
      if (!params.all_finite()) {
        throw NumericError("training diverged: non-finite parameters after step " +
                           std::to_string(step));
      }
      result.log.push_back({step, epoch, lr, loss, std::nullopt});
    }
    if (!data.val.empty() && (epoch % config.eval_every == 0 || epoch == config.epochs)) {
      const double r2 = evaluate_r2(params, data.tokens, targets, data.val, config.workers).mean;
      result.log.back().val_r2 = r2;
      if (r2 > result.best_val_r2) {
        result.best_val_r2 = r2;
        result.best = params;
        result.best_epoch = epoch;
      }
    }
  }
  if (data.val.empty()) {
    result.best = params;
    result.best_epoch = config.epochs;
    result.best_val_r2 = std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

}  // namespace voxlens
