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

// AdamW with a one-cycle schedule, the minibatch training loop, and R²
// scoring against rep-averaged responses.

#ifndef VOXLENS_TRAINER_H_
#define VOXLENS_TRAINER_H_

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"
#include "voxlens/encoder.h"

namespace voxlens {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  void validate() const;
};

struct OptimState {
  AdamWConfig hyper;
  EncoderParams first_moment;
  EncoderParams second_moment;
  std::int64_t step = 0;
};

OptimState init_optim(const EncoderParams& params, const AdamWConfig& hyper = {});

// One update of a single tensor; `step` is the 1-based step index.
void adamw_update(Matrix& param, const Matrix& grad, Matrix& first_moment,
                  Matrix& second_moment, std::int64_t step,
                  const AdamWConfig& hyper, double lr);

// Throws NumericError naming the tensor when a gradient is non-finite; the
// parameters are left untouched in that case.
void adamw_step(EncoderParams& params, const EncoderParams& grads,
                OptimState& state, double lr);

struct ScheduleConfig {
  double initial_lr = 1e-6;
  double max_lr = 1.5e-5;
  std::int64_t total_steps = 1;
  double warmup_fraction = 0.3;
  double final_lr_fraction = 1e-4;

  std::int64_t warmup_steps() const;
  void validate() const;
};

double onecycle_lr(const ScheduleConfig& schedule, std::int64_t step);

struct TrainConfig {
  int epochs = 20;
  int steps_per_epoch = 0;  // 0: one pass over the training images
  int images_per_batch = 64;
  int voxels_per_batch = 256;
  int eval_every = 1;  // epochs
  std::uint64_t seed = 0;
  int workers = 1;
  void validate() const;
};

nlohmann::json to_json(const AdamWConfig& c);
nlohmann::json to_json(const ScheduleConfig& c);
nlohmann::json to_json(const TrainConfig& c);
AdamWConfig adamw_config_from_json(const nlohmann::json& j);
ScheduleConfig schedule_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Token matrices and rep-averaged targets indexed by row position.
struct TrainData {
  std::span<const Matrix> tokens;
  const Matrix* targets = nullptr;  // n_images × V
  std::vector<int> train;
  std::vector<int> val;
};

struct TrainLogEntry {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_r2;
};

nlohmann::json to_json(const TrainLogEntry& entry);

struct TrainResult {
  EncoderParams best;
  EncoderParams last;
  int best_epoch = -1;
  double best_val_r2 = 0.0;
  std::vector<TrainLogEntry> log;
};

// The schedule's total_steps is overwritten with epochs × steps_per_epoch.
// Throws NumericError with the failing step on divergence.
TrainResult train(const EncoderParams& init, const TrainData& data,
                  const TrainConfig& config, ScheduleConfig schedule,
                  const AdamWConfig& hyper = {});

struct R2Result {
  std::vector<double> per_voxel;  // NaN where not computed
  std::vector<bool> valid;        // false for zero-variance voxels
  double mean = 0.0;              // over valid voxels
  int n_valid() const;
};

// Column-wise R² of predictions against targets; SS_tot about the column mean.
R2Result r2_scores(const Matrix& predictions, const Matrix& targets);

Matrix predict_rows(const EncoderParams& params, std::span<const Matrix> tokens,
                    std::span<const int> rows, int workers = 1);

R2Result evaluate_r2(const EncoderParams& params, std::span<const Matrix> tokens,
                     const Matrix& targets, std::span<const int> rows,
                     int workers = 1);

struct AccuracyResult {
  std::vector<double> per_voxel;  // NaN where excluded
  std::vector<bool> valid;        // false when NC ≤ 0 or R² undefined
  double mean = 0.0;
};

AccuracyResult prediction_accuracy(const R2Result& r2,
                                   std::span<const double> noise_ceiling);

}  // namespace voxlens

#endif  // VOXLENS_TRAINER_H_
