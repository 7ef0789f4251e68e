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

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "voxlens/synth_world.h"

namespace voxlens {
namespace {

Matrix scalar(double x) {
  Matrix m(1, 1);
  m(0, 0) = x;
  return m;
}

TEST(AdamWTest, ZeroGradientAppliesDecoupledDecayOnly) {
  AdamWConfig hyper;
  Matrix w = scalar(2.5), g = scalar(0.0), m = scalar(0.0), v = scalar(0.0);
  const double lr = 0.1;
  adamw_update(w, g, m, v, 1, hyper, lr);
  EXPECT_EQ(w(0, 0), 2.5 * (1.0 - lr * hyper.weight_decay));
}

TEST(AdamWTest, MinimizesQuadratic) {
  AdamWConfig hyper;
  hyper.weight_decay = 0.0;
  Matrix w = scalar(0.0), m = scalar(0.0), v = scalar(0.0);
  for (int t = 1; t <= 5000; ++t) {
    Matrix g = scalar(2.0 * (w(0, 0) - 3.0));
    adamw_update(w, g, m, v, t, hyper, 1e-2);
  }
  EXPECT_NEAR(w(0, 0), 3.0, 1e-3);
}

// Decoupled decay moves the fixed point towards zero.
TEST(AdamWTest, DefaultDecayBiasesQuadraticFixedPoint) {
  AdamWConfig hyper;
  Matrix w = scalar(0.0), m = scalar(0.0), v = scalar(0.0);
  for (int t = 1; t <= 5000; ++t) {
    adamw_update(w, scalar(2.0 * (w(0, 0) - 3.0)), m, v, t, hyper, 1e-2);
  }
  EXPECT_LT(w(0, 0), 3.0);
  EXPECT_GT(w(0, 0), 2.99);
}

TEST(AdamWTest, DegenerateBeta2MatchesScalarOracle) {
  AdamWConfig hyper;
  hyper.beta2 = 0.0;
  const double lr = 0.05;
  Matrix w = scalar(1.0), m = scalar(0.0), v = scalar(0.0);
  double ow = 1.0, om = 0.0;
  for (int t = 1; t <= 40; ++t) {
    const double g = std::cos(0.7 * t) + 0.3;
    adamw_update(w, scalar(g), m, v, t, hyper, lr);
    om = 0.9 * om + 0.1 * g;
    const double m_hat = om / (1.0 - std::pow(0.9, t));
    ow = ow * (1.0 - lr * 0.01) - lr * m_hat / (std::abs(g) + 1e-8);
    ASSERT_NEAR(w(0, 0), ow, 1e-12) << "step " << t;
  }
}

TEST(AdamWTest, ZeroDecayMatchesAdamOracle) {
  AdamWConfig hyper;
  hyper.weight_decay = 0.0;
  const int n = 6;
  Matrix w(2, 3), m = Matrix::Zero(2, 3), v = Matrix::Zero(2, 3);
  std::vector<double> ow(n), om(n, 0.0), ov(n, 0.0);
  for (int k = 0; k < n; ++k) ow[k] = w.data()[k] = 0.5 * k - 1.0;
  const double lr = 3e-3;
  for (int t = 1; t <= 200; ++t) {
    Matrix g(2, 3);
    for (int k = 0; k < n; ++k) g.data()[k] = (k + 1) * w.data()[k] - std::sin(t + k);
    adamw_update(w, g, m, v, t, hyper, lr);
    for (int k = 0; k < n; ++k) {
      const double gk = (k + 1) * ow[k] - std::sin(t + k);
      om[k] = 0.9 * om[k] + 0.1 * gk;
      ov[k] = 0.999 * ov[k] + 0.001 * gk * gk;
      const double mh = om[k] / (1.0 - std::pow(0.9, t));
      const double vh = ov[k] / (1.0 - std::pow(0.999, t));
      ow[k] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  for (int k = 0; k < n; ++k) EXPECT_NEAR(w.data()[k], ow[k], 1e-12);
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.token_dim = 4;
  c.model_dim = 4;
  c.n_heads = 2;
  c.ffn_expansion = 2;
  c.n_voxels = 3;
  return c;
}

TEST(AdamWTest, NonFiniteGradientAbortsWithoutUpdating) {
  EncoderParams p = init_params(tiny_encoder(), 1);
  const std::uint64_t before = p.fingerprint();
  EncoderParams g = EncoderParams::zeros(p.config);
  g.ffn_out(1, 2) = std::numeric_limits<double>::quiet_NaN();
  OptimState state = init_optim(p);
  try {
    adamw_step(p, g, state, 1e-3);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("ffn_out"), std::string::npos);
  }
  EXPECT_EQ(p.fingerprint(), before);
  EXPECT_EQ(state.step, 0);
}

TEST(AdamWTest, InvalidHyperparameters) {
  AdamWConfig hyper;
  hyper.beta1 = 1.0;
  EXPECT_THROW(hyper.validate(), ConfigError);
}

ScheduleConfig reference_schedule() {
  ScheduleConfig s;
  s.total_steps = 1000;
  return s;
}

TEST(OneCycleTest, EndpointsAreExact) {
  ScheduleConfig s = reference_schedule();
  EXPECT_EQ(onecycle_lr(s, 0), 1e-6);
  EXPECT_EQ(s.warmup_steps(), 300);
  EXPECT_EQ(onecycle_lr(s, 300), 1.5e-5);
  EXPECT_NEAR(onecycle_lr(s, 1000), 1.5e-5 * 1e-4, 1e-22);
}

TEST(OneCycleTest, AnnealMidpointMatchesClosedForm) {
  ScheduleConfig s = reference_schedule();
  const double lo = 1.5e-9, hi = 1.5e-5;
  EXPECT_NEAR(onecycle_lr(s, 650), lo + (hi - lo) * 0.5 * (1.0 + std::cos(std::numbers::pi / 2)),
              1e-20);
  EXPECT_NEAR(onecycle_lr(s, 475), lo + (hi - lo) * 0.5 * (1.0 + std::cos(std::numbers::pi * 0.25)),
              1e-20);
}

TEST(OneCycleTest, MonotonePhasesAndContinuousPeak) {
  ScheduleConfig s = reference_schedule();
  for (int t = 1; t <= 300; ++t) EXPECT_GT(onecycle_lr(s, t), onecycle_lr(s, t - 1));
  for (int t = 301; t <= 1000; ++t) EXPECT_LT(onecycle_lr(s, t), onecycle_lr(s, t - 1));
  EXPECT_NEAR(onecycle_lr(s, 299), 1.5e-5, 1e-9);
  EXPECT_NEAR(onecycle_lr(s, 301), 1.5e-5, 1e-9);
}

TEST(OneCycleTest, RejectsBadInput) {
  ScheduleConfig s = reference_schedule();
  EXPECT_THROW(onecycle_lr(s, -1), ConfigError);
  EXPECT_THROW(onecycle_lr(s, 1001), ConfigError);
  s.initial_lr = 1e-4;
  EXPECT_THROW(onecycle_lr(s, 0), ConfigError);
  s = reference_schedule();
  s.warmup_fraction = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(R2Test, PerfectAndMeanPredictors) {
  Matrix y(4, 2);
  y << 1, 2, 3, 5, 2, 2, 6, 1;
  EXPECT_EQ(r2_scores(y, y).mean, 1.0);
  Matrix mean_pred = y.colwise().mean().replicate(4, 1);
  R2Result r = r2_scores(mean_pred, y);
  EXPECT_NEAR(r.per_voxel[0], 0.0, 1e-15);
  EXPECT_NEAR(r.per_voxel[1], 0.0, 1e-15);
}

TEST(R2Test, MatchesNaiveOracle) {
  const int n = 10000;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  Matrix pred(n, 3), y(n, 3);
  for (Eigen::Index k = 0; k < pred.size(); ++k) {
    pred.data()[k] = normal(rng);
    y.data()[k] = 2.0 + normal(rng);
  }
  R2Result r = r2_scores(pred, y);
  for (int v = 0; v < 3; ++v) {
    long double mean = 0;
    for (int i = 0; i < n; ++i) mean += y(i, v);
    mean /= n;
    long double tot = 0, res = 0;
    for (int i = 0; i < n; ++i) {
      tot += (y(i, v) - mean) * (y(i, v) - mean);
      res += (y(i, v) - pred(i, v)) * (y(i, v) - pred(i, v));
    }
    EXPECT_NEAR(r.per_voxel[v], static_cast<double>(1.0L - res / tot), 1e-10);
    EXPECT_LT(r.per_voxel[v], 0.0);
  }
}

TEST(R2Test, ZeroVarianceVoxelIsFlagged) {
  Matrix y(3, 2);
  y << 0.1, 1, 0.1, 2, 0.1, 4;
  Matrix pred = Matrix::Zero(3, 2);
  R2Result r = r2_scores(pred, y);
  EXPECT_FALSE(r.valid[0]);
  EXPECT_TRUE(std::isnan(r.per_voxel[0]));
  EXPECT_TRUE(r.valid[1]);
  EXPECT_EQ(r.n_valid(), 1);
  EXPECT_EQ(r.mean, r.per_voxel[1]);
  EXPECT_THROW(r2_scores(Matrix(0, 2), Matrix(0, 2)), InsufficientDataError);
}

TEST(AccuracyTest, NormalizesByNoiseCeiling) {
  R2Result r;
  r.per_voxel = {0.2, 0.4, 0.3, std::numeric_limits<double>::quiet_NaN()};
  r.valid = {true, true, true, false};
  std::vector<double> nc = {0.4, 0.4, 0.0, 0.5};
  AccuracyResult a = prediction_accuracy(r, nc);
  EXPECT_DOUBLE_EQ(a.per_voxel[0], 0.5);
  EXPECT_EQ(a.per_voxel[1], 1.0);
  EXPECT_FALSE(a.valid[2]);
  EXPECT_FALSE(a.valid[3]);
  EXPECT_DOUBLE_EQ(a.mean, 0.75);
}

struct TinySetup {
  std::vector<Matrix> tokens;
  Matrix targets;
  TrainData data;
  EncoderParams init;
};

TinySetup tiny_setup() {
  WorldConfig wc;
  wc.n_features = 8;
  wc.token_dim = 8;
  wc.seq_len = 6;
  wc.n_images = 60;
  wc.n_voxels = 5;
  wc.k_min = 1;
  wc.k_max = 3;
  wc.token_noise_sd = 0.0;
  wc.trial_noise_sd = 0.0;
  World w = generate_world(wc);
  TinySetup s;
  for (auto& t : render_world(w)) s.tokens.push_back(t.values);
  s.targets = simulate_responses(w).means();
  for (int i = 0; i < 50; ++i) s.data.train.push_back(i);
  for (int i = 50; i < 60; ++i) s.data.val.push_back(i);
  s.data.tokens = s.tokens;
  s.data.targets = &s.targets;
  EncoderConfig ec;
  ec.token_dim = 8;
  ec.model_dim = 8;
  ec.n_heads = 2;
  ec.ffn_expansion = 2;
  ec.n_voxels = 5;
  s.init = init_params(ec, 4);
  return s;
}

TrainConfig tiny_train(int workers) {
  TrainConfig c;
  c.epochs = 4;
  c.images_per_batch = 20;
  c.voxels_per_batch = 3;
  c.seed = 11;
  c.workers = workers;
  return c;
}

ScheduleConfig tiny_schedule() {
  ScheduleConfig s;
  s.initial_lr = 1e-3;
  s.max_lr = 1e-2;
  return s;
}

TEST(TrainTest, DeterministicAcrossRunsAndWorkerCounts) {
  TinySetup s = tiny_setup();
  TrainResult a = train(s.init, s.data, tiny_train(1), tiny_schedule());
  TrainResult b = train(s.init, s.data, tiny_train(1), tiny_schedule());
  TrainResult c = train(s.init, s.data, tiny_train(3), tiny_schedule());
  EXPECT_EQ(a.last.fingerprint(), b.last.fingerprint());
  EXPECT_EQ(a.last.fingerprint(), c.last.fingerprint());
  ASSERT_EQ(a.log.size(), 12u);
  for (std::size_t k = 0; k < a.log.size(); ++k) EXPECT_EQ(a.log[k].loss, b.log[k].loss);
  EXPECT_NE(a.last.fingerprint(), s.init.fingerprint());
}

TEST(TrainTest, LogsScheduleAndKeepsBestValidationState) {
  TinySetup s = tiny_setup();
  TrainResult r = train(s.init, s.data, tiny_train(1), tiny_schedule());
  EXPECT_EQ(r.log.front().lr, 1e-3);
  EXPECT_EQ(r.log.front().step, 0);
  double best = -1e300;
  int epochs_with_val = 0;
  for (const auto& e : r.log) {
    if (!e.val_r2) continue;
    ++epochs_with_val;
    best = std::max(best, *e.val_r2);
  }
  EXPECT_EQ(epochs_with_val, 4);
  EXPECT_EQ(r.best_val_r2, best);
  EXPECT_EQ(evaluate_r2(r.best, s.tokens, s.targets, s.data.val).mean, best);
  EXPECT_TRUE(to_json(r.log.back()).contains("val_r2"));
}

TEST(TrainTest, ReducesTrainingLoss) {
  TinySetup s = tiny_setup();
  TrainConfig c = tiny_train(1);
  c.epochs = 40;
  TrainResult r = train(s.init, s.data, c, tiny_schedule());
  EXPECT_LT(r.log.back().loss, 0.5 * r.log.front().loss);
}

TEST(TrainTest, DivergenceAbortsWithStep) {
  TinySetup s = tiny_setup();
  ScheduleConfig sched;
  sched.initial_lr = 1e300;
  sched.max_lr = 1e308;
  try {
    train(s.init, s.data, tiny_train(1), sched);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(TrainTest, RejectsMissingData) {
  TinySetup s = tiny_setup();
  s.data.train.clear();
  EXPECT_THROW(train(s.init, s.data, tiny_train(1), tiny_schedule()), InsufficientDataError);
  TrainConfig bad = tiny_train(1);
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

}  // namespace
}  // namespace voxlens
