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

#include "voxlens/attribution.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "voxlens/synth_world.h"
#include "voxlens/trainer.h"

namespace voxlens {
namespace {

Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = normal(rng);
  return m;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.token_dim = 6;
  c.model_dim = 8;
  c.n_heads = 2;
  c.ffn_expansion = 2;
  c.n_voxels = 4;
  return c;
}

TEST(MeanBaselineTest, ConstantCorpus) {
  Matrix t(1, 3);
  t << 0.1, -2.0, 1.0 / 3.0;
  std::vector<Matrix> corpus = {t.replicate(5, 1), t.replicate(2, 1)};
  BaselineToken b = mean_baseline(corpus);
  EXPECT_EQ(b.values, t);
  EXPECT_FALSE(b.provenance.empty());
}

TEST(MeanBaselineTest, StreamingAgreesWithBatch) {
  std::mt19937_64 rng(2);
  std::vector<Matrix> corpus;
  StreamingMean stream;
  for (int i = 0; i < 50; ++i) {
    corpus.push_back(random_matrix(7 + i % 3, 5, rng));
    stream.add(corpus.back());
  }
  Matrix diff = stream.result().values - mean_baseline(corpus).values;
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(StreamingMean().result(), InsufficientDataError);
  EXPECT_THROW(mean_baseline(std::vector<Matrix>{}), InsufficientDataError);
}

TEST(MeanBaselineTest, NoiselessWorldIsFrequencyWeightedDirectionAverage) {
  WorldConfig wc;
  wc.n_images = 200;
  wc.k_min = wc.k_max = 1;
  wc.token_noise_sd = 0.0;
  World w = generate_world(wc);
  std::vector<Matrix> corpus;
  for (auto& t : render_world(w)) corpus.push_back(t.values);
  std::vector<double> counts(wc.n_features, 0.0);
  double total = 0.0;
  for (const auto& s : w.stimuli) {
    for (int a : s.token_assignment) {
      total += 1.0;
      if (a != kBackground) counts[a] += 1.0;
    }
  }
  Matrix expected = Matrix::Zero(1, wc.token_dim);
  for (int f = 0; f < wc.n_features; ++f)
    expected += (counts[f] / total) * w.dictionary.directions.row(f);
  EXPECT_LT((mean_baseline(corpus).values - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(IntegratedGradientsTest, ZeroPathGivesZeroScores) {
  EncoderParams p = init_params(small_encoder(), 1);
  std::mt19937_64 rng(3);
  BaselineToken b{random_matrix(1, 6, rng), "test"};
  Matrix x = baseline_sequence(b, 5);
  std::vector<int> voxels = {0, 1, 2, 3};
  for (const auto& r : integrated_gradients(p, x, voxels, b, 10)) {
    for (double s : r.scores) EXPECT_EQ(s, 0.0);
    EXPECT_EQ(r.completeness_gap, 0.0);
  }
}

TEST(IntegratedGradientsTest, LinearProbeIsExactForAnyStepCount) {
  std::mt19937_64 rng(4);
  Matrix w = random_matrix(1, 6, rng);
  DifferentiableModel probe = linear_probe(w, 0.3);
  Matrix x = random_matrix(9, 6, rng);
  Matrix b = random_matrix(1, 6, rng).replicate(9, 1);
  for (int m : {1, 2, 7, 100}) {
    AttributionRecord r = integrated_gradients(probe, x, b, m);
    for (int j = 0; j < 9; ++j) {
      EXPECT_NEAR(r.scores[j], w.row(0).dot(x.row(j) - b.row(j)), 1e-10) << "m=" << m;
    }
    EXPECT_LT(r.completeness_gap, 1e-10);
  }
}

TEST(IntegratedGradientsTest, BatchedEncoderPathMatchesGenericRoutine) {
  EncoderParams p = init_params(small_encoder(), 5);
  std::mt19937_64 rng(6);
  Matrix x = random_matrix(5, 6, rng);
  BaselineToken b{random_matrix(1, 6, rng), "test"};
  std::vector<int> voxels = {3, 0, 2};
  for (bool absolute : {false, true}) {
    auto batched = integrated_gradients(p, x, voxels, b, 7, 42, absolute);
    ASSERT_EQ(batched.size(), 3u);
    for (std::size_t k = 0; k < voxels.size(); ++k) {
      AttributionRecord ref = integrated_gradients(encoder_voxel_model(p, voxels[k]), x,
                                                   baseline_sequence(b, 5), 7, absolute);
      EXPECT_EQ(batched[k].voxel_id, voxels[k]);
      EXPECT_EQ(batched[k].image_id, 42);
      EXPECT_NEAR(batched[k].prediction, ref.prediction, 1e-12);
      EXPECT_NEAR(batched[k].baseline_prediction, ref.baseline_prediction, 1e-12);
      EXPECT_NEAR(batched[k].completeness_gap, ref.completeness_gap, 1e-10);
      for (int j = 0; j < 5; ++j) EXPECT_NEAR(batched[k].scores[j], ref.scores[j], 1e-10);
    }
  }
}

TEST(IntegratedGradientsTest, ChunkedPathAgreesAcrossStepCounts) {
  // Enough path points to span several internal chunks.
  EncoderConfig c = small_encoder();
  c.n_voxels = 1;
  EncoderParams p = init_params(c, 8);
  std::mt19937_64 rng(9);
  Matrix x = random_matrix(4, 6, rng);
  BaselineToken b{random_matrix(1, 6, rng), "test"};
  std::vector<int> voxels = {0};
  auto fast = integrated_gradients(p, x, voxels, b, 5000)[0];
  auto ref = integrated_gradients(encoder_voxel_model(p, 0), x, baseline_sequence(b, 4), 5000);
  for (int j = 0; j < 4; ++j) EXPECT_NEAR(fast.scores[j], ref.scores[j], 1e-10);
  auto coarse = integrated_gradients(p, x, voxels, b, 10)[0];
  EXPECT_LT(fast.completeness_gap, coarse.completeness_gap);
}

TEST(IntegratedGradientsTest, RecordJsonRoundTrip) {
  AttributionRecord r{3, 17, {0.5, -0.25}, 1.0, 0.25, 1e-3, 10};
  AttributionRecord back = attribution_from_json(to_json(r));
  EXPECT_EQ(back.scores, r.scores);
  EXPECT_EQ(back.image_id, 17);
  EXPECT_EQ(back.completeness_gap, 1e-3);
}

TEST(IntegratedGradientsTest, RejectsBadStepCount) {
  DifferentiableModel probe = linear_probe(Matrix::Ones(1, 2), 0.0);
  EXPECT_THROW(integrated_gradients(probe, Matrix::Ones(2, 2), Matrix::Zero(2, 2), 0),
               ConfigError);
}

TEST(TopKTest, HandCases) {
  std::vector<double> s = {3, 1, 2};
  EXPECT_EQ(top_k_tokens(s, 2), (std::vector<int>{0, 2}));
  EXPECT_EQ(top_k_tokens(s, 3), (std::vector<int>{0, 2, 1}));
  EXPECT_EQ(top_k_tokens(s, 1, Selection::kLowest), (std::vector<int>{1}));
  std::vector<double> ties = {1, 2, 2, 1};
  EXPECT_EQ(top_k_tokens(ties, 2), (std::vector<int>{1, 2}));
  EXPECT_EQ(top_k_tokens(ties, 1, Selection::kLowest), (std::vector<int>{0}));
  EXPECT_THROW(top_k_tokens(s, 4), DimensionError);
}

TEST(TopKTest, MatchesFullSortOracle) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> len(1, 40);
  std::uniform_int_distribution<int> level(0, 9);
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> s(len(rng));
    for (double& x : s) x = level(rng);  // coarse values force ties
    std::uniform_int_distribution<int> pick(0, static_cast<int>(s.size()));
    const int k = pick(rng);
    std::vector<std::pair<double, int>> keyed;
    for (int j = 0; j < static_cast<int>(s.size()); ++j) keyed.push_back({-s[j], j});
    std::sort(keyed.begin(), keyed.end());
    std::vector<int> expected;
    for (int a = 0; a < k; ++a) expected.push_back(keyed[a].second);
    ASSERT_EQ(top_k_tokens(s, k), expected);
  }
}

TEST(TopKTest, RandomSelectionIsSeededAndNested) {
  std::vector<double> s(20, 0.0);
  auto a = top_k_tokens(s, 8, Selection::kRandom, 5);
  EXPECT_EQ(a, top_k_tokens(s, 8, Selection::kRandom, 5));
  auto small = top_k_tokens(s, 3, Selection::kRandom, 5);
  EXPECT_TRUE(std::equal(small.begin(), small.end(), a.begin()));
  EXPECT_NE(a, top_k_tokens(s, 8, Selection::kRandom, 6));
  std::set<int> unique(a.begin(), a.end());
  EXPECT_EQ(unique.size(), 8u);
}

struct PatchSetup {
  EncoderParams params;
  std::vector<Matrix> tokens;
  Matrix targets;
  std::vector<Matrix> scores;
  BaselineToken baseline;
};

// Targets are the model's own predictions plus noise, so R̄² is positive.
PatchSetup patch_setup() {
  PatchSetup s;
  s.params = init_params(small_encoder(), 12);
  std::mt19937_64 rng(13);
  s.baseline = {random_matrix(1, 6, rng), "test"};
  for (int i = 0; i < 12; ++i) s.tokens.push_back(random_matrix(5, 6, rng));
  std::vector<int> rows(12);
  std::iota(rows.begin(), rows.end(), 0);
  s.targets = predict_rows(s.params, s.tokens, rows) + 0.05 * random_matrix(12, 4, rng);
  for (int i = 0; i < 12; ++i) s.scores.push_back(random_matrix(4, 5, rng));
  return s;
}

TEST(PatchEvalTest, EmptyNecessityPatchIsExactlyNeutral) {
  PatchSetup s = patch_setup();
  PatchResult r = patch_eval(s.params, s.tokens, s.targets, s.scores, s.baseline, 0,
                             PatchMode::kNecessity, Selection::kTop, 1);
  EXPECT_EQ(r.ratio, 1.0);
  EXPECT_GT(r.mean_r2, 0.5);
}

TEST(PatchEvalTest, FullNecessityEqualsEmptySufficiency) {
  PatchSetup s = patch_setup();
  PatchResult a = patch_eval(s.params, s.tokens, s.targets, s.scores, s.baseline, 5,
                             PatchMode::kNecessity, Selection::kTop, 1);
  PatchResult b = patch_eval(s.params, s.tokens, s.targets, s.scores, s.baseline, 0,
                             PatchMode::kSufficiency, Selection::kRandom, 2);
  EXPECT_NEAR(a.ratio, b.ratio, 1e-12);
  EXPECT_LT(a.ratio, 1.0);
}

TEST(PatchEvalTest, PatchingBaselineTokensIsNeutral) {
  PatchSetup s = patch_setup();
  for (int i = 0; i < 12; ++i) {
    s.tokens[i].row(1) = s.baseline.values;
    s.tokens[i].row(3) = s.baseline.values;
    s.scores[i].col(1).setConstant(10.0);
    s.scores[i].col(3).setConstant(9.0);
  }
  PatchResult r = patch_eval(s.params, s.tokens, s.targets, s.scores, s.baseline, 2,
                             PatchMode::kNecessity, Selection::kTop, 1);
  EXPECT_NEAR(r.ratio, 1.0, 1e-9);
}

TEST(PatchEvalTest, RandomCurvesReproducePerSeed) {
  PatchSetup s = patch_setup();
  std::vector<int> ks = {1, 2, 4};
  PatchCurve a = patch_curve(s.params, s.tokens, s.targets, s.scores, s.baseline, ks,
                             PatchMode::kNecessity, Selection::kRandom, 7);
  PatchCurve b = patch_curve(s.params, s.tokens, s.targets, s.scores, s.baseline, ks,
                             PatchMode::kNecessity, Selection::kRandom, 7, 3);
  ASSERT_EQ(a.points.size(), 3u);
  for (int p = 0; p < 3; ++p) {
    EXPECT_EQ(a.points[p].ratio, b.points[p].ratio);
    EXPECT_EQ(a.points[p].k, ks[p]);
  }
  PatchCurve c = patch_curve(s.params, s.tokens, s.targets, s.scores, s.baseline, ks,
                             PatchMode::kNecessity, Selection::kRandom, 8);
  EXPECT_NE(a.points[1].ratio, c.points[1].ratio);
  std::vector<int> bad = {2, 2};
  EXPECT_THROW(patch_curve(s.params, s.tokens, s.targets, s.scores, s.baseline, bad,
                           PatchMode::kNecessity, Selection::kTop, 1),
               ConfigError);
}

TEST(PatchEvalTest, RejectsOversizedK) {
  PatchSetup s = patch_setup();
  EXPECT_THROW(patch_eval(s.params, s.tokens, s.targets, s.scores, s.baseline, 6,
                          PatchMode::kNecessity, Selection::kTop, 1),
               DimensionError);
}

}  // namespace
}  // namespace voxlens
