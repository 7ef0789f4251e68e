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

#include "voxlens/synth_world.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

namespace voxlens {
namespace {

TEST(BuildDictionaryTest, OrthonormalGramIsIdentity) {
  FeatureDictionary dict = build_dictionary(8, 8, 3, /*orthonormalize=*/true);
  Matrix gram = dict.directions * dict.directions.transpose();
  EXPECT_LE((gram - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_TRUE(dict.orthonormalized);
}

TEST(BuildDictionaryTest, RowsAreUnitAndNamesUnique) {
  FeatureDictionary dict = build_dictionary(40, 16, 9, false);
  for (int i = 0; i < dict.n_features; ++i)
    EXPECT_NEAR(dict.directions.row(i).norm(), 1.0, 1e-9);
  std::set<std::string> names(dict.names.begin(), dict.names.end());
  EXPECT_EQ(names.size(), 40u);
}

TEST(BuildDictionaryTest, CoherenceMatchesPairwiseBruteForce) {
  FeatureDictionary dict = build_dictionary(64, 64, 11, false);
  double brute = 0.0;
  int pairs = 0;
  for (int i = 0; i < 64; ++i) {
    for (int j = i + 1; j < 64; ++j) {
      double dot = 0.0, ni = 0.0, nj = 0.0;
      for (int d = 0; d < 64; ++d) {
        dot += dict.directions(i, d) * dict.directions(j, d);
        ni += dict.directions(i, d) * dict.directions(i, d);
        nj += dict.directions(j, d) * dict.directions(j, d);
      }
      brute = std::max(brute, std::abs(dot) / std::sqrt(ni * nj));
      ++pairs;
    }
  }
  EXPECT_EQ(pairs, 2016);
  EXPECT_NEAR(max_abs_coherence(dict), brute, 1e-12);
  EXPECT_GT(brute, 0.0);
}

TEST(BuildDictionaryTest, AcceptsWideTokens) {
  FeatureDictionary dict = build_dictionary(64, 4096, 5, true);
  EXPECT_EQ(dict.directions.cols(), 4096);
  Matrix gram = dict.directions * dict.directions.transpose();
  EXPECT_LE((gram - Matrix::Identity(64, 64)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(BuildDictionaryTest, RejectsOvercompleteOrthonormalization) {
  EXPECT_THROW(build_dictionary(10, 4, 1, true), DimensionError);
}

TEST(BuildDictionaryTest, DeterministicPerSeed) {
  FeatureDictionary a = build_dictionary(16, 16, 42, true);
  FeatureDictionary b = build_dictionary(16, 16, 42, true);
  FeatureDictionary c = build_dictionary(16, 16, 43, true);
  EXPECT_EQ(a.directions, b.directions);
  EXPECT_NE(a.directions, c.directions);
}

WorldConfig small_config() {
  WorldConfig c;
  c.n_features = 16;
  c.token_dim = 16;
  c.seq_len = 8;
  c.n_images = 50;
  c.n_voxels = 10;
  return c;
}

TEST(SampleStimulusTest, SingleFeatureCase) {
  WorldConfig c = small_config();
  c.k_min = c.k_max = 1;
  c.seq_len = 4;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    StimulusSpec s = sample_stimulus(c, 0, seed);
    ASSERT_EQ(s.feature_set.size(), 1u);
    EXPECT_EQ(s.seq_len(), 4);
    EXPECT_GE(s.token_count(s.feature_set[0]), 1);
    for (int a : s.token_assignment)
      EXPECT_TRUE(a == kBackground || a == s.feature_set[0]);
    s.validate(c.n_features);
  }
}

TEST(SampleStimulusTest, SaturationIsBijection) {
  WorldConfig c = small_config();
  c.k_min = c.k_max = c.seq_len;
  StimulusSpec s = sample_stimulus(c, 3, 77);
  std::set<int> seen(s.token_assignment.begin(), s.token_assignment.end());
  EXPECT_EQ(seen.size(), static_cast<std::size_t>(c.seq_len));
  EXPECT_EQ(seen.count(kBackground), 0u);
  EXPECT_EQ(std::vector<int>(seen.begin(), seen.end()), s.feature_set);
}

TEST(SampleStimulusTest, FeatureCountIsUniform) {
  WorldConfig c = small_config();
  c.k_min = 2;
  c.k_max = 5;
  std::vector<int> hist(4, 0);
  const int n = 10000;
  for (int i = 0; i < n; ++i)
    ++hist[sample_stimulus(c, i, derive_seed(1, "chi", i)).feature_set.size() - 2];
  double chi2 = 0.0;
  const double expected = n / 4.0;
  for (int h : hist) chi2 += (h - expected) * (h - expected) / expected;
  // Upper 1% point of chi-square with 3 degrees of freedom.
  EXPECT_LT(chi2, 11.345);
}

TEST(SampleStimulusTest, RejectsTooFewTokens) {
  WorldConfig c = small_config();
  c.seq_len = 3;
  c.k_min = 4;
  c.k_max = 5;
  EXPECT_THROW(sample_stimulus(c, 0, 1), ConfigError);
}

TEST(RenderStimulusTest, NoiselessSingleFeatureRowsEqualDirection) {
  FeatureDictionary dict = build_dictionary(8, 8, 2, true);
  StimulusSpec s{0, {5}, std::vector<int>(6, 5)};
  TokenMatrix t = render_stimulus(s, dict, 0.0, 1);
  for (int j = 0; j < 6; ++j) EXPECT_EQ(t.values.row(j), dict.directions.row(5));
}

TEST(RenderStimulusTest, NoiselessArgmaxRecoversAssignment) {
  WorldConfig c = small_config();
  FeatureDictionary dict = build_dictionary(16, 16, 4, true);
  for (int i = 0; i < 20; ++i) {
    StimulusSpec s = sample_stimulus(c, i, i);
    TokenMatrix t = render_stimulus(s, dict, 0.0, i);
    Matrix proj = t.values * dict.directions.transpose();
    for (int j = 0; j < s.seq_len(); ++j) {
      const int f = s.token_assignment[j];
      if (f == kBackground) {
        EXPECT_EQ(t.values.row(j).norm(), 0.0);
        continue;
      }
      Eigen::Index best;
      proj.row(j).maxCoeff(&best);
      EXPECT_EQ(best, f);
      // One coordinate equal to 1, all others 0.
      for (int k = 0; k < 16; ++k)
        EXPECT_NEAR(proj(j, k), k == f ? 1.0 : 0.0, 1e-9);
    }
  }
}

TEST(RenderStimulusTest, DeterministicPerSeed) {
  WorldConfig c = small_config();
  FeatureDictionary dict = build_dictionary(16, 16, 4, true);
  StimulusSpec s = sample_stimulus(c, 0, 8);
  EXPECT_EQ(render_stimulus(s, dict, 0.1, 5).values,
            render_stimulus(s, dict, 0.1, 5).values);
  EXPECT_NE(render_stimulus(s, dict, 0.1, 5).values,
            render_stimulus(s, dict, 0.1, 6).values);
}

TEST(RenderStimulusTest, NoisyRecoveryMatchesMonteCarlo) {
  WorldConfig c;
  c.seq_len = 32;
  FeatureDictionary dict = build_dictionary(64, 64, 10, true);
  long hits = 0, total = 0;
  for (int i = 0; total < 100000; ++i) {
    StimulusSpec s = sample_stimulus(c, i, derive_seed(3, "stim", i));
    TokenMatrix t = render_stimulus(s, dict, 0.1, derive_seed(3, "render", i));
    Matrix proj = t.values * dict.directions.transpose();
    for (int j = 0; j < s.seq_len(); ++j) {
      if (s.token_assignment[j] == kBackground) continue;
      Eigen::Index best;
      proj.row(j).maxCoeff(&best);
      hits += best == s.token_assignment[j];
      ++total;
    }
  }
  // Independent construction: direction + isotropic noise, argmax decode.
  std::mt19937_64 rng(99);
  std::normal_distribution<double> noise(0.0, 0.1);
  std::uniform_int_distribution<int> pick(0, 63);
  long oracle_hits = 0;
  const long trials = 100000;
  for (long n = 0; n < trials; ++n) {
    const int f = pick(rng);
    RowVector tok = dict.directions.row(f);
    for (int d = 0; d < 64; ++d) tok(d) += noise(rng);
    Eigen::Index best;
    (tok * dict.directions.transpose()).maxCoeff(&best);
    oracle_hits += best == f;
  }
  EXPECT_NEAR(static_cast<double>(hits) / total,
              static_cast<double>(oracle_hits) / trials, 0.01);
}

TEST(VoxelResponseTest, NoiselessHitAndMiss) {
  StimulusSpec s{0, {1, 4}, {1, 4, kBackground}};
  VoxelSpec hit{0, {4}, 1.0, 0.0, 0.0, 1};
  VoxelSpec miss{1, {2}, 1.0, 0.2, 0.0, 1};
  EXPECT_EQ(voxel_response(hit, s, 1), 1.0);
  EXPECT_EQ(voxel_response(miss, s, 1), 0.2);
}

TEST(VoxelResponseTest, RepAveragedMomentsMatchClosedForm) {
  // Dense stimuli keep the hit probability near 1/2, where the sampling
  // error of the variance estimate is smallest.
  WorldConfig c;
  c.n_reps = 3;
  c.k_min = 8;
  c.k_max = 16;
  VoxelSpec v{0, {3, 10, 41}, 1.0, 0.1, 0.3, 3};
  const double p = hit_probability(c, 3);
  const int n = 50000;
  std::vector<double> avg(n);
  for (int i = 0; i < n; ++i) {
    StimulusSpec s = sample_stimulus(c, i, derive_seed(5, "img", i));
    double sum = 0.0;
    for (int r = 0; r < 3; ++r) sum += voxel_response(v, s, derive_seed(5, "rep", 3 * i + r));
    avg[i] = sum / 3.0;
  }
  double mean = 0.0;
  for (double a : avg) mean += a;
  mean /= n;
  double var = 0.0;
  for (double a : avg) var += (a - mean) * (a - mean);
  var /= (n - 1);
  const double mean_expected = v.gain * p + v.baseline;
  const double var_expected = v.gain * v.gain * p * (1 - p) + 0.09 / 3.0;
  EXPECT_NEAR(mean, mean_expected, 0.02 * mean_expected);
  EXPECT_NEAR(var, var_expected, 0.02 * var_expected);
}

TEST(HitProbabilityTest, MatchesSampling) {
  WorldConfig c;
  const int n = 40000;
  int hits = 0;
  VoxelSpec v{0, {0, 1}, 1.0, 0.0, 0.0, 1};
  for (int i = 0; i < n; ++i)
    hits += v.detects(sample_stimulus(c, i, derive_seed(8, "hp", i)));
  EXPECT_NEAR(static_cast<double>(hits) / n, hit_probability(c, 2), 0.006);
}

Matrix simulate_trials(double gain, double p, double sd, int n_images, int n_reps,
                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution hit(p);
  std::normal_distribution<double> noise(0.0, sd);
  Matrix out(n_images, n_reps);
  for (int i = 0; i < n_images; ++i) {
    const double signal = hit(rng) ? gain : 0.0;
    for (int r = 0; r < n_reps; ++r) out(i, r) = signal + (sd > 0 ? noise(rng) : 0.0);
  }
  return out;
}

TEST(NoiseCeilingTest, NoiselessVoxelIsOne) {
  EXPECT_EQ(noise_ceiling(simulate_trials(1.0, 0.3, 0.0, 500, 3, 1)), 1.0);
}

TEST(NoiseCeilingTest, PureNoiseVoxelIsNearZero) {
  EXPECT_NEAR(noise_ceiling(simulate_trials(0.0, 0.5, 0.5, 1000, 3, 2)), 0.0, 0.05);
}

TEST(NoiseCeilingTest, MatchesSignalDetectionVariance) {
  // 0.25 / (0.25 + 0.25 / 3) = 0.75.
  EXPECT_NEAR(noise_ceiling(simulate_trials(1.0, 0.5, 0.5, 2000, 3, 3)), 0.75, 0.03);
}

TEST(NoiseCeilingTest, RequiresRepetitions) {
  EXPECT_THROW(noise_ceiling(Matrix::Ones(10, 1)), InsufficientDataError);
  EXPECT_THROW(noise_ceiling(Matrix::Ones(1, 3)), InsufficientDataError);
}

TEST(NoiseCeilingTest, ScaleEquivariant) {
  Matrix trials = simulate_trials(1.0, 0.4, 0.7, 300, 3, 4);
  const double base = noise_ceiling(trials);
  for (double c : {0.01, 3.0, 250.0})
    EXPECT_NEAR(noise_ceiling(trials * c), base, 1e-9);
}

TEST(WorldTest, TargetNoiseCeilingIsReached) {
  WorldConfig c;
  c.n_images = 2000;
  c.n_voxels = 20;
  c.critical_min = 2;
  c.target_noise_ceiling = 0.6;
  World w = generate_world(c);
  std::vector<double> nc = noise_ceilings(simulate_responses(w));
  double mean = 0.0;
  for (double x : nc) mean += x;
  EXPECT_NEAR(mean / nc.size(), 0.6, 0.06);
}

TEST(WorldTest, NoiselessDiscriminabilityEqualsGain) {
  WorldConfig c;
  c.n_images = 400;
  c.n_voxels = 5;
  c.trial_noise_sd = 0.0;
  World w = generate_world(c);
  ResponseCube cube = simulate_responses(w);
  for (int v = 0; v < 5; ++v) {
    double hit = 0.0, miss = 0.0;
    int n_hit = 0, n_miss = 0;
    for (int i = 0; i < c.n_images; ++i) {
      if (w.voxels[v].detects(w.stimuli[i])) {
        hit += cube.mean(i, v);
        ++n_hit;
      } else {
        miss += cube.mean(i, v);
        ++n_miss;
      }
    }
    ASSERT_GT(n_hit, 0);
    EXPECT_NEAR(hit / n_hit - miss / n_miss, w.voxels[v].gain, 1e-12);
  }
}

TEST(WorldTest, JsonRoundTripRegeneratesWorld) {
  WorldConfig c = small_config();
  World w = generate_world(c);
  World back = world_from_json(world_to_json(w));
  EXPECT_EQ(back.dictionary.directions, w.dictionary.directions);
  ASSERT_EQ(back.stimuli.size(), w.stimuli.size());
  for (std::size_t i = 0; i < w.stimuli.size(); ++i) {
    EXPECT_EQ(back.stimuli[i].feature_set, w.stimuli[i].feature_set);
    EXPECT_EQ(back.stimuli[i].token_assignment, w.stimuli[i].token_assignment);
  }
  for (const StimulusSpec& s : w.stimuli) s.validate(c.n_features);
}

}  // namespace
}  // namespace voxlens
