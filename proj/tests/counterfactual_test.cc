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

#include "voxlens/counterfactual.h"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace voxlens {
namespace {

// Two-sample Kolmogorov–Smirnov p-value (asymptotic).
double ks_p_value(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
  }
  const double n = static_cast<double>(a.size() * b.size()) / (a.size() + b.size());
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k) p += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

struct Fixture {
  World world;
  std::vector<Matrix> tokens;
  EncoderParams params;
  EvalContext ctx;
};

std::unique_ptr<Fixture> make_fixture(WorldConfig wc, std::uint64_t model_seed = 3) {
  auto f = std::make_unique<Fixture>();
  f->world = generate_world(wc);
  for (auto& t : render_world(f->world)) f->tokens.push_back(t.values);
  EncoderConfig ec;
  ec.token_dim = wc.token_dim;
  ec.model_dim = 8;
  ec.n_heads = 2;
  ec.ffn_expansion = 2;
  ec.n_voxels = wc.n_voxels;
  f->params = init_params(ec, model_seed);
  f->ctx.params = &f->params;
  f->ctx.dictionary = &f->world.dictionary;
  f->ctx.token_noise_sd = wc.token_noise_sd;
  f->ctx.stimuli = f->world.stimuli;
  f->ctx.tokens = f->tokens;
  f->ctx.validate();
  return f;
}

WorldConfig small_world() {
  WorldConfig wc;
  wc.n_features = 10;
  wc.token_dim = 10;
  wc.seq_len = 8;
  wc.n_images = 40;
  wc.n_voxels = 3;
  wc.k_min = 2;
  wc.k_max = 4;
  wc.token_noise_sd = 0.0;
  wc.trial_noise_sd = 0.0;
  return wc;
}

TEST(QuantileTest, LinearInterpolation) {
  std::vector<double> v = {4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(quantile(v, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(quantile(v, 0.9), 3.7);
  EXPECT_EQ(quantile(v, 0.0), 1.0);
  EXPECT_EQ(quantile(v, 1.0), 4.0);
  EXPECT_THROW(quantile(std::vector<double>{}, 0.5), InsufficientDataError);
}

TEST(PreferenceTest, OverlappingQuantilesRejected) {
  std::vector<double> r = {1, 2, 3};
  std::vector<std::int64_t> ids = {0, 1, 2};
  EXPECT_THROW(select_preference(r, ids, 0, 0.5, 0.5), ConfigError);
  std::vector<double> flat = {1, 1, 1};
  EXPECT_THROW(select_preference(flat, ids, 0), InsufficientDataError);
}

TEST(PreferenceTest, MatchesSortOracle) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> len(5, 60);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = len(rng);
    std::vector<double> r(n);
    std::vector<std::int64_t> ids(n);
    for (int i = 0; i < n; ++i) {
      r[i] = normal(rng);
      ids[i] = 100 + i;
    }
    std::vector<double> sorted = r;
    std::sort(sorted.begin(), sorted.end());
    auto oracle_q = [&](double q) {
      const double pos = (n - 1) * q;
      const int lo = static_cast<int>(pos);
      return lo + 1 < n ? sorted[lo] + (pos - lo) * (sorted[lo + 1] - sorted[lo]) : sorted[lo];
    };
    const double hi = oracle_q(0.9), lo = oracle_q(0.1);
    std::vector<std::int64_t> pref, non;
    for (int i = 0; i < n; ++i) {
      if (r[i] >= hi) pref.push_back(ids[i]);
      if (r[i] <= lo) non.push_back(ids[i]);
    }
    PreferenceSplit s = select_preference(r, ids, 7);
    ASSERT_EQ(s.preferred, pref);
    ASSERT_EQ(s.non_preferred, non);
  }
}

TEST(PreferenceTest, NoiselessVoxelSeparatesHits) {
  WorldConfig wc;
  wc.n_images = 500;
  wc.trial_noise_sd = 0.0;
  wc.critical_min = 3;
  World w = generate_world(wc);
  ResponseCube cube = simulate_responses(w);
  Matrix means = cube.means();
  int checked = 0;
  for (const VoxelSpec& v : w.voxels) {
    std::vector<double> r;
    std::vector<std::int64_t> ids, hits;
    for (const auto& s : w.stimuli) {
      r.push_back(means(s.image_id, v.voxel_id));
      ids.push_back(s.image_id);
      if (v.detects(s)) hits.push_back(s.image_id);
    }
    if (hits.size() < 0.15 * ids.size()) continue;
    PreferenceSplit split = select_preference(r, ids, v.voxel_id);
    EXPECT_EQ(split.preferred, hits);
    for (auto id : split.non_preferred) EXPECT_FALSE(v.detects(w.stimuli[id]));
    ++checked;
  }
  EXPECT_GT(checked, 10);
}

StimulusSpec hand_stimulus(std::vector<int> features, std::vector<int> assignment) {
  StimulusSpec s;
  s.image_id = 0;
  s.feature_set = std::move(features);
  s.token_assignment = std::move(assignment);
  return s;
}

TEST(EditTest, LeastPopulatedRuleWalkthrough) {
  StimulusSpec s = hand_stimulus({0, 1}, {0, 0, 1, 1});
  StimulusSpec e = edit_stimulus(s, {EditKind::kAdd, {2}, 0, 0}, 4);
  EXPECT_EQ(e.token_assignment, (std::vector<int>{0, 2, 1, 1}));
  EXPECT_EQ(e.feature_set, (std::vector<int>{0, 1, 2}));
  // Background is consumed first, lowest position first.
  StimulusSpec b = hand_stimulus({1}, {kBackground, 1, kBackground, 1});
  EXPECT_EQ(edit_stimulus(b, {EditKind::kAdd, {3}, 0, 0}, 4).token_assignment,
            (std::vector<int>{3, 1, kBackground, 1}));
  // No position left to give.
  StimulusSpec full = hand_stimulus({0, 1}, {0, 1});
  EXPECT_THROW(edit_stimulus(full, {EditKind::kAdd, {2}, 0, 0}, 4), DimensionError);
}

TEST(EditTest, RoundTripAndPreconditions) {
  WorldConfig wc = small_world();
  World w = generate_world(wc);
  for (const StimulusSpec& s : w.stimuli) {
    const int f = s.feature_set.front();
    StimulusSpec removed = edit_stimulus(s, {EditKind::kRemove, {f}, s.image_id, 0}, 10);
    EXPECT_EQ(removed.token_count(f), 0);
    StimulusSpec back = edit_stimulus(removed, {EditKind::kAdd, {f}, s.image_id, 0}, 10);
    EXPECT_EQ(back.feature_set, s.feature_set);
    EXPECT_THROW(edit_stimulus(back, {EditKind::kAdd, {f}, s.image_id, 0}, 10), ConfigError);
    EXPECT_THROW(edit_stimulus(removed, {EditKind::kRemove, {f}, s.image_id, 0}, 10), ConfigError);
    EXPECT_THROW(edit_stimulus(s, {EditKind::kRemove, s.feature_set, s.image_id, 0}, 10),
                 ConfigError);
  }
}

TEST(EditTest, EditedRenderMatchesDirectConstruction) {
  auto f = make_fixture(small_world());
  const StimulusSpec& s = f->world.stimuli[5];
  int absent = 0;
  while (s.contains(absent)) ++absent;
  EditOp op{EditKind::kAdd, {absent}, 5, 99};
  EditedStimulus e = apply_edit(s, op, f->world.dictionary, 0.0);
  StimulusSpec direct = hand_stimulus(e.spec.feature_set, e.spec.token_assignment);
  Matrix tokens = render_stimulus(direct, f->world.dictionary, 0.0, 1234).values;
  for (int v = 0; v < 3; ++v)
    EXPECT_NEAR(f->ctx.predict(e.tokens.values, v), f->ctx.predict(tokens, v), 1e-12);
  EXPECT_THROW(apply_edit(s, {EditKind::kAdd, {absent}, 6, 0}, f->world.dictionary, 0.0),
               ConfigError);
}

TEST(FaithfulnessTest, CompleteTransferIsOne) {
  auto f = make_fixture(small_world());
  // Adding feature 2 to x' claims round(8 / 3) = 3 background positions, so
  // x' ∪ f has x's token multiset.
  std::vector<StimulusSpec> stimuli = {hand_stimulus({1, 2}, {1, 2, 2, 2, kBackground, kBackground, kBackground, kBackground}),
                                       hand_stimulus({1}, {1, kBackground, kBackground, kBackground, kBackground, kBackground, kBackground, kBackground})};
  stimuli[1].image_id = 1;
  std::vector<Matrix> renders;
  for (const auto& s : stimuli) renders.push_back(render_stimulus(s, f->world.dictionary, 0.0, 0).values);
  EvalContext ctx = f->ctx;
  ctx.stimuli = stimuli;
  ctx.tokens = renders;
  std::vector<int> feature = {2};
  FaithfulnessRecord r = faithfulness(ctx, 0, 0, 1, feature, 1e-6, 5, "critical");
  ASSERT_FALSE(r.skipped);
  EXPECT_NEAR(r.value, 1.0, 1e-12);
}

TEST(FaithfulnessTest, BlindFeatureGivesZero) {
  auto f = make_fixture(small_world());
  const int blind = 4;
  RowVector d = f->world.dictionary.directions.row(blind);
  Matrix project = Matrix::Identity(10, 10) - d.transpose() * d;
  f->params.key = project * f->params.key;
  f->params.value = project * f->params.value;
  int tested = 0;
  for (const auto& x : f->world.stimuli) {
    if (!x.contains(blind)) continue;
    for (const auto& xp : f->world.stimuli) {
      if (xp.contains(blind)) continue;
      if (std::count(xp.token_assignment.begin(), xp.token_assignment.end(), kBackground) < 2) continue;
      std::vector<int> feature = {blind};
      FaithfulnessRecord r = faithfulness(f->ctx, 1, x.image_id, xp.image_id, feature, 1e-9, 3, "c");
      if (r.skipped) continue;
      EXPECT_NEAR(r.numerator, 0.0, 1e-12);
      ++tested;
      break;
    }
  }
  EXPECT_GT(tested, 0);
}

TEST(FaithfulnessTest, GuardSkipsTinyDenominators) {
  auto f = make_fixture(small_world());
  std::vector<int> feature = {1};
  FaithfulnessRecord r = faithfulness(f->ctx, 0, 2, 3, feature, 1e9, 1, "critical");
  EXPECT_TRUE(r.skipped);
  EXPECT_TRUE(std::isnan(r.value));
  EXPECT_TRUE(to_json(r)["value"].is_null());
  FaithfulnessRecord same = faithfulness(f->ctx, 0, 2, 2, feature, 0.0, 1, "critical");
  EXPECT_TRUE(same.skipped);
}

TEST(FaithfulnessTest, RandomSingleInsertionMeanMatchesExhaustive) {
  auto f = make_fixture(small_world(), 21);
  const StimulusSpec* x = nullptr;
  const StimulusSpec* xp = nullptr;
  for (const auto& a : f->world.stimuli) {
    for (const auto& b : f->world.stimuli) {
      std::vector<int> diff;
      for (int g : a.feature_set)
        if (!b.contains(g)) diff.push_back(g);
      if (diff.size() >= 3 && std::abs(f->ctx.predict_image(a.image_id, 0) - f->ctx.predict_image(b.image_id, 0)) > 0.05) {
        x = &a;
        xp = &b;
        break;
      }
    }
    if (x) break;
  }
  ASSERT_NE(x, nullptr);
  std::vector<int> diff;
  for (int g : x->feature_set)
    if (!xp->contains(g)) diff.push_back(g);
  double exhaustive = 0.0;
  for (int g : diff) {
    std::vector<int> one = {g};
    exhaustive += faithfulness(f->ctx, 0, x->image_id, xp->image_id, one, 0.0, 0, "e").value;
  }
  exhaustive /= diff.size();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(diff.size()) - 1);
  const int n = 4000;
  double sum = 0.0, sq = 0.0;
  for (int t = 0; t < n; ++t) {
    std::vector<int> one = {diff[pick(rng)]};
    const double v = faithfulness(f->ctx, 0, x->image_id, xp->image_id, one, 0.0, t, "r").value;
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt(std::max(sq / n - mean * mean, 0.0) / n);
  EXPECT_NEAR(mean, exhaustive, 4.0 * se + 1e-12);
}

TEST(ReconstructionTest, PureFillerMatchesDirectSimulation) {
  auto f = make_fixture(small_world());
  ReconstructionOptions opts;
  opts.n_samples = 600;
  opts.allow_empty = true;
  std::vector<DecodedSource> empty = {{Selection::kTop, {}}};
  auto records = reconstruction_eval(f->ctx, 1, 0, 0.3, empty, opts, 11);
  ASSERT_EQ(records.size(), 600u);
  std::vector<double> errors, direct;
  for (const auto& r : records) errors.push_back(r.error);
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> count(1, 3);
  for (int t = 0; t < 600; ++t) {
    std::vector<int> all(10);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(count(rng));
    StimulusSpec s = compose_stimulus(all, 8, -1, rng());
    Matrix x = render_stimulus(s, f->world.dictionary, 0.0, 0).values;
    direct.push_back(std::abs(f->ctx.predict(x, 1) - 0.3));
  }
  EXPECT_GT(ks_p_value(errors, direct), 0.01);
  opts.allow_empty = false;
  EXPECT_THROW(reconstruction_eval(f->ctx, 1, 0, 0.3, empty, opts, 11), InsufficientDataError);
}

TEST(ReconstructionTest, SamplesContainDecodedFeatures) {
  auto f = make_fixture(small_world());
  ReconstructionOptions opts;
  std::vector<DecodedSource> decoded = {{Selection::kTop, {2, 5}}, {Selection::kRandom, {7}}};
  auto records = reconstruction_eval(f->ctx, 0, 3, 1.0, decoded, opts, 4);
  ASSERT_EQ(records.size(), 10u);
  for (const auto& r : records) {
    const auto& d = r.source == Selection::kTop ? decoded[0].features : decoded[1].features;
    for (int g : d) EXPECT_TRUE(std::binary_search(r.features.begin(), r.features.end(), g));
    EXPECT_GE(r.features.size(), d.size() + 1);
    EXPECT_LE(r.features.size(), d.size() + 3);
    EXPECT_EQ(r.error, std::abs(r.predicted - 1.0));
  }
  auto again = reconstruction_eval(f->ctx, 0, 3, 1.0, decoded, opts, 4);
  for (std::size_t i = 0; i < records.size(); ++i) EXPECT_EQ(again[i].predicted, records[i].predicted);
}

TEST(DiscriminabilityTest, IdenticalDecodesAreIndistinguishable) {
  auto f = make_fixture(small_world());
  PreferenceSplit split;
  split.voxel_id = 2;
  std::map<std::int64_t, std::vector<int>> decoded;
  for (int i = 0; i < 40; ++i) {
    (i < 20 ? split.preferred : split.non_preferred).push_back(i);
    decoded[i] = {3, 8};
  }
  auto samples = discriminability_eval(f->ctx, split, decoded, 10, {}, 6);
  ASSERT_EQ(samples.size(), 400u);
  std::vector<double> a, b;
  for (const auto& s : samples) (s.preferred ? a : b).push_back(s.activation);
  EXPECT_GT(ks_p_value(a, b), 0.01);
  decoded[5].clear();
  EXPECT_THROW(discriminability_eval(f->ctx, split, decoded, 10, {}, 6), InsufficientDataError);
}

TEST(DiscriminabilityTest, SeparationMatchesEnumeration) {
  WorldConfig wc = small_world();
  wc.n_features = 6;
  wc.token_dim = 6;
  wc.seq_len = 2;
  wc.k_min = 1;
  wc.k_max = 2;
  auto f = make_fixture(wc, 9);
  const int voxel = 0;
  auto predict_set = [&](std::vector<int> assignment) {
    StimulusSpec s;
    for (int a : assignment)
      if (a != kBackground) s.feature_set.push_back(a);
    std::sort(s.feature_set.begin(), s.feature_set.end());
    s.feature_set.erase(std::unique(s.feature_set.begin(), s.feature_set.end()), s.feature_set.end());
    s.token_assignment = assignment;
    return f->ctx.predict(render_stimulus(s, f->world.dictionary, 0.0, 0).values, voxel);
  };
  // Filler count uniform in {0, 1}; a lone feature's second position is the
  // feature or background with equal probability.
  auto expected = [&](int d) {
    double lone = 0.5 * predict_set({d, d}) + 0.5 * predict_set({d, kBackground});
    double pair = 0.0;
    for (int g = 0; g < 6; ++g)
      if (g != d) pair += predict_set({d, g}) / 5.0;
    return 0.5 * lone + 0.5 * pair;
  };
  PreferenceSplit split;
  split.voxel_id = voxel;
  split.preferred = {0, 1};
  split.non_preferred = {2, 3};
  std::map<std::int64_t, std::vector<int>> decoded = {{0, {1}}, {1, {4}}, {2, {0}}, {3, {5}}};
  const int n = 3000;
  auto samples = discriminability_eval(f->ctx, split, decoded, n, {0, 1}, 2);
  double pref = 0, non = 0, var = 0;
  for (const auto& s : samples) (s.preferred ? pref : non) += s.activation;
  pref /= 2 * n;
  non /= 2 * n;
  for (const auto& s : samples) {
    const double m = s.preferred ? pref : non;
    var += (s.activation - m) * (s.activation - m);
  }
  const double se = std::sqrt(var / samples.size() * (2.0 / (2 * n)));
  const double oracle = 0.5 * (expected(1) + expected(4)) - 0.5 * (expected(0) + expected(5));
  EXPECT_NEAR(pref - non, oracle, 4.0 * se);
}

TEST(EditRecordTest, RemoveAndAddSemantics) {
  auto f = make_fixture(small_world());
  const StimulusSpec& x = f->world.stimuli[0];
  std::vector<int> one = {x.feature_set[0]};
  auto rem = remove_edit(f->ctx, 1, 0, one, 3, "critical");
  ASSERT_TRUE(rem.has_value());
  EXPECT_EQ(rem->kind, EditKind::kRemove);
  EXPECT_EQ(rem->before, f->ctx.predict_image(0, 1));
  EXPECT_FALSE(remove_edit(f->ctx, 1, 0, x.feature_set, 3, "critical").has_value());
  EXPECT_FALSE(add_edit(f->ctx, 1, 0, one, 4, 3, "critical").has_value());
  int absent = 0;
  while (x.contains(absent)) ++absent;
  std::vector<int> mixed = {x.feature_set[0], absent};
  auto add = add_edit(f->ctx, 1, 0, mixed, 4, 3, "critical");
  ASSERT_TRUE(add.has_value());
  EXPECT_EQ(add->features, std::vector<int>{absent});
  EXPECT_EQ(add->reference_image, 4);
  auto again = add_edit(f->ctx, 1, 0, mixed, 4, 3, "critical");
  EXPECT_EQ(again->after, add->after);
}

FaithfulnessRecord trial(int voxel, std::int64_t image, std::vector<int> features, double value) {
  FaithfulnessRecord r;
  r.voxel_id = voxel;
  r.preferred_image = image;
  r.features = std::move(features);
  r.value = value;
  return r;
}

TEST(ProfileTest, UnanimousTrials) {
  std::vector<FaithfulnessRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(trial(2, i, {7}, 1.0));
  auto p = build_profile(recs);
  ASSERT_TRUE(p.has_value());
  EXPECT_EQ(p->features, std::vector<int>{7});
  EXPECT_EQ(p->weights, std::vector<double>{1.0});
  EXPECT_EQ(p->n_supporting_trials, 6);
  EXPECT_EQ(p->n_source_images, 6);
}

TEST(ProfileTest, MinimumTrialsAndQuartileCut) {
  std::vector<FaithfulnessRecord> recs = {trial(1, 0, {1}, 0.9), trial(1, 1, {2}, 0.8),
                                          trial(1, 2, {3}, 0.1), trial(1, 3, {4}, 0.2),
                                          trial(1, 4, {5}, 0.0), trial(1, 5, {6}, 0.3),
                                          trial(1, 6, {7}, 0.2), trial(1, 7, {8}, 0.1)};
  // Only two trials reach the upper quartile.
  EXPECT_FALSE(build_profile(recs).has_value());
  recs.push_back(trial(1, 8, {1, 9}, 1.4));
  recs.push_back(trial(1, 9, {9}, 0.85));
  recs.push_back(trial(1, 10, {9}, 0.8));
  recs.back().skipped = true;
  auto p = build_profile(recs);
  ASSERT_TRUE(p.has_value());
  EXPECT_EQ(p->n_supporting_trials, 3);
  // Survivors: {9} at 0.85, {1} at 0.9 and {1, 9} at 1.4. Both features
  // clamp to weight 1 with two trials each; the lower index ranks first.
  EXPECT_EQ(p->features, (std::vector<int>{1, 9}));
  EXPECT_EQ(p->weights, (std::vector<double>{1.0, 1.0}));
  std::vector<FaithfulnessRecord> mixed = {trial(1, 0, {1}, 1.0), trial(2, 0, {1}, 1.0)};
  EXPECT_THROW(build_profile(mixed), ConfigError);
}

TEST(ProfileTest, EmptyProfileIsNoOpEdit) {
  auto f = make_fixture(small_world());
  ProfileSpec empty;
  empty.voxel_id = 1;
  std::vector<std::int64_t> images = {0, 1, 2};
  ProfileEditResult r = profile_edit_eval(f->ctx, empty, images, 1);
  ASSERT_EQ(r.records.size(), 3u);
  for (const auto& e : r.records) EXPECT_EQ(e.change(), 0.0);
  ProfileSpec p;
  p.voxel_id = 1;
  p.features = {f->world.stimuli[0].feature_set[0], 9};
  ProfileEditResult q = profile_edit_eval(f->ctx, p, images, 1);
  EXPECT_GE(q.skipped_features, 1);
  EXPECT_EQ(q.records[0].condition, "profile");
}

}  // namespace
}  // namespace voxlens
