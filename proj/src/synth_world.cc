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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace voxlens {
namespace {

// k distinct values from [0, n) via a partial Fisher-Yates shuffle.
std::vector<int> choose_distinct(int n, int k, std::mt19937_64& rng) {
  std::vector<int> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

std::string feature_name(int index, int width) {
  std::string digits = std::to_string(index);
  if (static_cast<int>(digits.size()) < width)
    digits.insert(0, width - digits.size(), '0');
  return "feat_" + digits;
}

// One guaranteed position per feature, the rest uniform over the features
// and background.
void assign_positions(StimulusSpec& spec, int seq_len, std::mt19937_64& rng) {
  const int k = static_cast<int>(spec.feature_set.size());
  std::vector<int> positions(seq_len);
  std::iota(positions.begin(), positions.end(), 0);
  std::shuffle(positions.begin(), positions.end(), rng);
  spec.token_assignment.assign(seq_len, kBackground);
  for (int i = 0; i < k; ++i)
    spec.token_assignment[positions[i]] = spec.feature_set[i];
  // Category k stands for background.
  std::uniform_int_distribution<int> category(0, k);
  for (int i = k; i < seq_len; ++i) {
    const int c = category(rng);
    spec.token_assignment[positions[i]] =
        c == k ? kBackground : spec.feature_set[c];
  }
}

}  // namespace

FeatureDictionary build_dictionary(int n_features, int token_dim,
                                   std::uint64_t seed, bool orthonormalize) {
  if (n_features < 1 || token_dim < 1)
    throw DimensionError("dictionary needs n_features >= 1 and token_dim >= 1");
  if (orthonormalize && n_features > token_dim)
    throw DimensionError("cannot orthonormalize " + std::to_string(n_features) +
                         " directions in " + std::to_string(token_dim) +
                         " dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix raw(n_features, token_dim);
  for (int i = 0; i < n_features; ++i)
    for (int j = 0; j < token_dim; ++j) raw(i, j) = normal(rng);

  FeatureDictionary dict;
  dict.n_features = n_features;
  dict.token_dim = token_dim;
  dict.orthonormalized = orthonormalize;
  if (orthonormalize) {
    Eigen::MatrixXd columns = raw.transpose();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(columns);
    Eigen::MatrixXd q =
        qr.householderQ() * Eigen::MatrixXd::Identity(token_dim, n_features);
    dict.directions = q.transpose();
  } else {
    dict.directions = raw;
  }
  for (int i = 0; i < n_features; ++i)
    dict.directions.row(i) /= dict.directions.row(i).norm();

  const int width = static_cast<int>(std::to_string(n_features - 1).size());
  dict.names.reserve(n_features);
  for (int i = 0; i < n_features; ++i)
    dict.names.push_back(feature_name(i, width));
  return dict;
}

double max_abs_coherence(const FeatureDictionary& dictionary) {
  Vector norms = dictionary.directions.rowwise().norm();
  Matrix gram = dictionary.directions * dictionary.directions.transpose();
  double best = 0.0;
  for (Eigen::Index i = 0; i < gram.rows(); ++i)
    for (Eigen::Index j = i + 1; j < gram.cols(); ++j)
      best = std::max(best, std::abs(gram(i, j)) / (norms(i) * norms(j)));
  return best;
}

bool StimulusSpec::contains(int feature) const {
  return std::binary_search(feature_set.begin(), feature_set.end(), feature);
}

int StimulusSpec::token_count(int feature) const {
  return static_cast<int>(
      std::count(token_assignment.begin(), token_assignment.end(), feature));
}

void StimulusSpec::validate(int n_features) const {
  if (feature_set.empty())
    throw ConfigError("stimulus " + std::to_string(image_id) +
                      " has an empty feature set");
  if (!std::is_sorted(feature_set.begin(), feature_set.end()) ||
      std::adjacent_find(feature_set.begin(), feature_set.end()) !=
          feature_set.end())
    throw ConfigError("stimulus feature set must be sorted and unique");
  for (int f : feature_set) {
    if (f < 0 || f >= n_features)
      throw ConfigError("stimulus feature " + std::to_string(f) +
                        " outside dictionary");
    if (token_count(f) == 0)
      throw ConfigError("feature " + std::to_string(f) + " of stimulus " +
                        std::to_string(image_id) + " has no token position");
  }
  for (int a : token_assignment) {
    if (a != kBackground && !contains(a))
      throw ConfigError("token assigned to feature " + std::to_string(a) +
                        " not in the stimulus feature set");
  }
}

bool VoxelSpec::detects(const StimulusSpec& stimulus) const {
  return std::any_of(critical_set.begin(), critical_set.end(),
                     [&](int f) { return stimulus.contains(f); });
}

void WorldConfig::validate() const {
  if (n_features < 1 || token_dim < 1 || seq_len < 1 || n_images < 1 ||
      n_voxels < 1 || n_reps < 1)
    throw ConfigError("world counts must be positive");
  if (k_min < 1 || k_min > k_max || k_max > n_features)
    throw ConfigError("feature-count range must satisfy 1 <= k_min <= k_max <= n_features");
  if (k_max > seq_len)
    throw ConfigError("k_max = " + std::to_string(k_max) +
                      " features cannot each receive a token in seq_len = " +
                      std::to_string(seq_len));
  if (token_noise_sd < 0.0 || trial_noise_sd < 0.0)
    throw ConfigError("noise standard deviations must be non-negative");
  if (orthonormal && n_features > token_dim)
    throw ConfigError("orthonormal dictionary requires n_features <= token_dim");
  if (critical_min < 1 || critical_min > critical_cap || critical_cap > n_features)
    throw ConfigError("critical-set size range must satisfy 1 <= min <= cap <= n_features");
  if (gain_min <= 0.0 || gain_min > gain_max)
    throw ConfigError("voxel gains must be positive with gain_min <= gain_max");
  if (baseline_min > baseline_max)
    throw ConfigError("baseline_min must not exceed baseline_max");
  if (target_noise_ceiling < 0.0 || target_noise_ceiling >= 1.0)
    throw ConfigError("target_noise_ceiling must lie in [0, 1)");
}

nlohmann::json to_json(const WorldConfig& c) {
  return {
      {"n_features", c.n_features},
      {"token_dim", c.token_dim},
      {"seq_len", c.seq_len},
      {"n_images", c.n_images},
      {"n_voxels", c.n_voxels},
      {"k_min", c.k_min},
      {"k_max", c.k_max},
      {"token_noise_sd", c.token_noise_sd},
      {"orthonormal", c.orthonormal},
      {"critical_min", c.critical_min},
      {"critical_cap", c.critical_cap},
      {"gain_min", c.gain_min},
      {"gain_max", c.gain_max},
      {"baseline_min", c.baseline_min},
      {"baseline_max", c.baseline_max},
      {"trial_noise_sd", c.trial_noise_sd},
      {"target_noise_ceiling", c.target_noise_ceiling},
      {"n_reps", c.n_reps},
      {"seed", c.seed},
  };
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_features", c.n_features);
  get("token_dim", c.token_dim);
  get("seq_len", c.seq_len);
  get("n_images", c.n_images);
  get("n_voxels", c.n_voxels);
  get("k_min", c.k_min);
  get("k_max", c.k_max);
  get("token_noise_sd", c.token_noise_sd);
  get("orthonormal", c.orthonormal);
  get("critical_min", c.critical_min);
  get("critical_cap", c.critical_cap);
  get("gain_min", c.gain_min);
  get("gain_max", c.gain_max);
  get("baseline_min", c.baseline_min);
  get("baseline_max", c.baseline_max);
  get("trial_noise_sd", c.trial_noise_sd);
  get("target_noise_ceiling", c.target_noise_ceiling);
  get("n_reps", c.n_reps);
  get("seed", c.seed);
  return c;
}

StimulusSpec sample_stimulus(const WorldConfig& config, std::int64_t image_id,
                             std::uint64_t seed) {
  if (config.k_min > config.seq_len)
    throw ConfigError("k_min exceeds seq_len: features cannot each get a token");
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(config.k_min, config.k_max);
  const int k = count(rng);

  StimulusSpec spec;
  spec.image_id = image_id;
  spec.feature_set = choose_distinct(config.n_features, k, rng);

  assign_positions(spec, config.seq_len, rng);
  return spec;
}

StimulusSpec compose_stimulus(std::vector<int> feature_set, int seq_len,
                              std::int64_t image_id, std::uint64_t seed) {
  std::sort(feature_set.begin(), feature_set.end());
  feature_set.erase(std::unique(feature_set.begin(), feature_set.end()),
                    feature_set.end());
  if (feature_set.empty()) throw ConfigError("stimulus needs at least one feature");
  if (static_cast<int>(feature_set.size()) > seq_len)
    throw ConfigError("more features than token positions");
  std::mt19937_64 rng(seed);
  StimulusSpec spec;
  spec.image_id = image_id;
  spec.feature_set = std::move(feature_set);
  assign_positions(spec, seq_len, rng);
  return spec;
}

TokenMatrix render_stimulus(const StimulusSpec& spec,
                            const FeatureDictionary& dictionary,
                            double token_noise_sd, std::uint64_t seed) {
  TokenMatrix out;
  out.image_id = spec.image_id;
  out.values = Matrix::Zero(spec.seq_len(), dictionary.token_dim);
  for (int j = 0; j < spec.seq_len(); ++j) {
    const int f = spec.token_assignment[j];
    if (f == kBackground) continue;
    if (f < 0 || f >= dictionary.n_features)
      throw DimensionError("token assigned to feature " + std::to_string(f) +
                           " outside the dictionary");
    out.values.row(j) = dictionary.directions.row(f);
  }
  if (token_noise_sd > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, token_noise_sd);
    for (Eigen::Index j = 0; j < out.values.rows(); ++j)
      for (Eigen::Index d = 0; d < out.values.cols(); ++d)
        out.values(j, d) += noise(rng);
  }
  return out;
}

double hit_probability(const WorldConfig& config, int critical_size) {
  const int n = config.n_features;
  double total = 0.0;
  for (int k = config.k_min; k <= config.k_max; ++k) {
    // P(no critical feature among k draws without replacement).
    double miss = 1.0;
    for (int i = 0; i < k; ++i)
      miss *= static_cast<double>(n - critical_size - i) / (n - i);
    total += 1.0 - std::max(miss, 0.0);
  }
  return total / (config.k_max - config.k_min + 1);
}

std::vector<VoxelSpec> sample_voxels(const WorldConfig& config,
                                     std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> size(config.critical_min,
                                          config.critical_cap);
  std::uniform_real_distribution<double> gain(config.gain_min, config.gain_max);
  std::uniform_real_distribution<double> baseline(config.baseline_min,
                                                  config.baseline_max);
  std::vector<VoxelSpec> voxels(config.n_voxels);
  for (int v = 0; v < config.n_voxels; ++v) {
    VoxelSpec& spec = voxels[v];
    spec.voxel_id = v;
    spec.critical_set = choose_distinct(config.n_features, size(rng), rng);
    spec.gain = config.gain_min == config.gain_max ? config.gain_min : gain(rng);
    spec.baseline = config.baseline_min == config.baseline_max
                        ? config.baseline_min
                        : baseline(rng);
    spec.n_reps = config.n_reps;
    if (config.target_noise_ceiling > 0.0) {
      // NC = S / (S + σ²/n_reps) with S = a²p(1-p).
      const double p = hit_probability(config,
                                       static_cast<int>(spec.critical_set.size()));
      const double signal = spec.gain * spec.gain * p * (1.0 - p);
      const double nc = config.target_noise_ceiling;
      spec.trial_noise_sd = std::sqrt(config.n_reps * signal * (1.0 - nc) / nc);
    } else {
      spec.trial_noise_sd = config.trial_noise_sd;
    }
  }
  return voxels;
}

double voxel_response(const VoxelSpec& voxel, const StimulusSpec& stimulus,
                      std::uint64_t rep_seed) {
  double y = voxel.baseline + (voxel.detects(stimulus) ? voxel.gain : 0.0);
  if (voxel.trial_noise_sd > 0.0) {
    std::mt19937_64 rng(rep_seed);
    std::normal_distribution<double> noise(0.0, voxel.trial_noise_sd);
    y += noise(rng);
  }
  return y;
}

double noise_ceiling(const Matrix& trials) {
  const Eigen::Index n_images = trials.rows();
  const Eigen::Index n_reps = trials.cols();
  if (n_reps < 2)
    throw InsufficientDataError("noise ceiling needs at least 2 repetitions");
  if (n_images < 2)
    throw InsufficientDataError("noise ceiling needs at least 2 images");
  Vector means = trials.rowwise().mean();
  double within = 0.0;
  for (Eigen::Index i = 0; i < n_images; ++i)
    within += (trials.row(i).array() - means(i)).square().sum() / (n_reps - 1);
  within /= static_cast<double>(n_images);
  const double grand = means.mean();
  const double between =
      (means.array() - grand).square().sum() / static_cast<double>(n_images - 1);
  const double noise_of_mean = within / static_cast<double>(n_reps);
  const double signal = std::max(0.0, between - noise_of_mean);
  const double denom = signal + noise_of_mean;
  if (denom <= 0.0) return 0.0;
  return std::clamp(signal / denom, 0.0, 1.0);
}

std::vector<double> noise_ceilings(const ResponseCube& responses) {
  std::vector<double> out(responses.n_voxels());
  for (int v = 0; v < responses.n_voxels(); ++v)
    out[v] = noise_ceiling(responses.voxel_trials(v));
  return out;
}

World generate_world(const WorldConfig& config) {
  config.validate();
  World world;
  world.config = config;
  world.dictionary =
      build_dictionary(config.n_features, config.token_dim,
                       derive_seed(config.seed, "dictionary"), config.orthonormal);
  world.stimuli.reserve(config.n_images);
  for (int i = 0; i < config.n_images; ++i)
    world.stimuli.push_back(
        sample_stimulus(config, i, derive_seed(config.seed, "stimulus", i)));
  world.voxels = sample_voxels(config, derive_seed(config.seed, "voxels"));
  return world;
}

std::vector<TokenMatrix> render_world(const World& world, int workers) {
  std::vector<TokenMatrix> out(world.stimuli.size());
  parallel_for(static_cast<int>(out.size()), workers, [&](int i) {
    out[i] = render_stimulus(world.stimuli[i], world.dictionary,
                             world.config.token_noise_sd,
                             derive_seed(world.config.seed, "render", i));
  });
  return out;
}

ResponseCube simulate_responses(const World& world) {
  const int n_images = static_cast<int>(world.stimuli.size());
  const int n_voxels = static_cast<int>(world.voxels.size());
  const int n_reps = world.config.n_reps;
  ResponseCube cube(n_images, n_voxels, n_reps);
  for (int i = 0; i < n_images; ++i)
    for (int v = 0; v < n_voxels; ++v)
      for (int r = 0; r < n_reps; ++r)
        cube.at(i, v, r) = voxel_response(
            world.voxels[v], world.stimuli[i],
            derive_seed(world.config.seed, "trial",
                        (static_cast<std::uint64_t>(i) * n_voxels + v) * n_reps + r));
  return cube;
}

nlohmann::json world_to_json(const World& world) {
  return {{"format", "voxlens-world"},
          {"version", 1},
          {"config", to_json(world.config)},
          {"seed", world.config.seed},
          {"feature_names", world.dictionary.names}};
}

World world_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "voxlens-world")
    throw FormatError("not a world document");
  World world = generate_world(world_config_from_json(j.at("config")));
  if (j.contains("feature_names") &&
      j.at("feature_names").get<std::vector<std::string>>() != world.dictionary.names)
    throw FormatError("world feature names do not match the regenerated dictionary");
  return world;
}

nlohmann::json to_json(const StimulusSpec& spec) {
  return {{"image_id", spec.image_id},
          {"features", spec.feature_set},
          {"assignment", spec.token_assignment}};
}

StimulusSpec stimulus_from_json(const nlohmann::json& j) {
  StimulusSpec spec;
  j.at("image_id").get_to(spec.image_id);
  j.at("features").get_to(spec.feature_set);
  j.at("assignment").get_to(spec.token_assignment);
  return spec;
}

nlohmann::json to_json(const VoxelSpec& spec) {
  return {{"voxel_id", spec.voxel_id},
          {"critical_set", spec.critical_set},
          {"gain", spec.gain},
          {"baseline", spec.baseline},
          {"trial_noise_sd", spec.trial_noise_sd},
          {"n_reps", spec.n_reps}};
}

VoxelSpec voxel_from_json(const nlohmann::json& j) {
  VoxelSpec spec;
  j.at("voxel_id").get_to(spec.voxel_id);
  j.at("critical_set").get_to(spec.critical_set);
  j.at("gain").get_to(spec.gain);
  j.at("baseline").get_to(spec.baseline);
  j.at("trial_noise_sd").get_to(spec.trial_noise_sd);
  j.at("n_reps").get_to(spec.n_reps);
  return spec;
}

}  // namespace voxlens
