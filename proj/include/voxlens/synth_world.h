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

// Synthetic signal-detector world: a dictionary of linear feature directions,
// stimuli that are subsets of features rendered as token sequences, and
// planted voxels that respond to the presence of any of their critical
// features.

#ifndef VOXLENS_SYNTH_WORLD_H_
#define VOXLENS_SYNTH_WORLD_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"
#include "voxlens/responses.h"

namespace voxlens {

struct FeatureDictionary {
  int n_features = 0;
  int token_dim = 0;
  Matrix directions;  // n_features × token_dim, unit rows
  std::vector<std::string> names;
  bool orthonormalized = false;
};

// Gaussian rows normalized to unit length, optionally orthonormalized
// (requires n_features <= token_dim). Deterministic in `seed`.
FeatureDictionary build_dictionary(int n_features, int token_dim,
                                   std::uint64_t seed, bool orthonormalize);

struct StimulusSpec {
  std::int64_t image_id = 0;
  std::vector<int> feature_set;       // sorted, unique
  std::vector<int> token_assignment;  // feature index or kBackground per position

  int seq_len() const { return static_cast<int>(token_assignment.size()); }
  bool contains(int feature) const;
  // Number of token positions carrying `feature`.
  int token_count(int feature) const;
  // Throws ConfigError when an invariant is broken.
  void validate(int n_features) const;
};

struct TokenMatrix {
  std::int64_t image_id = 0;
  Matrix values;  // seq_len × token_dim
};

struct VoxelSpec {
  int voxel_id = 0;
  std::vector<int> critical_set;  // sorted, unique
  double gain = 1.0;
  double baseline = 0.0;
  double trial_noise_sd = 0.0;
  int n_reps = 1;

  bool detects(const StimulusSpec& stimulus) const;
};

struct WorldConfig {
  int n_features = 64;
  int token_dim = 64;
  int seq_len = 32;
  int n_images = 2000;
  int n_voxels = 200;
  int k_min = 2;
  int k_max = 5;
  double token_noise_sd = 0.1;
  bool orthonormal = true;
  int critical_min = 1;
  int critical_cap = 3;
  double gain_min = 0.8;
  double gain_max = 1.2;
  double baseline_min = -0.1;
  double baseline_max = 0.1;
  // Used as every voxel's trial noise unless target_noise_ceiling > 0, in
  // which case each voxel's noise is solved from its analytic noise ceiling.
  double trial_noise_sd = 0.3;
  double target_noise_ceiling = 0.0;
  int n_reps = 3;
  std::uint64_t seed = 17;

  void validate() const;
};

nlohmann::json to_json(const WorldConfig& config);
WorldConfig world_config_from_json(const nlohmann::json& j);

// Largest |cosine| over all distinct pairs of dictionary rows.
double max_abs_coherence(const FeatureDictionary& dictionary);

// Feature count uniform in [k_min, k_max]; each chosen feature receives one
// guaranteed token position, remaining positions go uniformly to one of the
// chosen features or to background.
StimulusSpec sample_stimulus(const WorldConfig& config, std::int64_t image_id,
                             std::uint64_t seed);

// Stimulus with the given features (sorted and deduplicated) and a random
// assignment following the sample_stimulus rule.
StimulusSpec compose_stimulus(std::vector<int> feature_set, int seq_len,
                              std::int64_t image_id, std::uint64_t seed);

// Token j = direction of its feature (zero for background) plus isotropic
// Gaussian noise of standard deviation `token_noise_sd`.
TokenMatrix render_stimulus(const StimulusSpec& spec,
                            const FeatureDictionary& dictionary,
                            double token_noise_sd, std::uint64_t seed);

// Probability that a random stimulus from `config` contains at least one of
// `critical_size` fixed features.
double hit_probability(const WorldConfig& config, int critical_size);

std::vector<VoxelSpec> sample_voxels(const WorldConfig& config,
                                     std::uint64_t seed);

// gain·[critical ∩ features ≠ ∅] + baseline + N(0, trial_noise_sd²).
double voxel_response(const VoxelSpec& voxel, const StimulusSpec& stimulus,
                      std::uint64_t rep_seed);

// Between/within variance-component noise ceiling for one voxel from an
// n_images × n_reps response matrix, clamped to [0, 1].
double noise_ceiling(const Matrix& trials);
std::vector<double> noise_ceilings(const ResponseCube& responses);

// A complete synthetic world: dictionary, stimuli, voxels and trial responses.
struct World {
  WorldConfig config;
  FeatureDictionary dictionary;
  std::vector<StimulusSpec> stimuli;
  std::vector<VoxelSpec> voxels;
};

World generate_world(const WorldConfig& config);
std::vector<TokenMatrix> render_world(const World& world, int workers = 1);
ResponseCube simulate_responses(const World& world);

nlohmann::json world_to_json(const World& world);
// Rebuilds the dictionary, stimuli and voxels from the stored config.
World world_from_json(const nlohmann::json& j);

nlohmann::json to_json(const StimulusSpec& spec);
StimulusSpec stimulus_from_json(const nlohmann::json& j);
nlohmann::json to_json(const VoxelSpec& spec);
VoxelSpec voxel_from_json(const nlohmann::json& j);

}  // namespace voxlens

#endif  // VOXLENS_SYNTH_WORLD_H_
