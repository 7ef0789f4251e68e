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

// Reconstruction, discriminability, counterfactual editing, faithfulness and
// voxel profiles, all through exact feature-set edits of synthetic stimuli.

#ifndef VOXLENS_COUNTERFACTUAL_H_
#define VOXLENS_COUNTERFACTUAL_H_

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/attribution.h"
#include "voxlens/common.h"
#include "voxlens/encoder.h"
#include "voxlens/synth_world.h"

namespace voxlens {

// Linear-interpolation sample quantile (numpy's default rule).
double quantile(std::span<const double> values, double q);

struct PreferenceSplit {
  int voxel_id = 0;
  std::vector<std::int64_t> preferred;
  std::vector<std::int64_t> non_preferred;
  double q_hi = 0.9;
  double q_lo = 0.1;
  double hi_threshold = 0.0;
  double lo_threshold = 0.0;
};

// Preferred: response ≥ quantile(q_hi); non-preferred: response ≤
// quantile(q_lo). `responses[i]` belongs to `image_ids[i]`.
PreferenceSplit select_preference(std::span<const double> responses,
                                  std::span<const std::int64_t> image_ids, int voxel_id,
                                  double q_hi = 0.9, double q_lo = 0.1);

nlohmann::json to_json(const PreferenceSplit& split);

enum class EditKind { kAdd, kRemove };

const char* to_string(EditKind kind);

struct EditOp {
  EditKind kind = EditKind::kAdd;
  std::vector<int> features;
  std::int64_t target_id = 0;
  std::uint64_t render_seed = 0;
};

// Remove: the features' positions become background; removing every feature
// is rejected. Add: with k' features after the edit, each added feature (in
// ascending order) claims max(1, round(s/(k'+1))) positions, taking the
// lowest background position first and otherwise the highest position of the
// least-populated feature that still holds two or more (ties to the lower
// feature index).
StimulusSpec edit_stimulus(const StimulusSpec& stimulus, const EditOp& op, int n_features);

struct EditedStimulus {
  StimulusSpec spec;
  TokenMatrix tokens;
};

EditedStimulus apply_edit(const StimulusSpec& stimulus, const EditOp& op,
                          const FeatureDictionary& dictionary, double token_noise_sd);

// Model, dictionary and the original stimuli with their renders; both spans
// are indexed by image id.
struct EvalContext {
  const EncoderParams* params = nullptr;
  const FeatureDictionary* dictionary = nullptr;
  double token_noise_sd = 0.0;
  std::span<const StimulusSpec> stimuli;
  std::span<const Matrix> tokens;

  void validate() const;
  const StimulusSpec& stimulus(std::int64_t image_id) const;
  const Matrix& render(std::int64_t image_id) const;
  int seq_len() const;
  int n_features() const { return dictionary->n_features; }
  double predict(const Matrix& tokens, int voxel_id) const;
  // Prediction on the original render.
  double predict_image(std::int64_t image_id, int voxel_id) const;
};

struct FillerRange {
  int min = 1;
  int max = 3;
};

// Fresh stimulus holding `features` plus uniformly drawn filler features.
StimulusSpec sample_with_filler(std::span<const int> features, int n_features, int seq_len,
                                FillerRange filler, std::uint64_t seed);

struct ReconstructionRecord {
  int voxel_id = 0;
  std::int64_t image_id = 0;
  Selection source = Selection::kTop;
  int sample = 0;
  std::vector<int> features;  // full feature set of the generated stimulus
  double predicted = 0.0;
  double target = 0.0;
  double error = 0.0;  // |predicted - target|
};

nlohmann::json to_json(const ReconstructionRecord& record);

struct DecodedSource {
  Selection source = Selection::kTop;
  std::vector<int> features;
};

struct ReconstructionOptions {
  int n_samples = 5;
  FillerRange filler;
  // When set, an empty decoded set yields pure-filler stimuli instead of an
  // error.
  bool allow_empty = false;
};

std::vector<ReconstructionRecord> reconstruction_eval(
    const EvalContext& ctx, int voxel_id, std::int64_t image_id, double target,
    std::span<const DecodedSource> decoded, const ReconstructionOptions& options,
    std::uint64_t seed);

struct ActivationSample {
  int voxel_id = 0;
  std::int64_t source_image = 0;
  bool preferred = false;
  int sample = 0;
  double activation = 0.0;
};

nlohmann::json to_json(const ActivationSample& sample);

// Regenerates stimuli from the decoded features of every image in both bins.
std::vector<ActivationSample> discriminability_eval(
    const EvalContext& ctx, const PreferenceSplit& split,
    const std::map<std::int64_t, std::vector<int>>& decoded, int n_samples,
    FillerRange filler, std::uint64_t seed);

struct EditRecord {
  int voxel_id = 0;
  EditKind kind = EditKind::kAdd;
  std::vector<int> features;
  std::int64_t edited_image = 0;
  std::int64_t reference_image = 0;
  double before = 0.0;
  double after = 0.0;
  std::string condition;

  double change() const { return after - before; }
};

nlohmann::json to_json(const EditRecord& record);

// Removes features ∩ x from image x. Empty when nothing would be removed or
// every feature of x would be.
std::optional<EditRecord> remove_edit(const EvalContext& ctx, int voxel_id,
                                      std::int64_t image_id, std::span<const int> features,
                                      std::uint64_t seed, const std::string& condition);

// Adds features \ x' to image x'; `reference_id` names the image the features
// came from. Empty when every feature is already present.
std::optional<EditRecord> add_edit(const EvalContext& ctx, int voxel_id, std::int64_t image_id,
                                   std::span<const int> features, std::int64_t reference_id,
                                   std::uint64_t seed, const std::string& condition);

struct FaithfulnessRecord {
  int voxel_id = 0;
  std::int64_t preferred_image = 0;
  std::int64_t non_preferred_image = 0;
  std::vector<int> features;
  std::string condition;
  double numerator = 0.0;
  double denominator = 0.0;
  double value = 0.0;  // NaN when skipped
  bool skipped = false;
};

nlohmann::json to_json(const FaithfulnessRecord& record);

// (ĥ(x' ∪ f) − ĥ(x')) / (ĥ(x) − ĥ(x')) with f restricted to x \ x'. Skipped
// when |ĥ(x) − ĥ(x')| < guard.
FaithfulnessRecord faithfulness(const EvalContext& ctx, int voxel_id, std::int64_t preferred,
                                std::int64_t non_preferred, std::span<const int> features,
                                double guard, std::uint64_t seed,
                                const std::string& condition);

struct ProfileOptions {
  double quartile = 0.75;
  int min_trials = 3;
  int n_features = 3;
};

struct ProfileSpec {
  int voxel_id = 0;
  std::vector<int> features;   // canonical features, by weight
  std::vector<double> weights; // in [0, 1]
  int n_supporting_trials = 0;
  int n_source_images = 0;
};

nlohmann::json to_json(const ProfileSpec& profile);

// Records of one voxel; skipped records are ignored. Empty when fewer than
// min_trials survive the quartile cut.
std::optional<ProfileSpec> build_profile(std::span<const FaithfulnessRecord> records,
                                         const ProfileOptions& options = {});

struct ProfileEditResult {
  std::vector<EditRecord> records;
  int skipped_features = 0;  // canonical features already present
};

ProfileEditResult profile_edit_eval(const EvalContext& ctx, const ProfileSpec& profile,
                                    std::span<const std::int64_t> non_preferred,
                                    std::uint64_t seed);

}  // namespace voxlens

#endif  // VOXLENS_COUNTERFACTUAL_H_
