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

// Integrated-gradients token attribution against a mean-token baseline,
// top-k token selection and mean-token patching.

#ifndef VOXLENS_ATTRIBUTION_H_
#define VOXLENS_ATTRIBUTION_H_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"
#include "voxlens/encoder.h"

namespace voxlens {

struct BaselineToken {
  Matrix values;  // 1 × d_s
  std::string provenance;
};

BaselineToken mean_baseline(std::span<const Matrix> token_tensors,
                            std::string provenance = "training-corpus-mean");

// Incremental mean over tokens, one image at a time.
class StreamingMean {
 public:
  void add(const Matrix& tokens);
  std::int64_t count() const { return count_; }
  BaselineToken result(std::string provenance = "training-corpus-mean") const;

 private:
  Matrix mean_;
  std::int64_t count_ = 0;
};

// s copies of the baseline token.
Matrix baseline_sequence(const BaselineToken& baseline, int seq_len);

struct AttributionRecord {
  int voxel_id = 0;
  std::int64_t image_id = 0;
  std::vector<double> scores;  // one per token
  double prediction = 0.0;           // ĥ(x)
  double baseline_prediction = 0.0;  // ĥ(baseline sequence)
  double completeness_gap = 0.0;
  int n_steps = 0;

  double prediction_difference() const { return prediction - baseline_prediction; }
};

nlohmann::json to_json(const AttributionRecord& record);
AttributionRecord attribution_from_json(const nlohmann::json& j);

// A scalar function of a token sequence together with its token gradient.
struct DifferentiableModel {
  std::function<double(const Matrix&)> predict;
  std::function<Matrix(const Matrix&)> gradient;  // s × d_s
};

// ŷ = Σ_j w·x_j + bias.
DifferentiableModel linear_probe(const Matrix& weights, double bias);

// Left-Riemann IG at α = i/m, i = 0..m-1, from the baseline sequence to
// `tokens`. Scores sum the per-entry attributions over d_s, or their absolute
// values when `absolute` is set.
AttributionRecord integrated_gradients(const DifferentiableModel& model,
                                       const Matrix& tokens,
                                       const Matrix& baseline_seq, int n_steps,
                                       bool absolute = false);

// Encoder IG for several voxels of one image, batched over path points.
std::vector<AttributionRecord> integrated_gradients(
    const EncoderParams& params, const Matrix& tokens,
    std::span<const int> voxel_ids, const BaselineToken& baseline, int n_steps,
    std::int64_t image_id = 0, bool absolute = false);

// Single-voxel encoder model for the generic routine.
DifferentiableModel encoder_voxel_model(const EncoderParams& params, int voxel_id);

enum class Selection { kTop, kLowest, kRandom };

const char* to_string(Selection selection);
Selection selection_from_string(const std::string& name);

// Top/lowest: k indices in rank order, ties to the lower index. Random: the
// first k entries of a seeded permutation, so selections nest in k.
std::vector<int> top_k_tokens(std::span<const double> scores, int k,
                              Selection selection = Selection::kTop,
                              std::uint64_t seed = 0);

enum class PatchMode { kNecessity, kSufficiency };

const char* to_string(PatchMode mode);

struct PatchResult {
  PatchMode mode = PatchMode::kNecessity;
  Selection selection = Selection::kTop;
  int k = 0;
  double ratio = 0.0;  // R̄²_k / R̄²
  double mean_r2 = 0.0;
  double mean_r2_patched = 0.0;
  std::vector<double> r2;          // per voxel, unpatched
  std::vector<double> r2_patched;  // per voxel
  std::vector<bool> valid;
};

// Patches every (image, voxel) pair with its own selection; `scores[i]` holds
// one row of token scores per voxel (V × s) for image i. Rows of `targets`
// align with `tokens`.
PatchResult patch_eval(const EncoderParams& params, std::span<const Matrix> tokens,
                       const Matrix& targets, std::span<const Matrix> scores,
                       const BaselineToken& baseline, int k, PatchMode mode,
                       Selection selection, std::uint64_t seed, int workers = 1);

struct PatchCurve {
  PatchMode mode = PatchMode::kNecessity;
  Selection selection = Selection::kTop;
  std::vector<PatchResult> points;  // k strictly increasing
};

PatchCurve patch_curve(const EncoderParams& params, std::span<const Matrix> tokens,
                       const Matrix& targets, std::span<const Matrix> scores,
                       const BaselineToken& baseline, std::span<const int> ks,
                       PatchMode mode, Selection selection, std::uint64_t seed,
                       int workers = 1);

// Per-image V × s score matrices for all voxels.
std::vector<Matrix> attribution_scores(const EncoderParams& params,
                                       std::span<const Matrix> tokens,
                                       const BaselineToken& baseline, int n_steps,
                                       int workers = 1);

}  // namespace voxlens

#endif  // VOXLENS_ATTRIBUTION_H_
