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

// Logit-lens decoding of selected tokens into vocabulary words, word-bag
// aggregation and the deterministic critical-feature decoder.

#ifndef VOXLENS_LENS_DECODER_H_
#define VOXLENS_LENS_DECODER_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/attribution.h"
#include "voxlens/common.h"
#include "voxlens/synth_world.h"

namespace voxlens {

struct VocabularyProjector {
  Matrix unembedding;  // d_s × |W|
  std::vector<std::string> labels;

  int vocabulary_size() const { return static_cast<int>(unembedding.cols()); }
  int token_dim() const { return static_cast<int>(unembedding.rows()); }
  Matrix logits(const Matrix& tokens) const { return tokens * unembedding; }
};

// Transpose of the dictionary when it is orthonormalized, otherwise its
// Moore–Penrose pseudo-inverse.
VocabularyProjector make_projector(const FeatureDictionary& dictionary);

struct WordLogit {
  int word = 0;
  double logit = 0.0;
  bool operator==(const WordLogit&) const = default;
};

// Top `top_n` words of one token (1 × d_s), ties to the lower word index.
std::vector<WordLogit> logit_lens(const Matrix& token, const VocabularyProjector& projector,
                                  int top_n);

struct WordEntry {
  int word = 0;
  int count = 0;
  double mean_logit = 0.0;
  bool operator==(const WordEntry&) const = default;
};

// Entries sorted by count desc, mean_logit desc, word asc.
struct WordBag {
  std::vector<WordEntry> entries;
  int total_count() const;
};

WordBag aggregate_bag(const Matrix& selected_tokens, const VocabularyProjector& projector,
                      int words_per_token = 10);

struct DecodeOptions {
  int n_features_out = 4;
  // Words whose logit mass (count × mean_logit) falls below this fraction of
  // the bag's largest mass are dropped before ranking. 0 keeps every word.
  double salience = 0.5;
};

struct CriticalFeatureSet {
  int voxel_id = 0;
  std::int64_t image_id = 0;
  Selection source = Selection::kTop;
  std::vector<int> features;  // d(v, x), in rank order
  WordBag bag;
};

nlohmann::json to_json(const CriticalFeatureSet& set, const VocabularyProjector* projector = nullptr);

CriticalFeatureSet decode_critical_features(const WordBag& bag, const DecodeOptions& options = {});

// Selects k tokens of one image by `scores` and decodes them. The voxel and
// image ids of the result are left for the caller.
CriticalFeatureSet decode_selection(const Matrix& tokens, std::span<const double> scores,
                                    int k, Selection selection, std::uint64_t seed,
                                    const VocabularyProjector& projector,
                                    int words_per_token = 10,
                                    const DecodeOptions& options = {});

struct PairScore {
  int voxel_id = 0;
  std::int64_t image_id = 0;
  double precision = 0.0;
  double recall = 0.0;
};

struct RecoveryReport {
  std::vector<PairScore> pairs;          // scored pairs
  std::vector<double> voxel_precision;   // NaN for voxels without scored pairs
  std::vector<double> voxel_recall;
  double mean_precision = 0.0;           // over scored pairs
  double mean_recall = 0.0;
  int excluded = 0;  // pairs whose stimulus holds none of the voxel's features
};

// Scores each decoded set against f_v ∩ x. `stimuli` is indexed by image id.
RecoveryReport recovery_score(std::span<const CriticalFeatureSet> decoded,
                              std::span<const VoxelSpec> voxels,
                              std::span<const StimulusSpec> stimuli);

}  // namespace voxlens

#endif  // VOXLENS_LENS_DECODER_H_
