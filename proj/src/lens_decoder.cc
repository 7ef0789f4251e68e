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

#include "voxlens/lens_decoder.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <unordered_map>

#include <Eigen/QR>

namespace voxlens {

VocabularyProjector make_projector(const FeatureDictionary& dictionary) {
  if (dictionary.n_features < 1) throw DimensionError("empty vocabulary");
  VocabularyProjector p;
  p.labels = dictionary.names;
  if (dictionary.orthonormalized) {
    p.unembedding = dictionary.directions.transpose();
  } else {
    p.unembedding = dictionary.directions.completeOrthogonalDecomposition().pseudoInverse();
  }
  return p;
}

std::vector<WordLogit> logit_lens(const Matrix& token, const VocabularyProjector& projector,
                                  int top_n) {
  const int n_words = projector.vocabulary_size();
  if (top_n < 0 || top_n > n_words) {
    throw DimensionError("logit_lens: top_n exceeds the vocabulary size");
  }
  if (token.rows() != 1 || token.cols() != projector.token_dim()) {
    throw DimensionError("logit_lens: token must be 1 × d_s");
  }
  const Matrix logits = projector.logits(token);
  std::vector<int> idx(n_words);
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + top_n, idx.end(), [&](int a, int b) {
    if (logits(0, a) != logits(0, b)) return logits(0, a) > logits(0, b);
    return a < b;
  });
  std::vector<WordLogit> out;
  out.reserve(top_n);
  for (int r = 0; r < top_n; ++r) out.push_back({idx[r], logits(0, idx[r])});
  return out;
}

int WordBag::total_count() const {
  int total = 0;
  for (const auto& e : entries) total += e.count;
  return total;
}

WordBag aggregate_bag(const Matrix& selected_tokens, const VocabularyProjector& projector,
                      int words_per_token) {
  if (selected_tokens.rows() == 0) throw InsufficientDataError("aggregate_bag: no tokens");
  std::map<int, std::pair<int, double>> tally;
  for (Eigen::Index r = 0; r < selected_tokens.rows(); ++r) {
    for (const WordLogit& w : logit_lens(selected_tokens.row(r), projector, words_per_token)) {
      auto& [count, sum] = tally[w.word];
      ++count;
      sum += w.logit;
    }
  }
  WordBag bag;
  for (const auto& [word, cs] : tally) bag.entries.push_back({word, cs.first, cs.second / cs.first});
  std::sort(bag.entries.begin(), bag.entries.end(), [](const WordEntry& a, const WordEntry& b) {
    if (a.count != b.count) return a.count > b.count;
    if (a.mean_logit != b.mean_logit) return a.mean_logit > b.mean_logit;
    return a.word < b.word;
  });
  return bag;
}

CriticalFeatureSet decode_critical_features(const WordBag& bag, const DecodeOptions& options) {
  if (bag.entries.empty()) throw InsufficientDataError("decode_critical_features: empty bag");
  if (options.n_features_out < 1) throw ConfigError("n_features_out must be positive");
  double peak = -std::numeric_limits<double>::infinity();
  for (const auto& e : bag.entries) peak = std::max(peak, e.count * e.mean_logit);
  CriticalFeatureSet out;
  out.bag = bag;
  for (const auto& e : bag.entries) {
    if (static_cast<int>(out.features.size()) == options.n_features_out) break;
    if (options.salience > 0 && peak > 0 && e.count * e.mean_logit < options.salience * peak) {
      continue;
    }
    out.features.push_back(e.word);
  }
  if (out.features.empty()) out.features.push_back(bag.entries.front().word);
  return out;
}

CriticalFeatureSet decode_selection(const Matrix& tokens, std::span<const double> scores,
                                    int k, Selection selection, std::uint64_t seed,
                                    const VocabularyProjector& projector, int words_per_token,
                                    const DecodeOptions& options) {
  if (static_cast<Eigen::Index>(scores.size()) != tokens.rows()) {
    throw DimensionError("decode_selection: one score per token is required");
  }
  const std::vector<int> chosen = top_k_tokens(scores, k, selection, seed);
  Matrix selected(static_cast<Eigen::Index>(chosen.size()), tokens.cols());
  for (std::size_t r = 0; r < chosen.size(); ++r) selected.row(r) = tokens.row(chosen[r]);
  CriticalFeatureSet out =
      decode_critical_features(aggregate_bag(selected, projector, words_per_token), options);
  out.source = selection;
  return out;
}

nlohmann::json to_json(const CriticalFeatureSet& set, const VocabularyProjector* projector) {
  nlohmann::json bag = nlohmann::json::array();
  for (std::size_t r = 0; r < set.bag.entries.size(); ++r) {
    const WordEntry& e = set.bag.entries[r];
    nlohmann::json j = {{"rank", r + 1}, {"word", e.word}, {"count", e.count},
                        {"mean_logit", e.mean_logit}};
    if (projector != nullptr) j["label"] = projector->labels.at(e.word);
    bag.push_back(std::move(j));
  }
  return {{"voxel_id", set.voxel_id}, {"image_id", set.image_id},
          {"source", to_string(set.source)}, {"features", set.features}, {"bag", bag}};
}

RecoveryReport recovery_score(std::span<const CriticalFeatureSet> decoded,
                              std::span<const VoxelSpec> voxels,
                              std::span<const StimulusSpec> stimuli) {
  if (voxels.empty() || stimuli.empty()) {
    throw ConfigError("recovery_score needs planted voxel and stimulus specs");
  }
  std::unordered_map<std::int64_t, const StimulusSpec*> by_id;
  for (const auto& s : stimuli) by_id[s.image_id] = &s;
  std::unordered_map<int, const VoxelSpec*> voxel_by_id;
  for (const auto& v : voxels) voxel_by_id[v.voxel_id] = &v;

  RecoveryReport out;
  const int n_vox = static_cast<int>(voxels.size());
  std::vector<double> p_sum(n_vox, 0.0), r_sum(n_vox, 0.0);
  std::vector<int> n_pairs(n_vox, 0);
  std::unordered_map<int, int> slot;
  for (int k = 0; k < n_vox; ++k) slot[voxels[k].voxel_id] = k;
  for (const auto& d : decoded) {
    auto vs = voxel_by_id.find(d.voxel_id);
    auto st = by_id.find(d.image_id);
    if (vs == voxel_by_id.end() || st == by_id.end()) {
      throw ConfigError("recovery_score: no ground truth for voxel " +
                        std::to_string(d.voxel_id) + " image " + std::to_string(d.image_id));
    }
    std::vector<int> truth;
    for (int f : vs->second->critical_set)
      if (st->second->contains(f)) truth.push_back(f);
    if (truth.empty()) {
      ++out.excluded;
      continue;
    }
    if (d.features.empty()) throw InsufficientDataError("recovery_score: empty decoded set");
    int hits = 0;
    for (int f : d.features) hits += std::count(truth.begin(), truth.end(), f) > 0;
    PairScore ps{d.voxel_id, d.image_id, static_cast<double>(hits) / d.features.size(),
                 static_cast<double>(hits) / truth.size()};
    out.pairs.push_back(ps);
    const int k = slot[d.voxel_id];
    p_sum[k] += ps.precision;
    r_sum[k] += ps.recall;
    ++n_pairs[k];
  }
  for (int k = 0; k < n_vox; ++k) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.voxel_precision.push_back(n_pairs[k] ? p_sum[k] / n_pairs[k] : nan);
    out.voxel_recall.push_back(n_pairs[k] ? r_sum[k] / n_pairs[k] : nan);
  }
  if (out.pairs.empty()) {
    out.mean_precision = out.mean_recall = std::numeric_limits<double>::quiet_NaN();
  } else {
    for (const auto& p : out.pairs) {
      out.mean_precision += p.precision;
      out.mean_recall += p.recall;
    }
    out.mean_precision /= out.pairs.size();
    out.mean_recall /= out.pairs.size();
  }
  return out;
}

}  // namespace voxlens
