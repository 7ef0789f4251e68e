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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

namespace voxlens {
namespace {

constexpr std::int64_t kGeneratedImage = -1;

std::vector<int> sorted_unique(std::span<const int> features) {
  std::vector<int> out(features.begin(), features.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

double nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

double quantile(std::span<const double> values, double q) {
  if (values.empty()) throw InsufficientDataError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const std::size_t lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

PreferenceSplit select_preference(std::span<const double> responses,
                                  std::span<const std::int64_t> image_ids, int voxel_id,
                                  double q_hi, double q_lo) {
  if (!(q_lo >= 0.0 && q_lo < q_hi && q_hi <= 1.0)) {
    throw ConfigError("preference quantiles must satisfy 0 <= q_lo < q_hi <= 1");
  }
  if (responses.size() != image_ids.size()) {
    throw DimensionError("select_preference: one response per image is required");
  }
  PreferenceSplit out;
  out.voxel_id = voxel_id;
  out.q_hi = q_hi;
  out.q_lo = q_lo;
  out.hi_threshold = quantile(responses, q_hi);
  out.lo_threshold = quantile(responses, q_lo);
  if (!(out.hi_threshold > out.lo_threshold)) {
    throw InsufficientDataError("voxel " + std::to_string(voxel_id) +
                                ": preference bins overlap for tied responses");
  }
  for (std::size_t i = 0; i < responses.size(); ++i) {
    if (responses[i] >= out.hi_threshold) out.preferred.push_back(image_ids[i]);
    if (responses[i] <= out.lo_threshold) out.non_preferred.push_back(image_ids[i]);
  }
  if (out.preferred.empty() || out.non_preferred.empty()) {
    throw InsufficientDataError("voxel " + std::to_string(voxel_id) + ": empty preference bin");
  }
  return out;
}

nlohmann::json to_json(const PreferenceSplit& s) {
  return {{"voxel_id", s.voxel_id},         {"preferred", s.preferred},
          {"non_preferred", s.non_preferred}, {"q_hi", s.q_hi},
          {"q_lo", s.q_lo},                   {"hi_threshold", s.hi_threshold},
          {"lo_threshold", s.lo_threshold}};
}

const char* to_string(EditKind kind) { return kind == EditKind::kAdd ? "add" : "remove"; }

StimulusSpec edit_stimulus(const StimulusSpec& stimulus, const EditOp& op, int n_features) {
  const std::vector<int> features = sorted_unique(op.features);
  if (features.empty()) throw ConfigError("edit without features");
  StimulusSpec out = stimulus;
  std::vector<int>& assign = out.token_assignment;
  if (op.kind == EditKind::kRemove) {
    for (int f : features) {
      if (!stimulus.contains(f)) {
        throw ConfigError("Remove of feature " + std::to_string(f) + " absent from stimulus " +
                          std::to_string(stimulus.image_id));
      }
    }
    std::vector<int> kept;
    std::set_difference(stimulus.feature_set.begin(), stimulus.feature_set.end(),
                        features.begin(), features.end(), std::back_inserter(kept));
    if (kept.empty()) throw ConfigError("Remove would leave an empty stimulus");
    out.feature_set = kept;
    for (int& a : assign)
      if (a != kBackground && std::binary_search(features.begin(), features.end(), a))
        a = kBackground;
  } else {
    for (int f : features) {
      if (f < 0 || f >= n_features) throw ConfigError("Add of feature outside the dictionary");
      if (stimulus.contains(f)) {
        throw ConfigError("Add of feature " + std::to_string(f) + " already in stimulus " +
                          std::to_string(stimulus.image_id));
      }
    }
    const int s = stimulus.seq_len();
    const int k_after = static_cast<int>(stimulus.feature_set.size() + features.size());
    const int quota = std::max(1, static_cast<int>(std::lround(static_cast<double>(s) / (k_after + 1))));
    for (int f : features) {
      for (int t = 0; t < quota; ++t) {
        auto bg = std::find(assign.begin(), assign.end(), kBackground);
        if (bg != assign.end()) {
          *bg = f;
          continue;
        }
        std::map<int, int> counts;
        for (int a : assign) ++counts[a];
        int donor = -1;
        for (const auto& [feature, count] : counts) {
          if (count < 2 || feature == f) continue;
          if (donor < 0 || count < counts[donor]) donor = feature;
        }
        if (donor < 0) {
          if (t == 0) throw DimensionError("no token position left for an added feature");
          break;
        }
        for (int j = s - 1; j >= 0; --j) {
          if (assign[j] == donor) {
            assign[j] = f;
            break;
          }
        }
      }
    }
    out.feature_set.insert(out.feature_set.end(), features.begin(), features.end());
    std::sort(out.feature_set.begin(), out.feature_set.end());
  }
  out.validate(n_features);
  return out;
}

EditedStimulus apply_edit(const StimulusSpec& stimulus, const EditOp& op,
                          const FeatureDictionary& dictionary, double token_noise_sd) {
  if (op.target_id != stimulus.image_id) throw ConfigError("edit targets a different stimulus");
  EditedStimulus out;
  out.spec = edit_stimulus(stimulus, op, dictionary.n_features);
  out.tokens = render_stimulus(out.spec, dictionary, token_noise_sd, op.render_seed);
  return out;
}

void EvalContext::validate() const {
  if (params == nullptr || dictionary == nullptr) throw ConfigError("evaluation context incomplete");
  if (stimuli.size() != tokens.size()) throw DimensionError("one render per stimulus is required");
  for (std::size_t i = 0; i < stimuli.size(); ++i) {
    if (stimuli[i].image_id != static_cast<std::int64_t>(i)) {
      throw ConfigError("stimuli must be indexed by image id");
    }
  }
}

const StimulusSpec& EvalContext::stimulus(std::int64_t id) const {
  if (id < 0 || id >= static_cast<std::int64_t>(stimuli.size())) {
    throw DimensionError("unknown image id " + std::to_string(id));
  }
  return stimuli[static_cast<std::size_t>(id)];
}

const Matrix& EvalContext::render(std::int64_t id) const {
  stimulus(id);
  return tokens[static_cast<std::size_t>(id)];
}

int EvalContext::seq_len() const { return stimuli.empty() ? 0 : stimuli.front().seq_len(); }

double EvalContext::predict(const Matrix& x, int voxel_id) const {
  const int ids[1] = {voxel_id};
  return voxlens::predict(*params, x, ids)[0];
}

double EvalContext::predict_image(std::int64_t id, int voxel_id) const {
  return predict(render(id), voxel_id);
}

StimulusSpec sample_with_filler(std::span<const int> features, int n_features, int seq_len,
                                FillerRange filler, std::uint64_t seed) {
  if (filler.min < 0 || filler.min > filler.max) throw ConfigError("invalid filler range");
  std::vector<int> set = sorted_unique(features);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(filler.min, filler.max);
  int count = count_dist(rng);
  std::vector<int> pool;
  for (int f = 0; f < n_features; ++f)
    if (!std::binary_search(set.begin(), set.end(), f)) pool.push_back(f);
  count = std::min<int>(count, static_cast<int>(pool.size()));
  for (int a = 0; a < count; ++a) {
    std::uniform_int_distribution<int> pick(a, static_cast<int>(pool.size()) - 1);
    std::swap(pool[a], pool[pick(rng)]);
    set.push_back(pool[a]);
  }
  return compose_stimulus(set, seq_len, kGeneratedImage, rng());
}

nlohmann::json to_json(const ReconstructionRecord& r) {
  return {{"voxel_id", r.voxel_id},   {"image_id", r.image_id},
          {"source", to_string(r.source)}, {"sample", r.sample},
          {"features", r.features},   {"predicted", r.predicted},
          {"target", r.target},       {"error", r.error}};
}

std::vector<ReconstructionRecord> reconstruction_eval(
    const EvalContext& ctx, int voxel_id, std::int64_t image_id, double target,
    std::span<const DecodedSource> decoded, const ReconstructionOptions& options,
    std::uint64_t seed) {
  if (options.n_samples < 1) throw ConfigError("n_samples must be positive");
  std::vector<ReconstructionRecord> out;
  for (const DecodedSource& d : decoded) {
    if (d.features.empty() && !options.allow_empty) {
      throw InsufficientDataError("empty decoded set for voxel " + std::to_string(voxel_id) +
                                  " image " + std::to_string(image_id));
    }
    for (int t = 0; t < options.n_samples; ++t) {
      // Shared per-sample seeds pair the sources on filler and render noise.
      const StimulusSpec spec =
          sample_with_filler(d.features, ctx.n_features(), ctx.seq_len(), options.filler,
                             derive_seed(seed, "reconstruct", static_cast<std::uint64_t>(t)));
      const TokenMatrix x = render_stimulus(spec, *ctx.dictionary, ctx.token_noise_sd,
                                            derive_seed(seed, "reconstruct-render", t));
      ReconstructionRecord r;
      r.voxel_id = voxel_id;
      r.image_id = image_id;
      r.source = d.source;
      r.sample = t;
      r.features = spec.feature_set;
      r.predicted = ctx.predict(x.values, voxel_id);
      r.target = target;
      r.error = std::abs(r.predicted - target);
      out.push_back(std::move(r));
    }
  }
  return out;
}

nlohmann::json to_json(const ActivationSample& s) {
  return {{"voxel_id", s.voxel_id}, {"source_image", s.source_image},
          {"group", s.preferred ? "preferred" : "non_preferred"},
          {"sample", s.sample},     {"activation", s.activation}};
}

std::vector<ActivationSample> discriminability_eval(
    const EvalContext& ctx, const PreferenceSplit& split,
    const std::map<std::int64_t, std::vector<int>>& decoded, int n_samples, FillerRange filler,
    std::uint64_t seed) {
  if (split.preferred.empty() || split.non_preferred.empty()) {
    throw InsufficientDataError("discriminability needs both preference bins");
  }
  if (n_samples < 1) throw ConfigError("n_samples must be positive");
  std::vector<ActivationSample> out;
  for (bool preferred : {true, false}) {
    const auto& images = preferred ? split.preferred : split.non_preferred;
    for (std::int64_t image : images) {
      auto it = decoded.find(image);
      if (it == decoded.end() || it->second.empty()) {
        throw InsufficientDataError("no decoded features for image " + std::to_string(image));
      }
      for (int t = 0; t < n_samples; ++t) {
        const std::uint64_t index = static_cast<std::uint64_t>(image) * n_samples + t;
        const StimulusSpec spec =
            sample_with_filler(it->second, ctx.n_features(), ctx.seq_len(), filler,
                               derive_seed(seed, "discriminate", index));
        const TokenMatrix x = render_stimulus(spec, *ctx.dictionary, ctx.token_noise_sd,
                                              derive_seed(seed, "discriminate-render", index));
        out.push_back({split.voxel_id, image, preferred, t, ctx.predict(x.values, split.voxel_id)});
      }
    }
  }
  return out;
}

nlohmann::json to_json(const EditRecord& r) {
  return {{"voxel_id", r.voxel_id},
          {"kind", to_string(r.kind)},
          {"features", r.features},
          {"edited_image", r.edited_image},
          {"reference_image", r.reference_image},
          {"before", r.before},
          {"after", r.after},
          {"change", r.change()},
          {"condition", r.condition}};
}

std::optional<EditRecord> remove_edit(const EvalContext& ctx, int voxel_id,
                                      std::int64_t image_id, std::span<const int> features,
                                      std::uint64_t seed, const std::string& condition) {
  const StimulusSpec& x = ctx.stimulus(image_id);
  std::vector<int> present;
  for (int f : sorted_unique(features))
    if (x.contains(f)) present.push_back(f);
  if (present.empty() || present.size() == x.feature_set.size()) return std::nullopt;
  EditOp op{EditKind::kRemove, present, image_id, derive_seed(seed, "remove-render", 0)};
  const EditedStimulus edited = apply_edit(x, op, *ctx.dictionary, ctx.token_noise_sd);
  EditRecord r;
  r.voxel_id = voxel_id;
  r.kind = EditKind::kRemove;
  r.features = present;
  r.edited_image = image_id;
  r.reference_image = image_id;
  r.before = ctx.predict_image(image_id, voxel_id);
  r.after = ctx.predict(edited.tokens.values, voxel_id);
  r.condition = condition;
  return r;
}

std::optional<EditRecord> add_edit(const EvalContext& ctx, int voxel_id, std::int64_t image_id,
                                   std::span<const int> features, std::int64_t reference_id,
                                   std::uint64_t seed, const std::string& condition) {
  const StimulusSpec& x = ctx.stimulus(image_id);
  std::vector<int> absent;
  for (int f : sorted_unique(features))
    if (!x.contains(f)) absent.push_back(f);
  if (absent.empty()) return std::nullopt;
  EditOp op{EditKind::kAdd, absent, image_id, derive_seed(seed, "add-render", 0)};
  const EditedStimulus edited = apply_edit(x, op, *ctx.dictionary, ctx.token_noise_sd);
  EditRecord r;
  r.voxel_id = voxel_id;
  r.kind = EditKind::kAdd;
  r.features = absent;
  r.edited_image = image_id;
  r.reference_image = reference_id;
  r.before = ctx.predict_image(image_id, voxel_id);
  r.after = ctx.predict(edited.tokens.values, voxel_id);
  r.condition = condition;
  return r;
}

nlohmann::json to_json(const FaithfulnessRecord& r) {
  nlohmann::json j = {{"voxel_id", r.voxel_id},
                      {"preferred_image", r.preferred_image},
                      {"non_preferred_image", r.non_preferred_image},
                      {"features", r.features},
                      {"condition", r.condition},
                      {"numerator", r.numerator},
                      {"denominator", r.denominator},
                      {"skipped", r.skipped}};
  j["value"] = r.skipped ? nlohmann::json(nullptr) : nlohmann::json(r.value);
  return j;
}

FaithfulnessRecord faithfulness(const EvalContext& ctx, int voxel_id, std::int64_t preferred,
                                std::int64_t non_preferred, std::span<const int> features,
                                double guard, std::uint64_t seed,
                                const std::string& condition) {
  const StimulusSpec& x = ctx.stimulus(preferred);
  const StimulusSpec& xp = ctx.stimulus(non_preferred);
  FaithfulnessRecord r;
  r.voxel_id = voxel_id;
  r.preferred_image = preferred;
  r.non_preferred_image = non_preferred;
  r.condition = condition;
  for (int f : sorted_unique(features))
    if (x.contains(f) && !xp.contains(f)) r.features.push_back(f);
  const double h_x = ctx.predict_image(preferred, voxel_id);
  const double h_xp = ctx.predict_image(non_preferred, voxel_id);
  r.denominator = h_x - h_xp;
  if (!(std::abs(r.denominator) >= guard) || r.denominator == 0.0) {
    r.skipped = true;
    r.value = nan();
    return r;
  }
  if (!r.features.empty()) {
    EditOp op{EditKind::kAdd, r.features, non_preferred,
              derive_seed(seed, "faithfulness-render", 0)};
    const EditedStimulus edited = apply_edit(xp, op, *ctx.dictionary, ctx.token_noise_sd);
    r.numerator = ctx.predict(edited.tokens.values, voxel_id) - h_xp;
  }
  r.value = r.numerator / r.denominator;
  if (!std::isfinite(r.value)) throw NumericError("non-finite faithfulness");
  return r;
}

nlohmann::json to_json(const ProfileSpec& p) {
  return {{"voxel_id", p.voxel_id},
          {"features", p.features},
          {"weights", p.weights},
          {"n_supporting_trials", p.n_supporting_trials},
          {"n_source_images", p.n_source_images}};
}

std::optional<ProfileSpec> build_profile(std::span<const FaithfulnessRecord> records,
                                         const ProfileOptions& options) {
  if (options.min_trials < 1 || options.n_features < 1) throw ConfigError("invalid profile options");
  std::vector<const FaithfulnessRecord*> usable;
  for (const auto& r : records) {
    if (r.voxel_id != records.front().voxel_id) {
      throw ConfigError("build_profile expects the records of a single voxel");
    }
    if (!r.skipped) usable.push_back(&r);
  }
  if (static_cast<int>(usable.size()) < options.min_trials) return std::nullopt;
  std::vector<double> values;
  for (const auto* r : usable) values.push_back(r->value);
  const double cut = quantile(values, options.quartile);
  std::vector<const FaithfulnessRecord*> kept;
  for (const auto* r : usable)
    if (r->value >= cut) kept.push_back(r);
  if (static_cast<int>(kept.size()) < options.min_trials) return std::nullopt;

  std::map<int, std::pair<double, int>> support;  // feature -> (sum, trials)
  std::set<std::int64_t> sources;
  for (const auto* r : kept) {
    sources.insert(r->preferred_image);
    for (int f : r->features) {
      support[f].first += r->value;
      ++support[f].second;
    }
  }
  struct Candidate {
    int feature;
    double weight;
    int trials;
  };
  std::vector<Candidate> ranked;
  for (const auto& [f, st] : support)
    ranked.push_back({f, std::clamp(st.first / st.second, 0.0, 1.0), st.second});
  std::sort(ranked.begin(), ranked.end(), [](const Candidate& a, const Candidate& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    if (a.trials != b.trials) return a.trials > b.trials;
    return a.feature < b.feature;
  });
  ProfileSpec p;
  p.voxel_id = records.front().voxel_id;
  p.n_supporting_trials = static_cast<int>(kept.size());
  p.n_source_images = static_cast<int>(sources.size());
  for (std::size_t a = 0; a < ranked.size() && a < static_cast<std::size_t>(options.n_features); ++a) {
    p.features.push_back(ranked[a].feature);
    p.weights.push_back(ranked[a].weight);
  }
  return p;
}

ProfileEditResult profile_edit_eval(const EvalContext& ctx, const ProfileSpec& profile,
                                    std::span<const std::int64_t> non_preferred,
                                    std::uint64_t seed) {
  ProfileEditResult out;
  for (std::size_t a = 0; a < non_preferred.size(); ++a) {
    const std::int64_t image = non_preferred[a];
    const StimulusSpec& x = ctx.stimulus(image);
    for (int f : profile.features) out.skipped_features += x.contains(f);
    auto edit = add_edit(ctx, profile.voxel_id, image, profile.features, kGeneratedImage,
                         derive_seed(seed, "profile", static_cast<std::uint64_t>(image)), "profile");
    if (!edit) {
      EditRecord same;
      same.voxel_id = profile.voxel_id;
      same.edited_image = image;
      same.reference_image = kGeneratedImage;
      same.before = same.after = ctx.predict_image(image, profile.voxel_id);
      same.condition = "profile";
      edit = same;
    }
    out.records.push_back(*edit);
  }
  return out;
}

}  // namespace voxlens
