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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "voxlens/trainer.h"

namespace voxlens {
namespace {

constexpr Eigen::Index kPairsPerChunk = 4096;

double patched_mean(const std::vector<double>& values, const std::vector<bool>& valid) {
  double total = 0.0;
  int count = 0;
  for (std::size_t v = 0; v < values.size(); ++v) {
    if (!valid[v]) continue;
    total += values[v];
    ++count;
  }
  if (count == 0) throw InsufficientDataError("no voxel with a defined R²");
  return total / count;
}

}  // namespace

BaselineToken mean_baseline(std::span<const Matrix> token_tensors, std::string provenance) {
  if (token_tensors.empty()) throw InsufficientDataError("mean_baseline: empty corpus");
  const Eigen::Index width = token_tensors.front().cols();
  Matrix sum = Matrix::Zero(1, width);
  Eigen::Index n = 0;
  for (const Matrix& t : token_tensors) {
    if (t.cols() != width) throw DimensionError("mean_baseline: token widths differ");
    sum += t.colwise().sum();
    n += t.rows();
  }
  if (n == 0) throw InsufficientDataError("mean_baseline: corpus has no tokens");
  // Second pass removes the rounding error of the first.
  Matrix mean = sum / static_cast<double>(n);
  Matrix correction = Matrix::Zero(1, width);
  for (const Matrix& t : token_tensors) correction += (t.rowwise() - mean.row(0)).colwise().sum();
  BaselineToken out{mean + correction / static_cast<double>(n), std::move(provenance)};
  if (!out.values.allFinite()) throw NumericError("mean_baseline: non-finite mean");
  return out;
}

void StreamingMean::add(const Matrix& tokens) {
  if (count_ == 0 && mean_.size() == 0) mean_ = Matrix::Zero(1, tokens.cols());
  if (tokens.cols() != mean_.cols()) throw DimensionError("StreamingMean: token width changed");
  for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
    ++count_;
    mean_ += (tokens.row(r) - mean_) / static_cast<double>(count_);
  }
}

BaselineToken StreamingMean::result(std::string provenance) const {
  if (count_ == 0) throw InsufficientDataError("StreamingMean: no tokens seen");
  return {mean_, std::move(provenance)};
}

Matrix baseline_sequence(const BaselineToken& baseline, int seq_len) {
  if (baseline.values.rows() != 1) throw DimensionError("baseline must be a single row");
  return baseline.values.replicate(seq_len, 1);
}

nlohmann::json to_json(const AttributionRecord& r) {
  return {{"voxel_id", r.voxel_id},
          {"image_id", r.image_id},
          {"scores", r.scores},
          {"prediction", r.prediction},
          {"baseline_prediction", r.baseline_prediction},
          {"completeness_gap", r.completeness_gap},
          {"n_steps", r.n_steps}};
}

AttributionRecord attribution_from_json(const nlohmann::json& j) {
  AttributionRecord r;
  j.at("voxel_id").get_to(r.voxel_id);
  j.at("image_id").get_to(r.image_id);
  j.at("scores").get_to(r.scores);
  j.at("prediction").get_to(r.prediction);
  j.at("baseline_prediction").get_to(r.baseline_prediction);
  j.at("completeness_gap").get_to(r.completeness_gap);
  j.at("n_steps").get_to(r.n_steps);
  return r;
}

DifferentiableModel linear_probe(const Matrix& weights, double bias) {
  if (weights.rows() != 1) throw DimensionError("linear_probe: weights must be one row");
  return {[weights, bias](const Matrix& x) {
            if (x.cols() != weights.cols()) throw DimensionError("linear_probe: width mismatch");
            return (x * weights.transpose()).sum() + bias;
          },
          [weights](const Matrix& x) -> Matrix { return weights.replicate(x.rows(), 1); }};
}

AttributionRecord integrated_gradients(const DifferentiableModel& model,
                                       const Matrix& tokens, const Matrix& baseline_seq,
                                       int n_steps, bool absolute) {
  if (n_steps < 1) throw ConfigError("integrated_gradients: n_steps must be at least 1");
  if (tokens.rows() != baseline_seq.rows() || tokens.cols() != baseline_seq.cols()) {
    throw DimensionError("integrated_gradients: baseline sequence shape differs");
  }
  const Matrix delta = tokens - baseline_seq;
  Matrix grad_sum = Matrix::Zero(tokens.rows(), tokens.cols());
  for (int i = 0; i < n_steps; ++i) {
    const double alpha = static_cast<double>(i) / n_steps;
    Matrix g = model.gradient(baseline_seq + alpha * delta);
    if (!g.allFinite()) throw NumericError("integrated_gradients: non-finite gradient");
    grad_sum += g;
  }
  const Matrix entries = delta.cwiseProduct(grad_sum) / static_cast<double>(n_steps);
  AttributionRecord out;
  out.n_steps = n_steps;
  out.prediction = model.predict(tokens);
  out.baseline_prediction = model.predict(baseline_seq);
  const Vector signed_scores = entries.rowwise().sum();
  const Vector scores = absolute ? Vector(entries.cwiseAbs().rowwise().sum()) : signed_scores;
  out.scores.assign(scores.data(), scores.data() + scores.size());
  out.completeness_gap = std::abs(signed_scores.sum() - out.prediction_difference());
  return out;
}

DifferentiableModel encoder_voxel_model(const EncoderParams& params, int voxel_id) {
  return {[&params, voxel_id](const Matrix& x) {
            const int ids[1] = {voxel_id};
            return predict(params, x, ids)[0];
          },
          [&params, voxel_id](const Matrix& x) {
            const int ids[1] = {voxel_id};
            ForwardResult fwd = forward(params, std::span<const Matrix>(&x, 1), ids);
            BackwardOptions opts;
            opts.parameter_grads = false;
            opts.token_grads = true;
            return backward(params, fwd.cache, Matrix::Ones(1, 1), opts).tokens[0];
          }};
}

std::vector<AttributionRecord> integrated_gradients(
    const EncoderParams& params, const Matrix& tokens, std::span<const int> voxel_ids,
    const BaselineToken& baseline, int n_steps, std::int64_t image_id, bool absolute) {
  if (n_steps < 1) throw ConfigError("integrated_gradients: n_steps must be at least 1");
  if (voxel_ids.empty()) throw DimensionError("integrated_gradients: no voxels");
  const Matrix base = baseline_sequence(baseline, static_cast<int>(tokens.rows()));
  if (base.cols() != tokens.cols()) throw DimensionError("baseline width differs from tokens");
  const Matrix delta = tokens - base;
  const Eigen::Index n_vox = static_cast<Eigen::Index>(voxel_ids.size());
  const Eigen::Index s = tokens.rows();
  const int chunk = static_cast<int>(std::max<Eigen::Index>(1, kPairsPerChunk / n_vox));

  Matrix signed_sum = Matrix::Zero(n_vox, s);
  // Per voxel, s × d_s sums of token gradients (absolute mode only).
  std::vector<Matrix> grad_sums;
  if (absolute) grad_sums.assign(n_vox, Matrix::Zero(s, tokens.cols()));

  for (int start = 0; start < n_steps; start += chunk) {
    const int count = std::min(chunk, n_steps - start);
    std::vector<Matrix> points;
    points.reserve(count);
    for (int i = start; i < start + count; ++i) {
      points.push_back(base + (static_cast<double>(i) / n_steps) * delta);
    }
    ForwardResult fwd = forward(params, points, voxel_ids);
    BackwardOptions opts;
    opts.parameter_grads = false;
    std::vector<Matrix> deltas(count, delta);
    opts.attribution_deltas = deltas;
    Gradients g = backward(params, fwd.cache, Matrix::Ones(count, n_vox), opts);
    for (const Matrix& dots : g.token_dots) signed_sum += dots;
    if (absolute) {
      BackwardOptions tok;
      tok.parameter_grads = false;
      tok.token_grads = true;
      for (Eigen::Index v = 0; v < n_vox; ++v) {
        Matrix upstream = Matrix::Zero(count, n_vox);
        upstream.col(v).setOnes();
        Gradients gv = backward(params, fwd.cache, upstream, tok);
        for (const Matrix& t : gv.tokens) grad_sums[v] += t;
      }
    }
  }
  if (!signed_sum.allFinite()) throw NumericError("integrated_gradients: non-finite gradient");
  signed_sum /= static_cast<double>(n_steps);

  const Matrix ends[2] = {tokens, base};
  const Matrix endpoint = predict(params, ends, voxel_ids);
  std::vector<AttributionRecord> out(n_vox);
  for (Eigen::Index v = 0; v < n_vox; ++v) {
    AttributionRecord& r = out[v];
    r.voxel_id = voxel_ids[v];
    r.image_id = image_id;
    r.n_steps = n_steps;
    r.prediction = endpoint(0, v);
    r.baseline_prediction = endpoint(1, v);
    r.completeness_gap = std::abs(signed_sum.row(v).sum() - r.prediction_difference());
    if (absolute) {
      const Matrix entries = delta.cwiseProduct(grad_sums[v]) / static_cast<double>(n_steps);
      const Vector scores = entries.cwiseAbs().rowwise().sum();
      r.scores.assign(scores.data(), scores.data() + s);
    } else {
      r.scores.assign(signed_sum.row(v).data(), signed_sum.row(v).data() + s);
    }
  }
  return out;
}

std::vector<Matrix> attribution_scores(const EncoderParams& params,
                                       std::span<const Matrix> tokens,
                                       const BaselineToken& baseline, int n_steps,
                                       int workers) {
  std::vector<int> voxels(params.config.n_voxels);
  std::iota(voxels.begin(), voxels.end(), 0);
  std::vector<Matrix> out(tokens.size());
  parallel_for(static_cast<int>(tokens.size()), workers, [&](int i) {
    auto records = integrated_gradients(params, tokens[i], voxels, baseline, n_steps, i);
    Matrix m(voxels.size(), tokens[i].rows());
    for (std::size_t v = 0; v < records.size(); ++v) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(v, j) = records[v].scores[j];
    }
    out[i] = std::move(m);
  });
  return out;
}

const char* to_string(Selection selection) {
  switch (selection) {
    case Selection::kTop: return "top";
    case Selection::kLowest: return "lowest";
    case Selection::kRandom: return "random";
  }
  return "?";
}

Selection selection_from_string(const std::string& name) {
  if (name == "top") return Selection::kTop;
  if (name == "lowest") return Selection::kLowest;
  if (name == "random") return Selection::kRandom;
  throw ConfigError("unknown selection '" + name + "'");
}

const char* to_string(PatchMode mode) {
  return mode == PatchMode::kNecessity ? "necessity" : "sufficiency";
}

std::vector<int> top_k_tokens(std::span<const double> scores, int k, Selection selection,
                              std::uint64_t seed) {
  const int s = static_cast<int>(scores.size());
  if (k < 0 || k > s) {
    throw DimensionError("top_k_tokens: k=" + std::to_string(k) + " outside [0, " +
                         std::to_string(s) + "]");
  }
  std::vector<int> idx(s);
  std::iota(idx.begin(), idx.end(), 0);
  if (selection == Selection::kRandom) {
    std::mt19937_64 rng(seed);
    for (int a = 0; a < k; ++a) {
      std::uniform_int_distribution<int> pick(a, s - 1);
      std::swap(idx[a], idx[pick(rng)]);
    }
  } else {
    const bool top = selection == Selection::kTop;
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return top ? scores[a] > scores[b] : scores[a] < scores[b];
      return a < b;
    });
  }
  idx.resize(k);
  return idx;
}

PatchResult patch_eval(const EncoderParams& params, std::span<const Matrix> tokens,
                       const Matrix& targets, std::span<const Matrix> scores,
                       const BaselineToken& baseline, int k, PatchMode mode,
                       Selection selection, std::uint64_t seed, int workers) {
  const int n_images = static_cast<int>(tokens.size());
  const int n_vox = params.config.n_voxels;
  if (n_images == 0) throw InsufficientDataError("patch_eval: no images");
  if (targets.rows() != n_images || targets.cols() != n_vox) {
    throw DimensionError("patch_eval: targets must be n_images × n_voxels");
  }
  if (static_cast<int>(scores.size()) != n_images && selection != Selection::kRandom) {
    throw DimensionError("patch_eval: one score matrix per image is required");
  }
  Matrix full(n_images, n_vox);
  Matrix patched(n_images, n_vox);
  const Matrix base_keys = baseline.values * params.key;
  const Matrix base_values = baseline.values * params.value;

  parallel_for(n_images, workers, [&](int i) {
    const TokenProjection proj = project_tokens(params, tokens[i]);
    const int s = static_cast<int>(tokens[i].rows());
    std::vector<double> row(s, 0.0);
    for (int v = 0; v < n_vox; ++v) {
      full(i, v) = predict_projected(params, proj, v);
      if (selection != Selection::kRandom) {
        if (scores[i].rows() != n_vox || scores[i].cols() != s) {
          throw DimensionError("patch_eval: score matrix must be n_voxels × s");
        }
        for (int j = 0; j < s; ++j) row[j] = scores[i](v, j);
      }
      const std::vector<int> chosen = top_k_tokens(
          row, k, selection,
          derive_seed(seed, "patch", static_cast<std::uint64_t>(i) * n_vox + v));
      std::vector<bool> replace(s, mode == PatchMode::kSufficiency);
      for (int j : chosen) replace[j] = mode == PatchMode::kNecessity;
      TokenProjection p = proj;
      for (int j = 0; j < s; ++j) {
        if (!replace[j]) continue;
        p.keys.row(j) = base_keys;
        p.values.row(j) = base_values;
      }
      patched(i, v) = predict_projected(params, p, v);
    }
  });

  PatchResult out;
  out.mode = mode;
  out.selection = selection;
  out.k = k;
  // Both R² sets come from the same single-pair forward path.
  const R2Result r2_full = r2_scores(full, targets);
  out.r2 = r2_full.per_voxel;
  out.valid = r2_full.valid;
  out.r2_patched = r2_scores(patched, targets).per_voxel;
  out.mean_r2 = patched_mean(out.r2, out.valid);
  out.mean_r2_patched = patched_mean(out.r2_patched, out.valid);
  out.ratio = out.mean_r2_patched / out.mean_r2;
  return out;
}

PatchCurve patch_curve(const EncoderParams& params, std::span<const Matrix> tokens,
                       const Matrix& targets, std::span<const Matrix> scores,
                       const BaselineToken& baseline, std::span<const int> ks,
                       PatchMode mode, Selection selection, std::uint64_t seed,
                       int workers) {
  PatchCurve curve{mode, selection, {}};
  for (std::size_t a = 0; a < ks.size(); ++a) {
    if (a > 0 && ks[a] <= ks[a - 1]) throw ConfigError("patch_curve: k must increase");
    curve.points.push_back(patch_eval(params, tokens, targets, scores, baseline, ks[a], mode,
                                      selection, seed, workers));
  }
  return curve;
}

}  // namespace voxlens
