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

#include "voxlens/encoder.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>

namespace voxlens {
namespace {

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

// Row-wise x / sqrt(mean(x²) + eps); writes the per-row scale into `rms`.
Matrix rms_normalize(const Matrix& x, double eps, Vector& rms) {
  rms.resize(x.rows());
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    rms(r) = std::sqrt(x.row(r).squaredNorm() / static_cast<double>(x.cols()) + eps);
    out.row(r) = x.row(r) / rms(r);
  }
  return out;
}

// Backward of rms_normalize given the normalized rows.
Matrix rms_backward(const Matrix& d_normed, const Matrix& normed,
                    const Vector& rms) {
  Matrix out(normed.rows(), normed.cols());
  const double d = static_cast<double>(normed.cols());
  for (Eigen::Index r = 0; r < normed.rows(); ++r) {
    const double proj = d_normed.row(r).dot(normed.row(r)) / d;
    out.row(r) = (d_normed.row(r) - proj * normed.row(r)) / rms(r);
  }
  return out;
}

void softmax_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double peak = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - peak).exp();
    m.row(r) /= m.row(r).sum();
  }
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite ") + what);
}

void check_voxels(const EncoderConfig& config, std::span<const int> voxel_ids) {
  if (voxel_ids.empty()) throw DimensionError("no voxels requested");
  for (int v : voxel_ids)
    if (v < 0 || v >= config.n_voxels)
      throw DimensionError("voxel id " + std::to_string(v) + " outside [0, " +
                           std::to_string(config.n_voxels) + ")");
}

// Shared forward from per-image keys and values. When `cache` is null only
// predictions are produced.
Matrix forward_core(const EncoderParams& p, std::span<const Matrix> keys,
                    std::span<const Matrix> values, std::span<const int> voxel_ids,
                    ForwardCache* cache) {
  const EncoderConfig& c = p.config;
  const int n_images = static_cast<int>(keys.size());
  const int n_vox = static_cast<int>(voxel_ids.size());
  const int d = c.model_dim;
  const int dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix embeddings(n_vox, d);
  for (int v = 0; v < n_vox; ++v)
    embeddings.row(v) = p.voxel_embeddings.row(voxel_ids[v]);
  Vector attn_rms;
  Matrix attn_normed = rms_normalize(embeddings, c.rms_epsilon, attn_rms);
  Matrix normed_q =
      attn_normed.array().rowwise() * p.attn_norm_gain.row(0).array();
  Matrix queries = normed_q * p.query;

  const Eigen::Index n_pairs = static_cast<Eigen::Index>(n_images) * n_vox;
  Matrix attended(n_pairs, d);
  std::vector<std::vector<Matrix>> attention(n_images);
  for (int i = 0; i < n_images; ++i) {
    if (keys[i].rows() < 1) throw DimensionError("empty token sequence");
    attention[i].resize(c.n_heads);
    for (int h = 0; h < c.n_heads; ++h) {
      Matrix weights = queries.middleCols(h * dh, dh) *
                       keys[i].middleCols(h * dh, dh).transpose() * scale;
      softmax_rows(weights);
      attended.block(static_cast<Eigen::Index>(i) * n_vox, h * dh, n_vox, dh) =
          weights * values[i].middleCols(h * dh, dh);
      attention[i][h] = std::move(weights);
    }
  }

  Matrix residual = attended * p.output;
  for (int i = 0; i < n_images; ++i)
    residual.middleRows(static_cast<Eigen::Index>(i) * n_vox, n_vox) += embeddings;
  Vector ffn_rms;
  Matrix ffn_normed = rms_normalize(residual, c.rms_epsilon, ffn_rms);
  Matrix ffn_pre = (ffn_normed.array().rowwise() * p.ffn_norm_gain.row(0).array())
                       .matrix() *
                   p.ffn_in;
  ffn_pre.rowwise() += p.ffn_in_bias.row(0);
  Matrix ffn_cdf = ffn_pre.unaryExpr([](double x) { return normal_cdf(x); });
  Matrix ffn_act = ffn_pre.cwiseProduct(ffn_cdf);
  Matrix block_out = residual + ffn_act * p.ffn_out;
  block_out.rowwise() += p.ffn_out_bias.row(0);

  Matrix predictions(n_images, n_vox);
  for (int i = 0; i < n_images; ++i)
    for (int v = 0; v < n_vox; ++v)
      predictions(i, v) =
          block_out.row(static_cast<Eigen::Index>(i) * n_vox + v)
              .dot(p.head_weights.row(voxel_ids[v])) +
          p.head_bias(0, voxel_ids[v]);

  if (cache != nullptr) {
    cache->voxel_ids.assign(voxel_ids.begin(), voxel_ids.end());
    cache->keys.assign(keys.begin(), keys.end());
    cache->values.assign(values.begin(), values.end());
    cache->attention = std::move(attention);
    cache->embeddings = std::move(embeddings);
    cache->attn_rms = std::move(attn_rms);
    cache->attn_normed = std::move(attn_normed);
    cache->queries = std::move(queries);
    cache->attended = std::move(attended);
    cache->residual = std::move(residual);
    cache->ffn_rms = std::move(ffn_rms);
    cache->ffn_normed = std::move(ffn_normed);
    cache->ffn_pre = std::move(ffn_pre);
    cache->ffn_cdf = std::move(ffn_cdf);
    cache->ffn_act = std::move(ffn_act);
    cache->block_out = std::move(block_out);
  }
  return predictions;
}

}  // namespace

void EncoderConfig::validate() const {
  if (token_dim < 1 || model_dim < 1 || n_heads < 1 || ffn_expansion < 1 ||
      n_voxels < 1)
    throw ConfigError("encoder dimensions must be positive");
  if (model_dim % n_heads != 0)
    throw ConfigError("model_dim " + std::to_string(model_dim) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  if (!(rms_epsilon > 0.0)) throw ConfigError("rms_epsilon must be positive");
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"token_dim", c.token_dim},         {"model_dim", c.model_dim},
          {"n_heads", c.n_heads},             {"ffn_expansion", c.ffn_expansion},
          {"n_voxels", c.n_voxels},           {"rms_epsilon", c.rms_epsilon}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("token_dim", c.token_dim);
  get("model_dim", c.model_dim);
  get("n_heads", c.n_heads);
  get("ffn_expansion", c.ffn_expansion);
  get("n_voxels", c.n_voxels);
  get("rms_epsilon", c.rms_epsilon);
  return c;
}

EncoderParams EncoderParams::zeros(const EncoderConfig& c) {
  c.validate();
  EncoderParams p;
  p.config = c;
  const int d = c.model_dim;
  const int f = c.ffn_dim();
  p.voxel_embeddings = Matrix::Zero(c.n_voxels, d);
  p.query = Matrix::Zero(d, d);
  p.key = Matrix::Zero(c.token_dim, d);
  p.value = Matrix::Zero(c.token_dim, d);
  p.output = Matrix::Zero(d, d);
  p.attn_norm_gain = Matrix::Zero(1, d);
  p.ffn_norm_gain = Matrix::Zero(1, d);
  p.ffn_in = Matrix::Zero(d, f);
  p.ffn_in_bias = Matrix::Zero(1, f);
  p.ffn_out = Matrix::Zero(f, d);
  p.ffn_out_bias = Matrix::Zero(1, d);
  p.head_weights = Matrix::Zero(c.n_voxels, d);
  p.head_bias = Matrix::Zero(1, c.n_voxels);
  return p;
}

std::vector<EncoderParams::Named> EncoderParams::tensors() {
  return {{"voxel_embeddings", &voxel_embeddings},
          {"query", &query},
          {"key", &key},
          {"value", &value},
          {"output", &output},
          {"attn_norm_gain", &attn_norm_gain},
          {"ffn_norm_gain", &ffn_norm_gain},
          {"ffn_in", &ffn_in},
          {"ffn_in_bias", &ffn_in_bias},
          {"ffn_out", &ffn_out},
          {"ffn_out_bias", &ffn_out_bias},
          {"head_weights", &head_weights},
          {"head_bias", &head_bias}};
}

std::vector<EncoderParams::ConstNamed> EncoderParams::tensors() const {
  std::vector<ConstNamed> out;
  for (const auto& t : const_cast<EncoderParams*>(this)->tensors())
    out.push_back({t.name, t.tensor});
  return out;
}

std::size_t EncoderParams::size() const {
  std::size_t n = 0;
  for (const auto& t : tensors()) n += static_cast<std::size_t>(t.tensor->size());
  return n;
}

bool EncoderParams::all_finite() const {
  for (const auto& t : tensors())
    if (!t.tensor->allFinite()) return false;
  return true;
}

std::uint64_t EncoderParams::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t word) {
    h ^= word;
    h *= 0x100000001b3ULL;
    h ^= h >> 29;
  };
  for (int dim : {config.token_dim, config.model_dim, config.n_heads,
                  config.ffn_expansion, config.n_voxels})
    mix(static_cast<std::uint64_t>(dim));
  for (const auto& t : tensors()) {
    const double* data = t.tensor->data();
    for (Eigen::Index i = 0; i < t.tensor->size(); ++i)
      mix(std::bit_cast<std::uint64_t>(data[i]));
  }
  return h;
}

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  EncoderParams p = EncoderParams::zeros(config);
  std::mt19937_64 rng(seed);
  auto fill = [&rng](Matrix& m, int fan_in) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(fan_in));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  };
  const int d = config.model_dim;
  fill(p.voxel_embeddings, d);
  fill(p.query, d);
  fill(p.key, config.token_dim);
  fill(p.value, config.token_dim);
  fill(p.output, d);
  fill(p.ffn_in, d);
  fill(p.ffn_out, config.ffn_dim());
  fill(p.head_weights, d);
  p.attn_norm_gain.setOnes();
  p.ffn_norm_gain.setOnes();
  return p;
}

ForwardResult forward(const EncoderParams& params,
                      std::span<const Matrix> token_batch,
                      std::span<const int> voxel_ids) {
  const EncoderConfig& c = params.config;
  check_voxels(c, voxel_ids);
  if (token_batch.empty()) throw DimensionError("empty image batch");
  ForwardResult result;
  ForwardCache& cache = result.cache;
  cache.param_fingerprint = params.fingerprint();
  cache.tokens.assign(token_batch.begin(), token_batch.end());
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  keys.reserve(token_batch.size());
  values.reserve(token_batch.size());
  for (const Matrix& x : token_batch) {
    if (x.cols() != c.token_dim)
      throw DimensionError("token width " + std::to_string(x.cols()) +
                           " does not match token_dim " +
                           std::to_string(c.token_dim));
    check_finite(x, "input tokens");
    keys.push_back(x * params.key);
    values.push_back(x * params.value);
  }
  result.predictions = forward_core(params, keys, values, voxel_ids, &cache);
  return result;
}

Matrix predict(const EncoderParams& params, std::span<const Matrix> token_batch,
               std::span<const int> voxel_ids) {
  check_voxels(params.config, voxel_ids);
  std::vector<Matrix> keys;
  std::vector<Matrix> values;
  for (const Matrix& x : token_batch) {
    if (x.cols() != params.config.token_dim)
      throw DimensionError("token width does not match token_dim");
    check_finite(x, "input tokens");
    keys.push_back(x * params.key);
    values.push_back(x * params.value);
  }
  return forward_core(params, keys, values, voxel_ids, nullptr);
}

std::vector<double> predict(const EncoderParams& params, const Matrix& tokens,
                            std::span<const int> voxel_ids) {
  Matrix out = predict(params, std::span<const Matrix>(&tokens, 1), voxel_ids);
  return std::vector<double>(out.data(), out.data() + out.size());
}

TokenProjection project_tokens(const EncoderParams& params,
                               const Matrix& tokens) {
  if (tokens.cols() != params.config.token_dim)
    throw DimensionError("token width does not match token_dim");
  return {tokens * params.key, tokens * params.value};
}

double predict_projected(const EncoderParams& params,
                         const TokenProjection& projection, int voxel_id) {
  const int ids[1] = {voxel_id};
  check_voxels(params.config, ids);
  Matrix out = forward_core(params, std::span<const Matrix>(&projection.keys, 1),
                            std::span<const Matrix>(&projection.values, 1), ids,
                            nullptr);
  return out(0, 0);
}

Gradients backward(const EncoderParams& p, const ForwardCache& cache,
                   const Matrix& d_pred, const BackwardOptions& options) {
  if (cache.param_fingerprint != p.fingerprint())
    throw Error("stale forward cache: parameters changed since the forward pass");
  const EncoderConfig& c = p.config;
  const int n_images = cache.n_images();
  const int n_vox = cache.n_voxels();
  if (d_pred.rows() != n_images || d_pred.cols() != n_vox)
    throw DimensionError("upstream gradient shape does not match predictions");
  if (!options.attribution_deltas.empty() &&
      static_cast<int>(options.attribution_deltas.size()) != n_images)
    throw DimensionError("one attribution delta per image is required");
  const int d = c.model_dim;
  const int dh = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index n_pairs = static_cast<Eigen::Index>(n_images) * n_vox;
  const bool want_params = options.parameter_grads;

  Gradients g;
  if (want_params) g.params = EncoderParams::zeros(c);
  EncoderParams& gp = g.params;

  // Output heads.
  Matrix d_block(n_pairs, d);
  for (int i = 0; i < n_images; ++i) {
    for (int v = 0; v < n_vox; ++v) {
      const Eigen::Index r = static_cast<Eigen::Index>(i) * n_vox + v;
      const int id = cache.voxel_ids[v];
      d_block.row(r) = d_pred(i, v) * p.head_weights.row(id);
      if (want_params) {
        gp.head_weights.row(id) += d_pred(i, v) * cache.block_out.row(r);
        gp.head_bias(0, id) += d_pred(i, v);
      }
    }
  }

  // Feedforward block with residual.
  Matrix d_residual = d_block;
  Matrix d_act = d_block * p.ffn_out.transpose();
  // gelu'(x) = Φ(x) + x φ(x)
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  Matrix d_pre =
      d_act.array() *
      (cache.ffn_cdf.array() +
       cache.ffn_pre.array() * (-0.5 * cache.ffn_pre.array().square()).exp() * inv_sqrt_2pi);
  Matrix d_normed_gained = d_pre * p.ffn_in.transpose();
  if (want_params) {
    gp.ffn_out = cache.ffn_act.transpose() * d_block;
    gp.ffn_out_bias = d_block.colwise().sum();
    Matrix normed_gained =
        cache.ffn_normed.array().rowwise() * p.ffn_norm_gain.row(0).array();
    gp.ffn_in = normed_gained.transpose() * d_pre;
    gp.ffn_in_bias = d_pre.colwise().sum();
    gp.ffn_norm_gain =
        (d_normed_gained.array() * cache.ffn_normed.array()).colwise().sum();
  }
  Matrix d_normed =
      d_normed_gained.array().rowwise() * p.ffn_norm_gain.row(0).array();
  d_residual += rms_backward(d_normed, cache.ffn_normed, cache.ffn_rms);

  // Attention output projection and residual from the embedding.
  Matrix d_embeddings = Matrix::Zero(n_vox, d);
  for (int i = 0; i < n_images; ++i)
    d_embeddings += d_residual.middleRows(static_cast<Eigen::Index>(i) * n_vox, n_vox);
  Matrix d_attended = d_residual * p.output.transpose();
  if (want_params) gp.output = cache.attended.transpose() * d_residual;

  // Per-head attention.
  Matrix d_queries = Matrix::Zero(n_vox, d);
  if (options.token_grads) g.tokens.resize(n_images);
  if (!options.attribution_deltas.empty()) g.token_dots.resize(n_images);
  for (int i = 0; i < n_images; ++i) {
    const Matrix& keys = cache.keys[i];
    const Matrix& values = cache.values[i];
    const Eigen::Index s = keys.rows();
    Matrix d_keys(s, d);
    Matrix d_values(s, d);
    Matrix delta_keys;
    Matrix delta_values;
    if (!options.attribution_deltas.empty()) {
      const Matrix& delta = options.attribution_deltas[i];
      if (delta.rows() != s || delta.cols() != c.token_dim)
        throw DimensionError("attribution delta shape does not match tokens");
      delta_keys = delta * p.key;
      delta_values = delta * p.value;
      g.token_dots[i] = Matrix::Zero(n_vox, s);
    }
    for (int h = 0; h < c.n_heads; ++h) {
      const Matrix& weights = cache.attention[i][h];
      auto d_out = d_attended.block(static_cast<Eigen::Index>(i) * n_vox, h * dh,
                                    n_vox, dh);
      auto q_h = cache.queries.middleCols(h * dh, dh);
      Matrix d_weights = d_out * values.middleCols(h * dh, dh).transpose();
      d_values.middleCols(h * dh, dh) = weights.transpose() * d_out;
      Vector row_dot = (d_weights.array() * weights.array()).rowwise().sum();
      Matrix d_scores =
          (weights.array() * (d_weights.colwise() - row_dot).array()) * scale;
      d_queries.middleCols(h * dh, dh) += d_scores * keys.middleCols(h * dh, dh);
      d_keys.middleCols(h * dh, dh) = d_scores.transpose() * q_h;
      if (!options.attribution_deltas.empty()) {
        g.token_dots[i].array() +=
            weights.array() *
                (d_out * delta_values.middleCols(h * dh, dh).transpose()).array() +
            d_scores.array() *
                (q_h * delta_keys.middleCols(h * dh, dh).transpose()).array();
      }
    }
    if (want_params) {
      gp.key += cache.tokens[i].transpose() * d_keys;
      gp.value += cache.tokens[i].transpose() * d_values;
    }
    if (options.token_grads)
      g.tokens[i] = d_keys * p.key.transpose() + d_values * p.value.transpose();
  }

  // Query path back to the voxel embeddings.
  Matrix d_normed_q = d_queries * p.query.transpose();
  if (want_params) {
    Matrix normed_q =
        cache.attn_normed.array().rowwise() * p.attn_norm_gain.row(0).array();
    gp.query = normed_q.transpose() * d_queries;
    gp.attn_norm_gain =
        (d_normed_q.array() * cache.attn_normed.array()).colwise().sum();
  }
  Matrix d_attn_normed =
      d_normed_q.array().rowwise() * p.attn_norm_gain.row(0).array();
  d_embeddings += rms_backward(d_attn_normed, cache.attn_normed, cache.attn_rms);
  if (want_params)
    for (int v = 0; v < n_vox; ++v)
      gp.voxel_embeddings.row(cache.voxel_ids[v]) += d_embeddings.row(v);
  return g;
}

MseResult mse_loss(const Matrix& predictions, const Matrix& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols())
    throw DimensionError("predictions and targets differ in shape");
  if (predictions.size() == 0) throw InsufficientDataError("empty batch");
  const double n = static_cast<double>(predictions.size());
  MseResult out;
  Matrix diff = predictions - targets;
  out.loss = diff.squaredNorm() / n;
  out.gradient = diff * (2.0 / n);
  return out;
}

}  // namespace voxlens
