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

// Voxel-embedding cross-attention encoder with analytic gradients.
//
// For voxel v and a token sequence X (s × d_s):
//   n   = rms_norm(e_v) ⊙ g_attn,   q = n W_Q
//   K   = X W_K,  V = X W_V
//   o_h = softmax(q_h K_h^T / sqrt(d_head)) V_h        (per head h)
//   a   = e_v + concat(o_h) W_O
//   z   = a + gelu(rms_norm(a) ⊙ g_ffn W_1 + b_1) W_2 + b_2
//   ŷ   = z · w_v + c_v
// All vectors are rows. Keys and values consume raw tokens.

#ifndef VOXLENS_ENCODER_H_
#define VOXLENS_ENCODER_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"

namespace voxlens {

struct EncoderConfig {
  int token_dim = 64;
  int model_dim = 64;
  int n_heads = 8;
  int ffn_expansion = 4;
  int n_voxels = 200;
  double rms_epsilon = 1e-6;

  int head_dim() const { return model_dim / n_heads; }
  int ffn_dim() const { return ffn_expansion * model_dim; }
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

nlohmann::json to_json(const EncoderConfig& config);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// Parameters (and, with the same layout, gradients and optimizer moments).
// Vectors are stored as single-row matrices.
struct EncoderParams {
  EncoderConfig config;
  Matrix voxel_embeddings;  // V × d_v
  Matrix query;             // d_v × d_v
  Matrix key;               // d_s × d_v
  Matrix value;             // d_s × d_v
  Matrix output;            // d_v × d_v
  Matrix attn_norm_gain;    // 1 × d_v
  Matrix ffn_norm_gain;     // 1 × d_v
  Matrix ffn_in;            // d_v × f
  Matrix ffn_in_bias;       // 1 × f
  Matrix ffn_out;           // f × d_v
  Matrix ffn_out_bias;      // 1 × d_v
  Matrix head_weights;      // V × d_v
  Matrix head_bias;         // 1 × V

  static EncoderParams zeros(const EncoderConfig& config);

  struct Named {
    const char* name;
    Matrix* tensor;
  };
  struct ConstNamed {
    const char* name;
    const Matrix* tensor;
  };
  // Fixed serialization order.
  std::vector<Named> tensors();
  std::vector<ConstNamed> tensors() const;

  std::size_t size() const;
  bool all_finite() const;
  // Hash of config and every parameter bit; identifies a parameter state.
  std::uint64_t fingerprint() const;
};

// Scaled Gaussian matrices (sd = 1/sqrt(fan_in)), unit RMS gains, zero
// biases and intercepts.
EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed);

// Intermediates of one batched forward pass over B images × |voxels| pairs.
// Pair rows are ordered image-major: row = image * n_voxels + voxel slot.
struct ForwardCache {
  std::uint64_t param_fingerprint = 0;
  std::vector<int> voxel_ids;
  std::vector<Matrix> tokens;  // per image, s × d_s
  std::vector<Matrix> keys;    // per image, s × d_v
  std::vector<Matrix> values;  // per image, s × d_v
  // attention[image][head]: n_voxels × s, rows sum to 1.
  std::vector<std::vector<Matrix>> attention;
  Matrix embeddings;  // n_voxels × d_v
  Vector attn_rms;    // n_voxels
  Matrix attn_normed; // n_voxels × d_v, before gain
  Matrix queries;     // n_voxels × d_v
  Matrix attended;    // pairs × d_v, concatenated head outputs
  Matrix residual;    // pairs × d_v, a
  Vector ffn_rms;     // pairs
  Matrix ffn_normed;  // pairs × d_v, before gain
  Matrix ffn_pre;     // pairs × f
  Matrix ffn_cdf;     // pairs × f, Φ(ffn_pre)
  Matrix ffn_act;     // pairs × f
  Matrix block_out;   // pairs × d_v, z

  int n_images() const { return static_cast<int>(tokens.size()); }
  int n_voxels() const { return static_cast<int>(voxel_ids.size()); }
};

struct ForwardResult {
  Matrix predictions;  // B × n_voxels
  ForwardCache cache;
};

ForwardResult forward(const EncoderParams& params,
                      std::span<const Matrix> token_batch,
                      std::span<const int> voxel_ids);

// Predictions only, one row per image.
Matrix predict(const EncoderParams& params, std::span<const Matrix> token_batch,
               std::span<const int> voxel_ids);
std::vector<double> predict(const EncoderParams& params, const Matrix& tokens,
                            std::span<const int> voxel_ids);

struct BackwardOptions {
  bool parameter_grads = true;
  bool token_grads = false;
  // When set (one s × d_s matrix per image), fills Gradients::token_dots with
  // Σ_e ∂ŷ_{image,v}/∂x_{j,e} · deltas[image](j,e) weighted by d_predictions,
  // separately for every voxel.
  std::span<const Matrix> attribution_deltas;
};

struct Gradients {
  EncoderParams params;
  std::vector<Matrix> tokens;      // per image, s × d_s (sum over voxels)
  std::vector<Matrix> token_dots;  // per image, n_voxels × s
};

// Gradients of Σ d_predictions ⊙ predictions. Throws Error when the cache was
// produced from a different parameter state.
Gradients backward(const EncoderParams& params, const ForwardCache& cache,
                   const Matrix& d_predictions,
                   const BackwardOptions& options = {});

// Keys and values of one token sequence.
struct TokenProjection {
  Matrix keys;    // s × d_v
  Matrix values;  // s × d_v
};

TokenProjection project_tokens(const EncoderParams& params,
                               const Matrix& tokens);

// Prediction of a single voxel from precomputed keys/values (rows of a
// projection may have been replaced, e.g. by patching).
double predict_projected(const EncoderParams& params,
                         const TokenProjection& projection, int voxel_id);

struct MseResult {
  double loss = 0.0;
  Matrix gradient;  // same shape as the predictions
};

// Mean squared error over all entries; gradient 2(ŷ - y)/n.
MseResult mse_loss(const Matrix& predictions, const Matrix& targets);

}  // namespace voxlens

#endif  // VOXLENS_ENCODER_H_
