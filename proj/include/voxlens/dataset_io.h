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

// File formats.
//
// Token tensors and checkpoints share one layout: a single-line JSON header
// terminated by '\n', followed by a raw little-endian IEEE-754 payload.
//
//   tokens:      {"format":"voxlens-tokens","version":1,"n_images":N,
//                 "seq_len":S,"token_dim":D,"dtype":"f32",
//                 "layout":"row-major","endianness":"little",
//                 "image_ids":[...]}
//                payload: N·S·D f32 values, image-major, then token, then dim.
//   checkpoint:  {"format":"voxlens-checkpoint","version":1,"config":{...},
//                 "tensors":[{"name":..,"shape":[r,c]},...],"epoch":..,
//                 "seed":..,"hyperparameters":{...},"dtype":"f64",...}
//                payload: f64 values of each tensor (row-major) in the order
//                listed by "tensors".
//
// Responses are JSON-lines ({"image_id","voxel_id","rep","response"} per
// line) or CSV with header image_id,voxel_id,rep,response; the format is
// chosen by file extension (.csv or anything else for JSON-lines).

#ifndef VOXLENS_DATASET_IO_H_
#define VOXLENS_DATASET_IO_H_

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"
#include "voxlens/encoder.h"
#include "voxlens/responses.h"

namespace voxlens {

struct TokenTensors {
  int n_images = 0;
  int seq_len = 0;
  int token_dim = 0;
  std::vector<std::int64_t> image_ids;
  std::vector<float> data;

  Matrix image(int index) const;  // widened to f64
  std::vector<Matrix> images() const;
  static TokenTensors from_matrices(std::span<const Matrix> images,
                                    std::vector<std::int64_t> image_ids);
  bool operator==(const TokenTensors&) const = default;
};

void write_tokens(const std::filesystem::path& path, const TokenTensors& tensors);
TokenTensors read_tokens(const std::filesystem::path& path);

struct ResponseRow {
  std::int64_t image_id = 0;
  int voxel_id = 0;
  int rep_index = 0;
  double response = 0.0;
  bool operator==(const ResponseRow&) const = default;
};

void write_responses(const std::filesystem::path& path,
                     std::span<const ResponseRow> rows);
// Validates that (image, voxel, rep) keys are unique and responses finite.
std::vector<ResponseRow> read_responses(const std::filesystem::path& path);

std::vector<ResponseRow> rows_from_cube(const ResponseCube& cube,
                                        std::span<const std::int64_t> image_ids);
// Image rows follow `image_ids`; every (image, voxel, rep) must be present.
ResponseCube cube_from_rows(std::span<const ResponseRow> rows,
                            std::span<const std::int64_t> image_ids);

struct SplitSpec {
  std::vector<std::int64_t> train;
  std::vector<std::int64_t> val;
  std::vector<std::int64_t> test;
  std::vector<std::int64_t> analysis;

  // Pairwise disjoint and drawn from `dataset_ids`.
  void validate(std::span<const std::int64_t> dataset_ids) const;
};

nlohmann::json to_json(const SplitSpec& split);
SplitSpec split_from_json(const nlohmann::json& j);

// Seeded shuffle, then consecutive blocks of round(fraction·n) ids for
// train, val, test and analysis.
SplitSpec make_splits(std::span<const std::int64_t> image_ids,
                      const std::array<double, 4>& fractions, std::uint64_t seed);

struct CheckpointInfo {
  int epoch = 0;
  std::uint64_t seed = 0;
  nlohmann::json hyperparameters = nlohmann::json::object();
};

inline constexpr int kCheckpointVersion = 1;

void write_checkpoint(const std::filesystem::path& path,
                      const EncoderParams& params,
                      const CheckpointInfo& info = {});
// When `expected` is given, the stored config must match it.
EncoderParams read_checkpoint(const std::filesystem::path& path,
                              CheckpointInfo* info = nullptr,
                              const EncoderConfig* expected = nullptr);

// Small text helpers shared by the pipeline.
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path,
                 std::span<const nlohmann::json> records);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

}  // namespace voxlens

#endif  // VOXLENS_DATASET_IO_H_
