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

#ifndef VOXLENS_COMMON_H_
#define VOXLENS_COMMON_H_

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace voxlens {

// Row-major so that a token matrix row is one contiguous token.
using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Position of a token that carries no feature.
inline constexpr int kBackground = -1;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible shapes or dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values or combinations.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or mismatched files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Not enough data to compute the requested quantity.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered, divergence, or non-convergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was requested before the artifacts it consumes exist.
class DependencyError : public Error {
 public:
  using Error::Error;
};

// Derives an independent 64-bit seed for a named stream and index
// (splitmix64 finalizer over the mixed inputs).
std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                          std::uint64_t index = 0);

// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

// Runs body(i) for i in [0, n) on up to `workers` threads. Each index is
// processed exactly once; callers write results into per-index slots so the
// outcome does not depend on scheduling.
void parallel_for(int n, int workers, const std::function<void(int)>& body);

}  // namespace voxlens

#endif  // VOXLENS_COMMON_H_
