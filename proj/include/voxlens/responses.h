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

#ifndef VOXLENS_RESPONSES_H_
#define VOXLENS_RESPONSES_H_

#include <cstddef>
#include <vector>

#include "voxlens/common.h"

namespace voxlens {

// Dense store of trial responses indexed by (image row, voxel, repetition).
// Image rows follow the order of the owning dataset's image list.
class ResponseCube {
 public:
  ResponseCube() = default;
  ResponseCube(int n_images, int n_voxels, int n_reps)
      : n_images_(n_images),
        n_voxels_(n_voxels),
        n_reps_(n_reps),
        values_(static_cast<std::size_t>(n_images) * n_voxels * n_reps, 0.0) {}

  int n_images() const { return n_images_; }
  int n_voxels() const { return n_voxels_; }
  int n_reps() const { return n_reps_; }

  double& at(int image, int voxel, int rep) { return values_[index(image, voxel, rep)]; }
  double at(int image, int voxel, int rep) const {
    return values_[index(image, voxel, rep)];
  }

  // Repetition average, the training target.
  double mean(int image, int voxel) const {
    double sum = 0.0;
    for (int r = 0; r < n_reps_; ++r) sum += at(image, voxel, r);
    return sum / n_reps_;
  }

  // n_images × n_voxels matrix of repetition averages.
  Matrix means() const {
    Matrix out(n_images_, n_voxels_);
    for (int i = 0; i < n_images_; ++i)
      for (int v = 0; v < n_voxels_; ++v) out(i, v) = mean(i, v);
    return out;
  }

  // n_images × n_reps responses of one voxel.
  Matrix voxel_trials(int voxel) const {
    Matrix out(n_images_, n_reps_);
    for (int i = 0; i < n_images_; ++i)
      for (int r = 0; r < n_reps_; ++r) out(i, r) = at(i, voxel, r);
    return out;
  }

  const std::vector<double>& raw() const { return values_; }

 private:
  std::size_t index(int image, int voxel, int rep) const {
    return (static_cast<std::size_t>(image) * n_voxels_ + voxel) * n_reps_ + rep;
  }

  int n_images_ = 0;
  int n_voxels_ = 0;
  int n_reps_ = 0;
  std::vector<double> values_;
};

}  // namespace voxlens

#endif  // VOXLENS_RESPONSES_H_
