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

#ifndef VOXLENS_PIPELINE_H_
#define VOXLENS_PIPELINE_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "voxlens/common.h"

namespace voxlens {

// Default desk-scale configuration. Every key a user config may set appears
// here; the defaults double as the schema.
nlohmann::json default_config();

// Checks `doc` against the default schema and throws ConfigError listing
// every offending path (unknown keys and type mismatches).
void validate_config(const nlohmann::json& doc);

// Applies "a.b.c=value" to `doc`. The value is parsed as JSON when it can
// be, otherwise taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct PipelineConfig {
  nlohmann::json doc;  // merged over the defaults and validated

  std::uint64_t seed() const;
  int workers() const;
  // SHA-256 over the named sections plus the master seed.
  std::string hash(std::span<const std::string> sections) const;
  std::string full_hash() const;
};

struct ConfigSource {
  std::optional<std::filesystem::path> file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

PipelineConfig load_config(const ConfigSource& source);

// Stage names in execution order.
const std::vector<std::string>& stage_names();

struct StageOutcome {
  std::string stage;
  bool skipped = false;  // outputs were current
  std::vector<std::string> outputs;
};

// Runs one stage under `out`. Inputs are read from earlier stages'
// directories; a missing input raises DependencyError naming the file and
// the stage that produces it. A stage whose manifest key (config sections,
// seed, input hashes) and output hashes are unchanged is skipped unless
// `force` is set.
StageOutcome run_stage(const std::string& stage, const PipelineConfig& config,
                       const std::filesystem::path& out, bool force = false);

// Runs every stage up to and including `last`.
std::vector<StageOutcome> run_pipeline(const PipelineConfig& config,
                                       const std::filesystem::path& out,
                                       const std::string& last = "report", bool force = false);

// Output root when --out is not given: $VOXLENS_OUT, else "runs".
std::filesystem::path default_output_root();

}  // namespace voxlens

#endif  // VOXLENS_PIPELINE_H_
