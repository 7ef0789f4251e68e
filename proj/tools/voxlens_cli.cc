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

// Command-line driver for the voxlens pipeline.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "voxlens/common.h"
#include "voxlens/pipeline.h"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigInvalid = 2, kMissingDependency = 3 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxlens: synthetic voxel-encoder interpretability pipeline"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
  bool force = false;
  bool print_config = false;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--seed", seed, "master seed");
  app.add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", out, "output directory (default: $VOXLENS_OUT/<config hash> or runs/<config hash>)");
  app.add_option("--set", overrides, "override a config value, e.g. --set train.epochs=5");
  app.add_flag("--force", force, "rerun even when outputs are current");

  std::vector<CLI::App*> stages;
  for (const auto& name : voxlens::stage_names())
    stages.push_back(app.add_subcommand(name, "run the " + name + " stage"));
  CLI::App* all = app.add_subcommand("all", "run every stage in order");
  CLI::App* show = app.add_subcommand("config", "print the merged configuration");
  show->add_flag("--defaults", print_config, "print the built-in defaults instead");

  CLI11_PARSE(app, argc, argv);

  try {
    if (show->parsed() && print_config) {
      std::cout << voxlens::default_config().dump(2) << "\n";
      return kOk;
    }
    voxlens::ConfigSource source;
    if (config_path) source.file = *config_path;
    source.overrides = overrides;
    source.seed = seed;
    source.workers = workers;
    const voxlens::PipelineConfig config = voxlens::load_config(source);
    if (show->parsed()) {
      std::cout << config.doc.dump(2) << "\n";
      return kOk;
    }
    const std::filesystem::path dir =
        out ? std::filesystem::path(*out) : voxlens::default_output_root() / config.full_hash().substr(0, 12);
    std::vector<voxlens::StageOutcome> outcomes;
    if (all->parsed()) {
      outcomes = voxlens::run_pipeline(config, dir, "report", force);
    } else {
      for (CLI::App* s : stages)
        if (s->parsed()) outcomes.push_back(voxlens::run_stage(s->get_name(), config, dir, force));
    }
    for (const auto& o : outcomes)
      std::cout << o.stage << (o.skipped ? ": up to date" : ": done") << " (" << dir.string() << "/" << o.stage
                << ")\n";
    return kOk;
  } catch (const voxlens::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfigInvalid;
  } catch (const voxlens::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kMissingDependency;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
