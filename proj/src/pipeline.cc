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

#include "voxlens/pipeline.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "voxlens/attribution.h"
#include "voxlens/counterfactual.h"
#include "voxlens/dataset_io.h"
#include "voxlens/encoder.h"
#include "voxlens/lens_decoder.h"
#include "voxlens/mixed_model.h"
#include "voxlens/synth_world.h"
#include "voxlens/trainer.h"

namespace voxlens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {
// Bumped whenever a stage's output format or algorithm changes, so cached
// artifacts from older builds are not reused.
constexpr int kPipelineVersion = 1;
}  // namespace

json default_config() {
  WorldConfig w;
  w.k_min = 4;
  w.k_max = 8;
  w.target_noise_ceiling = 0.6;
  json world = to_json(w);
  world.erase("seed");  // derived from the master seed
  AdamWConfig opt;
  ScheduleConfig sched;
  sched.initial_lr = 4e-4;
  sched.max_lr = 1e-2;
  json schedule = to_json(sched);
  schedule.erase("total_steps");  // set by the trainer
  return {
      {"seed", 17},
      {"workers", 1},
      {"world", world},
      {"splits", {{"train", 0.7}, {"val", 0.1}, {"test", 0.0}, {"analysis", 0.2}}},
      {"encoder", {{"model_dim", 64}, {"n_heads", 8}, {"ffn_expansion", 4}, {"rms_epsilon", 1e-6}}},
      {"train",
       {{"epochs", 20},
        {"steps_per_epoch", 0},
        {"images_per_batch", 32},
        {"voxels_per_batch", 256},
        {"eval_every", 1},
        {"shuffle_targets", false},
        {"optimizer", to_json(opt)},
        {"schedule", schedule}}},
      {"attribution",
       {{"k_top", 4},
        {"m", 10},
        {"patch_k", {2, 4, 8, 16, 24}},
        {"test_k", {4, 8, 16}},
        {"min_voxel_r2", 0.05}}},
      {"decode", {{"words_per_token", 10}, {"n_features_out", 4}, {"salience", 0.5}}},
      {"counterfactual",
       {{"q_hi", 0.9},
        {"q_lo", 0.1},
        {"n_samples", 5},
        {"filler_min", 1},
        {"filler_max", 3},
        {"guard_fraction", 0.05}}},
      {"profile", {{"quartile", 0.75}, {"min_trials", 3}, {"n_features", 3}}},
      {"stats", {{"max_iterations", 4000}, {"tolerance", 1e-9}}},
  };
}

namespace {

bool compatible(const json& schema, const json& value) {
  if (schema.is_number()) {
    if (!value.is_number()) return false;
    // Integer settings reject fractional values.
    if (schema.is_number_integer() && value.is_number_float())
      return value.get<double>() == std::floor(value.get<double>());
    return true;
  }
  if (schema.is_boolean()) return value.is_boolean();
  if (schema.is_string()) return value.is_string();
  if (schema.is_array()) {
    if (!value.is_array()) return false;
    if (!schema.empty())
      for (const auto& v : value)
        if (!compatible(schema.front(), v)) return false;
    return true;
  }
  if (schema.is_object()) return value.is_object();
  return true;
}

void check_against(const json& schema, const json& value, const std::string& path,
                   std::vector<std::string>& errors) {
  if (!compatible(schema, value)) {
    errors.push_back(path + ": expected " + std::string(schema.type_name()) + ", got " +
                     value.type_name());
    return;
  }
  if (!schema.is_object()) return;
  for (const auto& [key, v] : value.items()) {
    const std::string sub = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) {
      errors.push_back(sub + ": unknown key");
      continue;
    }
    check_against(schema.at(key), v, sub, errors);
  }
}

void merge_into(json& base, const json& patch) {
  for (const auto& [key, v] : patch.items()) {
    if (v.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], v);
    } else {
      base[key] = v;
    }
  }
}

// Integer-typed keys in the schema are stored as integers after merging.
void normalize_integers(const json& schema, json& value) {
  if (schema.is_object() && value.is_object()) {
    for (auto& [key, v] : value.items())
      if (schema.contains(key)) normalize_integers(schema.at(key), v);
  } else if (schema.is_number_integer() && value.is_number_float()) {
    value = static_cast<std::int64_t>(value.get<double>());
  } else if (schema.is_array() && value.is_array() && !schema.empty()) {
    for (auto& v : value) normalize_integers(schema.front(), v);
  }
}

}  // namespace

void validate_config(const json& doc) {
  std::vector<std::string> errors;
  if (!doc.is_object()) {
    errors.push_back("<root>: expected object");
  } else {
    check_against(default_config(), doc, "", errors);
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("override path " + key + " crosses a non-object");
  }
  (*node)[parts.back()] = value;
}

std::uint64_t PipelineConfig::seed() const { return doc.at("seed").get<std::uint64_t>(); }

int PipelineConfig::workers() const { return std::max(1, doc.at("workers").get<int>()); }

std::string PipelineConfig::hash(std::span<const std::string> sections) const {
  json j = json::object();
  for (const auto& s : sections) j[s] = doc.at(s);
  j["seed"] = doc.at("seed");
  return sha256_hex(j.dump());
}

std::string PipelineConfig::full_hash() const {
  json j = doc;
  j.erase("workers");  // results do not depend on the worker count
  return sha256_hex(j.dump());
}

PipelineConfig load_config(const ConfigSource& source) {
  json doc = default_config();
  json user = json::object();
  if (source.file) {
    if (!fs::exists(*source.file))
      throw ConfigError("config file " + source.file->string() + " does not exist");
    user = json::parse(read_text(*source.file), nullptr, false);
    if (user.is_discarded()) throw ConfigError("config file " + source.file->string() + " is not JSON");
  }
  for (const auto& o : source.overrides) apply_override(user, o);
  if (source.seed) user["seed"] = *source.seed;
  if (source.workers) user["workers"] = *source.workers;
  validate_config(user);
  merge_into(doc, user);
  normalize_integers(default_config(), doc);
  PipelineConfig config{doc};
  // Cross-field checks surface as configuration errors.
  WorldConfig w = world_config_from_json(doc.at("world"));
  w.validate();
  const auto& cf = doc.at("counterfactual");
  if (!(cf.at("q_lo").get<double>() >= 0.0 && cf.at("q_lo").get<double>() < cf.at("q_hi").get<double>() &&
        cf.at("q_hi").get<double>() <= 1.0))
    throw ConfigError("counterfactual quantiles need 0 <= q_lo < q_hi <= 1");
  const int filler_min = cf.at("filler_min").get<int>(), filler_max = cf.at("filler_max").get<int>();
  if (filler_min < 0 || filler_min > filler_max)
    throw ConfigError("counterfactual filler range needs 0 <= filler_min <= filler_max");
  if (doc.at("decode").at("n_features_out").get<int>() + filler_max > w.seq_len)
    throw ConfigError("decode.n_features_out + counterfactual.filler_max must not exceed world.seq_len");
  const int k_top = doc.at("attribution").at("k_top").get<int>();
  if (k_top < 1 || k_top > w.seq_len) throw ConfigError("attribution.k_top must be in [1, seq_len]");
  for (const char* key : {"patch_k", "test_k"})
    for (int k : doc.at("attribution").at(key).get<std::vector<int>>())
      if (k < 0 || k > w.seq_len) throw ConfigError(std::string("attribution.") + key + " entries must be in [0, seq_len]");
  return config;
}

fs::path default_output_root() {
  const char* env = std::getenv("VOXLENS_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

namespace {

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(1) + "\n"); }

json read_json(const fs::path& path) {
  json j = json::parse(read_text(path), nullptr, false);
  if (j.is_discarded()) throw FormatError(path.string() + " is not valid JSON");
  return j;
}

std::string file_hash(const fs::path& path) { return sha256_hex(read_text(path)); }

// CSV with a leading comment that records provenance.
class CsvWriter {
 public:
  CsvWriter(std::string config_hash, std::uint64_t seed, std::vector<std::string> header)
      : header_(std::move(header)) {
    os_ << "# config_hash=" << config_hash << " seed=" << seed << "\n";
    for (std::size_t i = 0; i < header_.size(); ++i) os_ << (i ? "," : "") << header_[i];
    os_ << "\n";
    os_.precision(17);
  }
  template <typename... T>
  void row(const T&... cells) {
    std::size_t i = 0;
    ((os_ << (i++ ? "," : "") << cells), ...);
    os_ << "\n";
  }
  void save(const fs::path& path) const { write_text(path, os_.str()); }

 private:
  std::vector<std::string> header_;
  std::ostringstream os_;
};

struct StageContext {
  const PipelineConfig& config;
  fs::path out;
  fs::path dir;
  std::string config_hash;

  fs::path input(const std::string& rel) const { return out / rel; }
  fs::path output(const std::string& name) const { return dir / name; }
  json annotate(json j) const {
    j["config_hash"] = config_hash;
    j["seed"] = config.seed();
    return j;
  }
  const json& section(const char* name) const { return config.doc.at(name); }
};

// Lazily loaded artifacts shared by the analysis stages.
class Workspace {
 public:
  explicit Workspace(const StageContext& ctx) : ctx_(ctx) {}

  const World& world() {
    if (!world_) world_ = world_from_json(read_json(ctx_.input("world-gen/world.json")));
    return *world_;
  }
  const std::vector<Matrix>& tokens() {
    if (tokens_.empty()) {
      TokenTensors t = read_tokens(ctx_.input("world-gen/tokens.bin"));
      for (int i = 0; i < t.n_images; ++i)
        if (t.image_ids[i] != i) throw FormatError("token file image ids must be 0..n-1 in order");
      tokens_ = t.images();
    }
    return tokens_;
  }
  const ResponseCube& cube() {
    if (!cube_) {
      std::vector<std::int64_t> ids(world().stimuli.size());
      std::iota(ids.begin(), ids.end(), 0);
      cube_ = cube_from_rows(read_responses(ctx_.input("world-gen/responses.csv")), ids);
    }
    return *cube_;
  }
  const Matrix& means() {
    if (means_.size() == 0) means_ = cube().means();
    return means_;
  }
  const SplitSpec& splits() {
    if (!splits_) splits_ = split_from_json(read_json(ctx_.input("world-gen/splits.json")));
    return *splits_;
  }
  const EncoderParams& params() {
    if (!params_) params_ = read_checkpoint(ctx_.input("train/checkpoint.bin"));
    return *params_;
  }
  const std::vector<Matrix>& scores() {
    if (scores_.empty()) {
      TokenTensors t = read_tokens(ctx_.input("attribute/scores.bin"));
      if (t.image_ids != splits().analysis)
        throw FormatError("attribution scores do not cover the analysis split");
      scores_ = t.images();
    }
    return scores_;
  }
  // Position of an analysis image in the scores list.
  int analysis_index(std::int64_t image_id) {
    if (analysis_pos_.empty())
      for (std::size_t i = 0; i < splits().analysis.size(); ++i)
        analysis_pos_[splits().analysis[i]] = static_cast<int>(i);
    return analysis_pos_.at(image_id);
  }
  EvalContext eval_context() {
    EvalContext c;
    c.params = &params();
    c.dictionary = &world().dictionary;
    c.token_noise_sd = world().config.token_noise_sd;
    c.stimuli = world().stimuli;
    c.tokens = tokens();
    c.validate();
    return c;
  }
  double mean_gain() {
    double g = 0.0;
    for (const auto& v : world().voxels) g += v.gain;
    return g / world().voxels.size();
  }

 private:
  const StageContext& ctx_;
  std::optional<World> world_;
  std::vector<Matrix> tokens_;
  std::optional<ResponseCube> cube_;
  Matrix means_;
  std::optional<SplitSpec> splits_;
  std::optional<EncoderParams> params_;
  std::vector<Matrix> scores_;
  std::map<std::int64_t, int> analysis_pos_;
};

std::vector<int> as_rows(std::span<const std::int64_t> ids) {
  return std::vector<int>(ids.begin(), ids.end());
}

// Runs `body` per voxel in parallel and concatenates the per-voxel records
// in voxel order.
std::vector<json> per_voxel(int n_voxels, int workers,
                            const std::function<std::vector<json>(int)>& body) {
  std::vector<std::vector<json>> parts(n_voxels);
  parallel_for(n_voxels, workers, [&](int v) { parts[v] = body(v); });
  std::vector<json> out;
  for (auto& p : parts)
    for (auto& j : p) out.push_back(std::move(j));
  return out;
}

// ---- stages ----

void stage_world_gen(const StageContext& ctx) {
  WorldConfig wc = world_config_from_json(ctx.section("world"));
  wc.seed = derive_seed(ctx.config.seed(), "world", 0);
  World world = generate_world(wc);
  std::vector<std::int64_t> ids;
  std::vector<Matrix> renders;
  for (auto& t : render_world(world, ctx.config.workers())) {
    ids.push_back(t.image_id);
    renders.push_back(std::move(t.values));
  }
  write_json(ctx.output("world.json"), ctx.annotate(world_to_json(world)));
  write_tokens(ctx.output("tokens.bin"), TokenTensors::from_matrices(renders, ids));
  write_responses(ctx.output("responses.csv"), rows_from_cube(simulate_responses(world), ids));
  const auto& s = ctx.section("splits");
  std::array<double, 4> fractions = {s.at("train").get<double>(), s.at("val").get<double>(),
                                     s.at("test").get<double>(), s.at("analysis").get<double>()};
  SplitSpec splits = make_splits(ids, fractions, derive_seed(ctx.config.seed(), "splits", 0));
  write_json(ctx.output("splits.json"), ctx.annotate(to_json(splits)));
}

EncoderConfig encoder_config(const StageContext& ctx, const World& world) {
  const auto& e = ctx.section("encoder");
  EncoderConfig c;
  c.token_dim = world.config.token_dim;
  c.n_voxels = world.config.n_voxels;
  c.model_dim = e.at("model_dim").get<int>();
  c.n_heads = e.at("n_heads").get<int>();
  c.ffn_expansion = e.at("ffn_expansion").get<int>();
  c.rms_epsilon = e.at("rms_epsilon").get<double>();
  c.validate();
  return c;
}

void stage_train(const StageContext& ctx) {
  Workspace ws(ctx);
  const auto& t = ctx.section("train");
  const std::uint64_t seed = ctx.config.seed();
  EncoderParams init = init_params(encoder_config(ctx, ws.world()), derive_seed(seed, "init", 0));
  Matrix targets = ws.means();
  const SplitSpec& splits = ws.splits();
  if (splits.train.empty() || splits.val.empty())
    throw InsufficientDataError("training needs non-empty train and val splits");
  if (t.at("shuffle_targets").get<bool>()) {
    // Control: training images get each other's responses.
    std::vector<std::int64_t> perm = splits.train;
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(derive_seed(seed, "shuffle-targets", 0)));
    Matrix shuffled = targets;
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled.row(splits.train[i]) = targets.row(perm[i]);
    targets = std::move(shuffled);
  }
  TrainData data;
  data.tokens = ws.tokens();
  data.targets = &targets;
  data.train = as_rows(splits.train);
  data.val = as_rows(splits.val);
  TrainConfig tc = train_config_from_json(t);
  tc.seed = derive_seed(seed, "train", 0);
  tc.workers = ctx.config.workers();
  json sched = t.at("schedule");
  sched["total_steps"] = 1;
  TrainResult r = train(init, data, tc, schedule_config_from_json(sched),
                        adamw_config_from_json(t.at("optimizer")));
  CheckpointInfo info;
  info.epoch = r.best_epoch;
  info.seed = seed;
  info.hyperparameters = ctx.annotate(t);
  write_checkpoint(ctx.output("checkpoint.bin"), r.best, info);
  std::vector<json> log;
  for (const auto& e : r.log) log.push_back(to_json(e));
  write_jsonl(ctx.output("log.jsonl"), log);
  write_json(ctx.output("summary.json"),
             ctx.annotate({{"best_epoch", r.best_epoch}, {"best_val_r2", r.best_val_r2},
                           {"shuffle_targets", t.at("shuffle_targets")}}));
}

json r2_summary(const R2Result& r) {
  return {{"mean_r2", r.mean}, {"n_valid", r.n_valid()}};
}

void stage_eval(const StageContext& ctx) {
  Workspace ws(ctx);
  const SplitSpec& splits = ws.splits();
  const int workers = ctx.config.workers();
  json metrics = json::object();
  const std::vector<double> nc = noise_ceilings(ws.cube());
  auto add = [&](const char* name, const std::vector<std::int64_t>& ids) {
    if (ids.empty()) return;
    R2Result r2 = evaluate_r2(ws.params(), ws.tokens(), ws.means(), as_rows(ids), workers);
    json j = r2_summary(r2);
    j["mean_accuracy"] = prediction_accuracy(r2, nc).mean;
    metrics[name] = j;
  };
  add("val", splits.val);
  add("test", splits.test);
  add("analysis", splits.analysis);
  double nc_mean = 0.0;
  int nc_n = 0;
  for (double v : nc)
    if (std::isfinite(v)) {
      nc_mean += v;
      ++nc_n;
    }
  metrics["mean_noise_ceiling"] = nc_n ? nc_mean / nc_n : 0.0;
  write_json(ctx.output("metrics.json"), ctx.annotate(metrics));
}

std::vector<Matrix> select_rows(const std::vector<Matrix>& all, std::span<const std::int64_t> ids) {
  std::vector<Matrix> out;
  for (auto id : ids) out.push_back(all.at(id));
  return out;
}

Matrix target_rows(const Matrix& means, std::span<const std::int64_t> ids) {
  Matrix out(ids.size(), means.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(i) = means.row(ids[i]);
  return out;
}

void stage_attribute(const StageContext& ctx) {
  Workspace ws(ctx);
  const auto& a = ctx.section("attribution");
  const SplitSpec& splits = ws.splits();
  if (splits.analysis.empty()) throw InsufficientDataError("analysis split is empty");
  const std::vector<Matrix> train_tokens = select_rows(ws.tokens(), splits.train);
  const BaselineToken baseline = mean_baseline(train_tokens);
  const std::vector<Matrix> tokens = select_rows(ws.tokens(), splits.analysis);
  const std::vector<Matrix> scores =
      attribution_scores(ws.params(), tokens, baseline, a.at("m").get<int>(), ctx.config.workers());
  write_tokens(ctx.output("scores.bin"), TokenTensors::from_matrices(scores, splits.analysis));
  std::vector<double> values(baseline.values.data(), baseline.values.data() + baseline.values.size());
  write_json(ctx.output("baseline.json"),
             ctx.annotate({{"values", values}, {"provenance", baseline.provenance}}));
}

BaselineToken load_baseline(const StageContext& ctx) {
  json j = read_json(ctx.input("attribute/baseline.json"));
  auto values = j.at("values").get<std::vector<double>>();
  BaselineToken b;
  b.values = Eigen::Map<const RowVector>(values.data(), values.size());
  b.provenance = j.at("provenance").get<std::string>();
  return b;
}

void stage_patch_curve(const StageContext& ctx) {
  Workspace ws(ctx);
  const auto& a = ctx.section("attribution");
  const SplitSpec& splits = ws.splits();
  const std::vector<Matrix> tokens = select_rows(ws.tokens(), splits.analysis);
  const Matrix targets = target_rows(ws.means(), splits.analysis);
  const BaselineToken baseline = load_baseline(ctx);
  std::vector<int> ks = a.at("patch_k").get<std::vector<int>>();
  for (int k : a.at("test_k").get<std::vector<int>>()) ks.push_back(k);
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::vector<json> points;
  json curves = json::array();
  for (PatchMode mode : {PatchMode::kNecessity, PatchMode::kSufficiency}) {
    for (Selection sel : {Selection::kTop, Selection::kRandom, Selection::kLowest}) {
      PatchCurve curve = patch_curve(ws.params(), tokens, targets, ws.scores(), baseline, ks, mode,
                                     sel, derive_seed(ctx.config.seed(), "patch", 0),
                                     ctx.config.workers());
      json pts = json::array();
      for (const PatchResult& p : curve.points) {
        pts.push_back({{"k", p.k}, {"ratio", p.ratio}, {"mean_r2", p.mean_r2},
                       {"mean_r2_patched", p.mean_r2_patched}});
        for (std::size_t v = 0; v < p.r2.size(); ++v) {
          if (!p.valid[v]) continue;
          points.push_back({{"mode", to_string(mode)},
                            {"selection", to_string(sel)},
                            {"k", p.k},
                            {"voxel_id", static_cast<int>(v)},
                            {"r2", p.r2[v]},
                            {"r2_patched", p.r2_patched[v]}});
        }
      }
      curves.push_back({{"mode", to_string(mode)}, {"selection", to_string(sel)}, {"points", pts}});
    }
  }
  write_jsonl(ctx.output("points.jsonl"), points);
  write_json(ctx.output("curves.json"), ctx.annotate({{"curves", curves}}));
}

FillerRange filler_of(const StageContext& ctx) {
  const auto& c = ctx.section("counterfactual");
  return {c.at("filler_min").get<int>(), c.at("filler_max").get<int>()};
}

void stage_decode(const StageContext& ctx) {
  Workspace ws(ctx);
  const auto& a = ctx.section("attribution");
  const auto& d = ctx.section("decode");
  const auto& cf = ctx.section("counterfactual");
  const World& world = ws.world();
  const SplitSpec& splits = ws.splits();
  const VocabularyProjector projector = make_projector(world.dictionary);
  const int k_top = a.at("k_top").get<int>();
  const int wpt = d.at("words_per_token").get<int>();
  DecodeOptions opts;
  opts.n_features_out = d.at("n_features_out").get<int>();
  opts.salience = d.at("salience").get<double>();
  const double q_hi = cf.at("q_hi").get<double>(), q_lo = cf.at("q_lo").get<double>();
  ws.scores();
  ws.tokens();
  ws.means();
  for (auto id : splits.analysis) ws.analysis_index(id);
  const int n_voxels = world.config.n_voxels;
  const std::uint64_t seed = ctx.config.seed();
  std::vector<json> prefs(n_voxels);
  std::vector<std::vector<CriticalFeatureSet>> top_sets(n_voxels), random_sets(n_voxels),
      lowest_sets(n_voxels);
  std::vector<json> decoded = per_voxel(n_voxels, ctx.config.workers(), [&](int v) {
    std::vector<json> out;
    std::vector<double> responses;
    for (auto id : splits.analysis) responses.push_back(ws.means()(id, v));
    PreferenceSplit split;
    try {
      split = select_preference(responses, splits.analysis, v, q_hi, q_lo);
    } catch (const InsufficientDataError& e) {
      prefs[v] = {{"voxel_id", v}, {"skipped", true}, {"reason", e.what()}};
      return out;
    }
    prefs[v] = to_json(split);
    auto decode = [&](std::int64_t image, Selection sel, const char* group) {
      const Matrix& scores = ws.scores()[ws.analysis_index(image)];
      std::vector<double> row(scores.cols());
      for (Eigen::Index j = 0; j < scores.cols(); ++j) row[j] = scores(v, j);
      CriticalFeatureSet set =
          decode_selection(ws.tokens()[image], row, k_top, sel,
                           derive_seed(seed, "decode", static_cast<std::uint64_t>(v) * world.stimuli.size() + image),
                           projector, wpt, opts);
      set.voxel_id = v;
      set.image_id = image;
      json j = to_json(set, &projector);
      j["group"] = group;
      out.push_back(j);
      return set;
    };
    for (auto image : split.preferred) {
      top_sets[v].push_back(decode(image, Selection::kTop, "preferred"));
      random_sets[v].push_back(decode(image, Selection::kRandom, "preferred"));
      lowest_sets[v].push_back(decode(image, Selection::kLowest, "preferred"));
    }
    for (auto image : split.non_preferred) decode(image, Selection::kTop, "non_preferred");
    return out;
  });
  auto recovery = [&](const std::vector<std::vector<CriticalFeatureSet>>& sets) {
    std::vector<CriticalFeatureSet> flat;
    for (const auto& s : sets) flat.insert(flat.end(), s.begin(), s.end());
    RecoveryReport r = recovery_score(flat, world.voxels, world.stimuli);
    return json{{"mean_precision", r.mean_precision},
                {"mean_recall", r.mean_recall},
                {"n_scored", r.pairs.size()},
                {"excluded", r.excluded}};
  };
  int n_skipped = 0;
  for (const auto& p : prefs) n_skipped += p.value("skipped", false);
  write_jsonl(ctx.output("preferences.jsonl"), prefs);
  write_jsonl(ctx.output("decoded.jsonl"), decoded);
  write_json(ctx.output("recovery.json"),
             ctx.annotate({{"top", recovery(top_sets)},
                           {"random", recovery(random_sets)},
                           {"lowest", recovery(lowest_sets)},
                           {"voxels_without_split", n_skipped}}));
}

// Decoded sets keyed by (voxel, image, source).
struct DecodedIndex {
  std::map<std::tuple<int, std::int64_t, std::string>, std::vector<int>> sets;
  std::vector<std::optional<PreferenceSplit>> splits;

  const std::vector<int>* find(int v, std::int64_t image, const std::string& source) const {
    auto it = sets.find({v, image, source});
    return it == sets.end() ? nullptr : &it->second;
  }
};

DecodedIndex load_decoded(const StageContext& ctx, int n_voxels) {
  DecodedIndex idx;
  idx.splits.resize(n_voxels);
  for (const auto& j : read_jsonl(ctx.input("decode/preferences.jsonl"))) {
    if (j.value("skipped", false)) continue;
    PreferenceSplit s;
    s.voxel_id = j.at("voxel_id").get<int>();
    j.at("preferred").get_to(s.preferred);
    j.at("non_preferred").get_to(s.non_preferred);
    idx.splits.at(s.voxel_id) = s;
  }
  for (const auto& j : read_jsonl(ctx.input("decode/decoded.jsonl")))
    idx.sets[{j.at("voxel_id").get<int>(), j.at("image_id").get<std::int64_t>(),
              j.at("source").get<std::string>()}] = j.at("features").get<std::vector<int>>();
  return idx;
}

const char* kSources[] = {"top", "random", "lowest"};

void stage_reconstruct(const StageContext& ctx) {
  Workspace ws(ctx);
  const int n_voxels = ws.world().config.n_voxels;
  const DecodedIndex idx = load_decoded(ctx, n_voxels);
  const EvalContext ectx = ws.eval_context();
  ReconstructionOptions opts;
  opts.n_samples = ctx.section("counterfactual").at("n_samples").get<int>();
  opts.filler = filler_of(ctx);
  const std::uint64_t seed = ctx.config.seed();
  const auto n_images = ws.world().stimuli.size();
  ws.means();
  std::vector<json> records = per_voxel(n_voxels, ctx.config.workers(), [&](int v) {
    std::vector<json> out;
    if (!idx.splits[v]) return out;
    for (auto image : idx.splits[v]->preferred) {
      std::vector<DecodedSource> sources;
      for (const char* s : kSources)
        if (const auto* f = idx.find(v, image, s); f && !f->empty())
          sources.push_back({selection_from_string(s), *f});
      for (const auto& r : reconstruction_eval(ectx, v, image, ws.means()(image, v), sources, opts,
                                               derive_seed(seed, "reconstruct", v * n_images + image)))
        out.push_back(to_json(r));
    }
    return out;
  });
  write_jsonl(ctx.output("records.jsonl"), records);
}

void stage_discriminate(const StageContext& ctx) {
  Workspace ws(ctx);
  const int n_voxels = ws.world().config.n_voxels;
  const DecodedIndex idx = load_decoded(ctx, n_voxels);
  const EvalContext ectx = ws.eval_context();
  const int n_samples = ctx.section("counterfactual").at("n_samples").get<int>();
  const FillerRange filler = filler_of(ctx);
  const std::uint64_t seed = ctx.config.seed();
  std::vector<json> records = per_voxel(n_voxels, ctx.config.workers(), [&](int v) {
    std::vector<json> out;
    if (!idx.splits[v]) return out;
    std::map<std::int64_t, std::vector<int>> decoded;
    for (const auto* group : {&idx.splits[v]->preferred, &idx.splits[v]->non_preferred})
      for (auto image : *group)
        if (const auto* f = idx.find(v, image, "top")) decoded[image] = *f;
    for (const auto& s : discriminability_eval(ectx, *idx.splits[v], decoded, n_samples, filler,
                                               derive_seed(seed, "discriminate", v)))
      out.push_back(to_json(s));
    return out;
  });
  write_jsonl(ctx.output("activations.jsonl"), records);
}

// Each preferred image is paired with a non-preferred reference image.
std::vector<std::int64_t> reference_images(const PreferenceSplit& split, std::uint64_t seed) {
  std::vector<std::int64_t> pool = split.non_preferred;
  std::shuffle(pool.begin(), pool.end(), std::mt19937_64(seed));
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < split.preferred.size(); ++i) out.push_back(pool[i % pool.size()]);
  return out;
}

void stage_edit(const StageContext& ctx) {
  Workspace ws(ctx);
  const World& world = ws.world();
  const int n_voxels = world.config.n_voxels;
  const DecodedIndex idx = load_decoded(ctx, n_voxels);
  const EvalContext ectx = ws.eval_context();
  const double guard = ctx.section("counterfactual").at("guard_fraction").get<double>() * ws.mean_gain();
  const std::uint64_t seed = ctx.config.seed();
  const auto n_images = world.stimuli.size();
  std::vector<std::vector<json>> faith(n_voxels);
  std::vector<json> edits = per_voxel(n_voxels, ctx.config.workers(), [&](int v) {
    std::vector<json> out;
    if (!idx.splits[v]) return out;
    const PreferenceSplit& split = *idx.splits[v];
    const auto refs = reference_images(split, derive_seed(seed, "edit-pairs", v));
    for (std::size_t i = 0; i < split.preferred.size(); ++i) {
      const std::int64_t x = split.preferred[i], xp = refs[i];
      const std::uint64_t s = derive_seed(seed, "edit", v * n_images + x);
      for (const char* cond : {"top", "random"}) {
        const auto* f = idx.find(v, x, cond);
        if (!f) continue;
        const std::string label = std::string(cond) == "top" ? "critical" : "random";
        if (auto r = remove_edit(ectx, v, x, *f, derive_seed(s, label, 0), label)) out.push_back(to_json(*r));
        if (auto r = add_edit(ectx, v, xp, *f, x, derive_seed(s, label, 1), label)) out.push_back(to_json(*r));
        faith[v].push_back(to_json(faithfulness(ectx, v, x, xp, *f, guard, derive_seed(s, label, 2), label)));
      }
      // Planted ground truth, available in the synthetic world only.
      std::vector<int> exact;
      for (int g : world.voxels[v].critical_set)
        if (world.stimuli[x].contains(g)) exact.push_back(g);
      if (!exact.empty())
        faith[v].push_back(to_json(faithfulness(ectx, v, x, xp, exact, guard, derive_seed(s, "exact", 2), "exact")));
    }
    return out;
  });
  std::vector<json> flat;
  for (auto& f : faith)
    for (auto& j : f) flat.push_back(std::move(j));
  write_jsonl(ctx.output("edits.jsonl"), edits);
  write_jsonl(ctx.output("faithfulness.jsonl"), flat);
  write_json(ctx.output("summary.json"), ctx.annotate({{"guard", guard}}));
}

FaithfulnessRecord faithfulness_from_json(const json& j) {
  FaithfulnessRecord r;
  r.voxel_id = j.at("voxel_id").get<int>();
  r.preferred_image = j.at("preferred_image").get<std::int64_t>();
  r.non_preferred_image = j.at("non_preferred_image").get<std::int64_t>();
  j.at("features").get_to(r.features);
  r.condition = j.at("condition").get<std::string>();
  r.numerator = j.at("numerator").get<double>();
  r.denominator = j.at("denominator").get<double>();
  r.skipped = j.at("skipped").get<bool>();
  r.value = r.skipped || j.at("value").is_null() ? std::nan("") : j.at("value").get<double>();
  return r;
}

void stage_profile(const StageContext& ctx) {
  Workspace ws(ctx);
  const int n_voxels = ws.world().config.n_voxels;
  const auto& p = ctx.section("profile");
  ProfileOptions opts;
  opts.quartile = p.at("quartile").get<double>();
  opts.min_trials = p.at("min_trials").get<int>();
  opts.n_features = p.at("n_features").get<int>();
  std::vector<std::vector<FaithfulnessRecord>> trials(n_voxels);
  for (const auto& j : read_jsonl(ctx.input("edit/faithfulness.jsonl")))
    if (j.at("condition") == "critical") {
      FaithfulnessRecord r = faithfulness_from_json(j);
      trials.at(r.voxel_id).push_back(r);
    }
  // Images that received a critical Add, per voxel.
  std::vector<std::vector<std::int64_t>> targets(n_voxels);
  for (const auto& j : read_jsonl(ctx.input("edit/edits.jsonl")))
    if (j.at("condition") == "critical" && j.at("kind") == "add")
      targets.at(j.at("voxel_id").get<int>()).push_back(j.at("edited_image").get<std::int64_t>());
  const EvalContext ectx = ws.eval_context();
  const std::uint64_t seed = ctx.config.seed();
  std::vector<json> profiles(n_voxels);
  std::vector<int> skipped(n_voxels, 0);
  std::vector<json> edits = per_voxel(n_voxels, ctx.config.workers(), [&](int v) {
    std::vector<json> out;
    std::optional<ProfileSpec> profile;
    if (static_cast<int>(trials[v].size()) >= opts.min_trials) {
      std::vector<FaithfulnessRecord> usable;
      for (const auto& r : trials[v])
        if (!r.skipped) usable.push_back(r);
      if (static_cast<int>(usable.size()) >= opts.min_trials) profile = build_profile(usable, opts);
    }
    if (!profile) {
      profiles[v] = {{"voxel_id", v}, {"profile", nullptr}};
      return out;
    }
    profiles[v] = to_json(*profile);
    std::vector<std::int64_t> images = targets[v];
    std::sort(images.begin(), images.end());
    images.erase(std::unique(images.begin(), images.end()), images.end());
    ProfileEditResult r = profile_edit_eval(ectx, *profile, images, derive_seed(seed, "profile", v));
    skipped[v] = r.skipped_features;
    for (const auto& e : r.records) out.push_back(to_json(e));
    return out;
  });
  int n_profiles = 0, n_skipped = 0;
  for (int v = 0; v < n_voxels; ++v) {
    n_profiles += !profiles[v].contains("profile");
    n_skipped += skipped[v];
  }
  write_jsonl(ctx.output("profiles.jsonl"), profiles);
  write_jsonl(ctx.output("edits.jsonl"), edits);
  write_json(ctx.output("summary.json"),
             ctx.annotate({{"n_profiles", n_profiles},
                           {"n_without_profile", n_voxels - n_profiles},
                           {"skipped_features", n_skipped}}));
}

// ---- statistics ----

// Design with one indicator column per cell.
struct CellDesign {
  std::vector<std::string> cells;
  std::vector<int> cell_of;  // per observation
  std::vector<double> y;
  std::vector<std::vector<std::int64_t>> groups;  // per factor, per observation

  int add_cell(const std::string& name) {
    auto it = std::find(cells.begin(), cells.end(), name);
    if (it != cells.end()) return static_cast<int>(it - cells.begin());
    cells.push_back(name);
    return static_cast<int>(cells.size()) - 1;
  }
  void add(const std::string& cell, double value, std::vector<std::int64_t> keys) {
    cell_of.push_back(add_cell(cell));
    y.push_back(value);
    if (groups.empty()) groups.resize(keys.size());
    for (std::size_t f = 0; f < keys.size(); ++f) groups[f].push_back(keys[f]);
  }
  MixedModelSpec spec(const std::vector<std::string>& factor_names) const {
    MixedModelSpec s;
    s.response = y;
    s.fixed_names = cells;
    s.design = Matrix::Zero(y.size(), cells.size());
    for (std::size_t i = 0; i < y.size(); ++i) s.design(i, cell_of[i]) = 1.0;
    for (std::size_t f = 0; f < groups.size(); ++f) s.factors.push_back({factor_names[f], dense_ids(groups[f])});
    return s;
  }
};

LmmOptions lmm_options(const StageContext& ctx) {
  LmmOptions o;
  o.max_iterations = ctx.section("stats").at("max_iterations").get<int>();
  o.tolerance = ctx.section("stats").at("tolerance").get<double>();
  return o;
}

json cell_means(const CellDesign& d) {
  json j = json::object();
  for (std::size_t c = 0; c < d.cells.size(); ++c) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < d.y.size(); ++i)
      if (d.cell_of[i] == static_cast<int>(c)) {
        sum += d.y[i];
        ++n;
      }
    j[d.cells[c]] = {{"n", n}, {"mean", n ? sum / n : 0.0}};
  }
  return j;
}

json fit_and_test(const StageContext& ctx, const CellDesign& d, const std::vector<std::string>& factors,
                  const std::vector<std::pair<std::string, std::string>>& contrasts,
                  const std::vector<std::string>& against_zero) {
  json out = {{"n_obs", d.y.size()}, {"cells", cell_means(d)}};
  if (d.y.size() <= d.cells.size()) {
    out["error"] = "too few observations";
    return out;
  }
  MixedFit fit = fit_lmm(d.spec(factors), lmm_options(ctx));
  out["fit"] = to_json(fit);
  json tests = json::array();
  for (const auto& [a, b] : contrasts) {
    Vector c = Vector::Zero(fit.beta.size());
    c(fit.index_of(a)) = 1.0;
    c(fit.index_of(b)) = -1.0;
    tests.push_back(to_json(wald_contrast(fit, c, a + " - " + b)));
  }
  for (const auto& a : against_zero) tests.push_back(to_json(wald_test(fit, a)));
  out["tests"] = tests;
  return out;
}

void stage_stats(const StageContext& ctx) {
  const auto& a = ctx.section("attribution");
  const double min_r2 = a.at("min_voxel_r2").get<double>();
  json stats = json::object();

  // Necessity: per-voxel retained-variance ratio, top-IG vs random removal.
  {
    CellDesign d;
    std::vector<std::pair<std::string, std::string>> contrasts;
    const auto test_k = a.at("test_k").get<std::vector<int>>();
    for (const auto& j : read_jsonl(ctx.input("patch-curve/points.jsonl"))) {
      if (j.at("mode") != "necessity") continue;
      const int k = j.at("k").get<int>();
      const std::string sel = j.at("selection").get<std::string>();
      if (sel == "lowest" || std::find(test_k.begin(), test_k.end(), k) == test_k.end()) continue;
      const double r2 = j.at("r2").get<double>();
      if (!(r2 >= min_r2)) continue;
      d.add(sel + "@" + std::to_string(k), j.at("r2_patched").get<double>() / r2, {j.at("voxel_id").get<int>()});
    }
    for (int k : test_k) contrasts.push_back({"top@" + std::to_string(k), "random@" + std::to_string(k)});
    stats["necessity"] = fit_and_test(ctx, d, {"voxel"}, contrasts, {});
  }
  // Reconstruction error by decoding method.
  {
    CellDesign d;
    for (const auto& j : read_jsonl(ctx.input("reconstruct/records.jsonl")))
      d.add(j.at("source").get<std::string>(), j.at("error").get<double>(),
            {j.at("voxel_id").get<int>(), j.at("image_id").get<std::int64_t>()});
    stats["reconstruction"] = fit_and_test(ctx, d, {"voxel", "image"},
                                           {{"top", "random"}, {"random", "lowest"}, {"top", "lowest"}}, {});
  }
  // Discriminability: activation by source distribution, voxel intercepts.
  {
    CellDesign d;
    for (const auto& j : read_jsonl(ctx.input("discriminate/activations.jsonl")))
      d.add(j.at("group").get<std::string>(), j.at("activation").get<double>(),
            {j.at("voxel_id").get<int>()});
    stats["discriminability"] = fit_and_test(ctx, d, {"voxel"}, {{"preferred", "non_preferred"}}, {});
  }
  // Edit direction for critical features.
  {
    CellDesign d;
    for (const auto& j : read_jsonl(ctx.input("edit/edits.jsonl"))) {
      if (j.at("condition") != "critical") continue;
      d.add(j.at("kind").get<std::string>(), j.at("after").get<double>() - j.at("before").get<double>(),
            {j.at("voxel_id").get<int>(), j.at("edited_image").get<std::int64_t>(),
             j.at("reference_image").get<std::int64_t>()});
    }
    stats["edit_direction"] =
        fit_and_test(ctx, d, {"voxel", "edited_image", "reference_image"}, {}, {"remove", "add"});
  }
  // Faithfulness: critical vs random-token features.
  {
    CellDesign d;
    std::vector<double> exact;
    int skipped = 0;
    for (const auto& j : read_jsonl(ctx.input("edit/faithfulness.jsonl"))) {
      if (j.at("skipped").get<bool>()) {
        ++skipped;
        continue;
      }
      const std::string cond = j.at("condition").get<std::string>();
      if (cond == "exact") {
        exact.push_back(j.at("value").get<double>());
        continue;
      }
      d.add(cond, j.at("value").get<double>(),
            {j.at("voxel_id").get<int>(), j.at("preferred_image").get<std::int64_t>()});
    }
    json f = fit_and_test(ctx, d, {"voxel", "image"}, {{"critical", "random"}}, {});
    f["skipped"] = skipped;
    f["exact_n"] = exact.size();
    f["exact_median"] = exact.empty() ? 0.0 : quantile(exact, 0.5);
    stats["faithfulness"] = f;
  }
  // Profile Add vs per-image critical Add on the same images.
  {
    std::set<int> with_profile;
    for (const auto& j : read_jsonl(ctx.input("profile/profiles.jsonl")))
      if (!j.contains("profile")) with_profile.insert(j.at("voxel_id").get<int>());
    CellDesign d;
    for (const auto& j : read_jsonl(ctx.input("profile/edits.jsonl")))
      d.add("profile", j.at("after").get<double>() - j.at("before").get<double>(),
            {j.at("voxel_id").get<int>(), j.at("edited_image").get<std::int64_t>()});
    for (const auto& j : read_jsonl(ctx.input("edit/edits.jsonl"))) {
      if (j.at("condition") != "critical" || j.at("kind") != "add") continue;
      if (!with_profile.count(j.at("voxel_id").get<int>())) continue;
      d.add("critical", j.at("after").get<double>() - j.at("before").get<double>(),
            {j.at("voxel_id").get<int>(), j.at("edited_image").get<std::int64_t>()});
    }
    stats["profile"] = fit_and_test(ctx, d, {"voxel", "image"}, {{"profile", "critical"}}, {});
  }
  write_json(ctx.output("stats.json"), ctx.annotate(stats));
}

// ---- report ----

std::map<std::string, int> count_by(const std::vector<json>& records,
                                     const std::function<std::string(const json&)>& key) {
  std::map<std::string, int> counts;
  for (const auto& r : records) ++counts[key(r)];
  return counts;
}

void stage_report(const StageContext& ctx) {
  const std::string h = ctx.config.full_hash();
  const std::uint64_t seed = ctx.config.seed();
  json report = {{"config_hash", h}, {"seed", seed}};
  report["train"] = read_json(ctx.input("train/summary.json"));
  report["eval"] = read_json(ctx.input("eval/metrics.json"));
  report["recovery"] = read_json(ctx.input("decode/recovery.json"));
  report["profile"] = read_json(ctx.input("profile/summary.json"));
  report["stats"] = read_json(ctx.input("stats/stats.json"));
  for (const char* k : {"train", "eval", "recovery", "profile", "stats"}) {
    report[k].erase("config_hash");
    report[k].erase("seed");
  }

  json counts = json::object();
  {
    const auto recs = read_jsonl(ctx.input("reconstruct/records.jsonl"));
    counts["reconstruct/records.jsonl"] = count_by(recs, [](const json& j) { return j.at("source").get<std::string>(); });
    CsvWriter csv(h, seed, {"voxel_id", "image_id", "source", "sample", "predicted", "target", "error"});
    for (const auto& j : recs)
      csv.row(j.at("voxel_id").get<int>(), j.at("image_id").get<std::int64_t>(), j.at("source").get<std::string>(),
              j.at("sample").get<int>(), j.at("predicted").get<double>(), j.at("target").get<double>(),
              j.at("error").get<double>());
    csv.save(ctx.output("reconstruction_errors.csv"));
  }
  {
    const auto recs = read_jsonl(ctx.input("discriminate/activations.jsonl"));
    counts["discriminate/activations.jsonl"] = count_by(recs, [](const json& j) { return j.at("group").get<std::string>(); });
    CsvWriter csv(h, seed, {"voxel_id", "source_image", "group", "sample", "activation"});
    for (const auto& j : recs)
      csv.row(j.at("voxel_id").get<int>(), j.at("source_image").get<std::int64_t>(),
              j.at("group").get<std::string>(), j.at("sample").get<int>(),
              j.at("activation").get<double>());
    csv.save(ctx.output("activations.csv"));
  }
  {
    const auto recs = read_jsonl(ctx.input("edit/faithfulness.jsonl"));
    counts["edit/faithfulness.jsonl"] = count_by(recs, [](const json& j) { return j.at("condition").get<std::string>(); });
    CsvWriter csv(h, seed, {"voxel_id", "preferred_image", "non_preferred_image", "condition", "value", "denominator", "skipped"});
    for (const auto& j : recs)
      csv.row(j.at("voxel_id").get<int>(), j.at("preferred_image").get<std::int64_t>(),
              j.at("non_preferred_image").get<std::int64_t>(), j.at("condition").get<std::string>(),
              j.at("value").is_null() ? std::string("") : j.at("value").dump(), j.at("denominator").get<double>(),
              j.at("skipped").get<bool>() ? 1 : 0);
    csv.save(ctx.output("faithfulness.csv"));
  }
  {
    const auto edits = read_jsonl(ctx.input("edit/edits.jsonl"));
    counts["edit/edits.jsonl"] = count_by(edits, [](const json& j) {
      return j.at("condition").get<std::string>() + "/" + j.at("kind").get<std::string>();
    });
    const auto profile_edits = read_jsonl(ctx.input("profile/edits.jsonl"));
    counts["profile/edits.jsonl"] = count_by(profile_edits, [](const json& j) { return j.at("condition").get<std::string>(); });
    CsvWriter csv(h, seed, {"voxel_id", "edited_image", "condition", "kind", "before", "after", "change"});
    for (const auto* list : {&edits, &profile_edits})
      for (const auto& j : *list) {
        const double before = j.at("before").get<double>(), after = j.at("after").get<double>();
        csv.row(j.at("voxel_id").get<int>(), j.at("edited_image").get<std::int64_t>(),
                j.at("condition").get<std::string>(), j.at("kind").get<std::string>(), before, after, after - before);
      }
    csv.save(ctx.output("edit_deltas.csv"));
  }
  {
    json curves = read_json(ctx.input("patch-curve/curves.json")).at("curves");
    CsvWriter csv(h, seed, {"mode", "selection", "k", "ratio", "mean_r2", "mean_r2_patched"});
    for (const auto& c : curves)
      for (const auto& p : c.at("points"))
        csv.row(c.at("mode").get<std::string>(), c.at("selection").get<std::string>(), p.at("k").get<int>(),
                p.at("ratio").get<double>(), p.at("mean_r2").get<double>(), p.at("mean_r2_patched").get<double>());
    csv.save(ctx.output("patch_curves.csv"));
    report["patch_curves"] = curves;
  }
  report["counts"] = counts;
  write_json(ctx.output("report.json"), report);
}

// ---- stage table and caching ----

struct StageDef {
  std::string name;
  std::vector<std::string> sections;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  void (*run)(const StageContext&);
};

const std::vector<StageDef>& stage_table() {
  static const std::vector<StageDef> table = {
      {"world-gen", {"world", "splits"}, {}, {"world.json", "tokens.bin", "responses.csv", "splits.json"}, &stage_world_gen},
      {"train", {"encoder", "train"},
       {"world-gen/world.json", "world-gen/tokens.bin", "world-gen/responses.csv", "world-gen/splits.json"},
       {"checkpoint.bin", "log.jsonl", "summary.json"}, &stage_train},
      {"eval", {},
       {"world-gen/world.json", "world-gen/tokens.bin", "world-gen/responses.csv", "world-gen/splits.json", "train/checkpoint.bin"},
       {"metrics.json"}, &stage_eval},
      {"attribute", {"attribution"},
       {"world-gen/tokens.bin", "world-gen/splits.json", "train/checkpoint.bin"},
       {"scores.bin", "baseline.json"}, &stage_attribute},
      {"patch-curve", {"attribution"},
       {"world-gen/tokens.bin", "world-gen/responses.csv", "world-gen/splits.json", "train/checkpoint.bin",
        "attribute/scores.bin", "attribute/baseline.json"},
       {"points.jsonl", "curves.json"}, &stage_patch_curve},
      {"decode", {"attribution", "decode", "counterfactual"},
       {"world-gen/world.json", "world-gen/tokens.bin", "world-gen/responses.csv", "world-gen/splits.json",
        "attribute/scores.bin"},
       {"preferences.jsonl", "decoded.jsonl", "recovery.json"}, &stage_decode},
      {"reconstruct", {"counterfactual"},
       {"world-gen/world.json", "world-gen/tokens.bin", "world-gen/responses.csv", "train/checkpoint.bin",
        "decode/preferences.jsonl", "decode/decoded.jsonl"},
       {"records.jsonl"}, &stage_reconstruct},
      {"discriminate", {"counterfactual"},
       {"world-gen/world.json", "world-gen/tokens.bin", "train/checkpoint.bin", "decode/preferences.jsonl",
        "decode/decoded.jsonl"},
       {"activations.jsonl"}, &stage_discriminate},
      {"edit", {"counterfactual"},
       {"world-gen/world.json", "world-gen/tokens.bin", "train/checkpoint.bin", "decode/preferences.jsonl",
        "decode/decoded.jsonl"},
       {"edits.jsonl", "faithfulness.jsonl", "summary.json"}, &stage_edit},
      {"profile", {"profile"},
       {"world-gen/world.json", "world-gen/tokens.bin", "train/checkpoint.bin", "edit/edits.jsonl",
        "edit/faithfulness.jsonl"},
       {"profiles.jsonl", "edits.jsonl", "summary.json"}, &stage_profile},
      {"stats", {"attribution", "stats"},
       {"patch-curve/points.jsonl", "reconstruct/records.jsonl", "discriminate/activations.jsonl",
        "edit/edits.jsonl", "edit/faithfulness.jsonl", "profile/profiles.jsonl", "profile/edits.jsonl"},
       {"stats.json"}, &stage_stats},
      {"report", {},
       {"train/summary.json", "eval/metrics.json", "decode/recovery.json", "patch-curve/curves.json",
        "reconstruct/records.jsonl", "discriminate/activations.jsonl", "edit/edits.jsonl",
        "edit/faithfulness.jsonl", "profile/summary.json", "profile/edits.jsonl", "stats/stats.json"},
       {"report.json", "reconstruction_errors.csv", "activations.csv", "faithfulness.csv", "edit_deltas.csv",
        "patch_curves.csv"},
       &stage_report},
  };
  return table;
}

const StageDef& find_stage(const std::string& name) {
  for (const auto& s : stage_table())
    if (s.name == name) return s;
  std::string known;
  for (const auto& s : stage_table()) known += (known.empty() ? "" : ", ") + s.name;
  throw ConfigError("unknown stage '" + name + "' (known: " + known + ")");
}

}  // namespace

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& s : stage_table()) n.push_back(s.name);
    return n;
  }();
  return names;
}

StageOutcome run_stage(const std::string& name, const PipelineConfig& config, const fs::path& out,
                       bool force) {
  const StageDef& def = find_stage(name);
  json inputs = json::object();
  for (const auto& rel : def.inputs) {
    const fs::path p = out / rel;
    if (!fs::exists(p)) {
      const std::string producer = rel.substr(0, rel.find('/'));
      throw DependencyError("stage '" + name + "' requires " + p.string() + "; run '" + producer + "' first");
    }
    inputs[rel] = file_hash(p);
  }
  const std::string config_hash = config.hash(def.sections);
  const std::string key =
      sha256_hex(json{{"stage", name}, {"version", kPipelineVersion}, {"config", config_hash},
                      {"inputs", inputs}}.dump());
  const fs::path dir = out / name;
  const fs::path manifest_path = dir / "manifest.json";
  StageOutcome outcome;
  outcome.stage = name;
  for (const auto& o : def.outputs) outcome.outputs.push_back((dir / o).string());

  if (!force && fs::exists(manifest_path)) {
    json m = json::parse(read_text(manifest_path), nullptr, false);
    bool current = !m.is_discarded() && m.value("key", "") == key;
    for (const auto& o : def.outputs) {
      if (!current) break;
      const fs::path p = dir / o;
      current = fs::exists(p) && m["outputs"].value(o, "") == file_hash(p);
    }
    if (current) {
      outcome.skipped = true;
      return outcome;
    }
  }
  fs::create_directories(dir);
  std::error_code ec;
  fs::remove(manifest_path, ec);  // a half-written stage is never reused
  StageContext ctx{config, out, dir, config_hash};
  def.run(ctx);
  json outputs = json::object();
  for (const auto& o : def.outputs) {
    const fs::path p = dir / o;
    if (!fs::exists(p)) throw Error("stage '" + name + "' did not write " + p.string());
    outputs[o] = file_hash(p);
  }
  write_json(manifest_path, {{"stage", name},
                             {"key", key},
                             {"config_hash", config_hash},
                             {"seed", config.seed()},
                             {"inputs", inputs},
                             {"outputs", outputs}});
  return outcome;
}

std::vector<StageOutcome> run_pipeline(const PipelineConfig& config, const fs::path& out,
                                       const std::string& last, bool force) {
  find_stage(last);
  std::vector<StageOutcome> outcomes;
  for (const auto& name : stage_names()) {
    outcomes.push_back(run_stage(name, config, out, force));
    if (name == last) break;
  }
  return outcomes;
}

}  // namespace voxlens
