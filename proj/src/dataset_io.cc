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

#include "voxlens/dataset_io.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace voxlens {
namespace fs = std::filesystem;
namespace {

template <typename T>
void append_le(std::string& out, T value) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  Bits bits = std::bit_cast<Bits>(value);
  for (std::size_t b = 0; b < sizeof(T); ++b)
    out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

template <typename T>
T load_le(const char* p) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  Bits bits = 0;
  for (std::size_t b = 0; b < sizeof(T); ++b)
    bits |= static_cast<Bits>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<T>(bits);
}

// Splits a header-prefixed binary file into its JSON header and payload.
std::pair<nlohmann::json, std::string> read_framed(const fs::path& path) {
  std::string bytes = read_text(path);
  const std::size_t newline = bytes.find('\n');
  if (newline == std::string::npos)
    throw FormatError(path.string() + ": missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  return {std::move(header), bytes.substr(newline + 1)};
}

void check_payload(const fs::path& path, std::size_t expected, std::size_t actual) {
  if (expected != actual)
    throw FormatError(path.string() + ": payload size mismatch, expected " +
                      std::to_string(expected) + " bytes but found " +
                      std::to_string(actual));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_jsonl(const fs::path& path, std::span<const nlohmann::json> records) {
  std::string text;
  for (const auto& r : records) {
    text += r.dump();
    text.push_back('\n');
  }
  write_text(path, text);
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::vector<nlohmann::json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

Matrix TokenTensors::image(int index) const {
  if (index < 0 || index >= n_images) throw DimensionError("image index out of range");
  Matrix m(seq_len, token_dim);
  const std::size_t offset = static_cast<std::size_t>(index) * seq_len * token_dim;
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = data[offset + k];
  return m;
}

std::vector<Matrix> TokenTensors::images() const {
  std::vector<Matrix> out;
  out.reserve(n_images);
  for (int i = 0; i < n_images; ++i) out.push_back(image(i));
  return out;
}

TokenTensors TokenTensors::from_matrices(std::span<const Matrix> images,
                                         std::vector<std::int64_t> image_ids) {
  if (images.empty()) throw DimensionError("no token matrices");
  if (image_ids.size() != images.size())
    throw DimensionError("one image id per token matrix is required");
  TokenTensors t;
  t.n_images = static_cast<int>(images.size());
  t.seq_len = static_cast<int>(images[0].rows());
  t.token_dim = static_cast<int>(images[0].cols());
  t.image_ids = std::move(image_ids);
  t.data.reserve(static_cast<std::size_t>(t.n_images) * t.seq_len * t.token_dim);
  for (const Matrix& m : images) {
    if (m.rows() != t.seq_len || m.cols() != t.token_dim)
      throw DimensionError("token matrices differ in shape");
    for (Eigen::Index k = 0; k < m.size(); ++k)
      t.data.push_back(static_cast<float>(m.data()[k]));
  }
  return t;
}

void write_tokens(const fs::path& path, const TokenTensors& t) {
  if (t.n_images < 1 || t.seq_len < 1 || t.token_dim < 1)
    throw DimensionError("token tensor counts must be positive");
  const std::size_t count = static_cast<std::size_t>(t.n_images) * t.seq_len * t.token_dim;
  if (t.data.size() != count) throw DimensionError("token data size does not match header");
  nlohmann::json header = {{"format", "voxlens-tokens"}, {"version", 1},
                           {"n_images", t.n_images},     {"seq_len", t.seq_len},
                           {"token_dim", t.token_dim},   {"dtype", "f32"},
                           {"layout", "row-major"},      {"endianness", "little"}};
  if (!t.image_ids.empty()) {
    if (t.image_ids.size() != static_cast<std::size_t>(t.n_images))
      throw DimensionError("image id count does not match n_images");
    header["image_ids"] = t.image_ids;
  }
  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + 4 * count);
  for (float v : t.data) append_le(out, v);
  write_text(path, out);
}

TokenTensors read_tokens(const fs::path& path) {
  auto [header, payload] = read_framed(path);
  if (header.value("format", "") != "voxlens-tokens")
    throw FormatError(path.string() + ": not a token tensor file");
  const std::string dtype = header.value("dtype", "");
  if (dtype != "f32") throw FormatError(path.string() + ": unknown dtype '" + dtype + "'");
  if (header.value("layout", "") != "row-major" ||
      header.value("endianness", "") != "little")
    throw FormatError(path.string() + ": unsupported layout or endianness");
  TokenTensors t;
  t.n_images = header.at("n_images").get<int>();
  t.seq_len = header.at("seq_len").get<int>();
  t.token_dim = header.at("token_dim").get<int>();
  if (t.n_images < 1 || t.seq_len < 1 || t.token_dim < 1)
    throw FormatError(path.string() + ": header counts must be positive");
  const std::size_t count = static_cast<std::size_t>(t.n_images) * t.seq_len * t.token_dim;
  check_payload(path, 4 * count, payload.size());
  if (header.contains("image_ids")) {
    header.at("image_ids").get_to(t.image_ids);
    if (t.image_ids.size() != static_cast<std::size_t>(t.n_images))
      throw FormatError(path.string() + ": image_ids length does not match n_images");
  } else {
    t.image_ids.resize(t.n_images);
    std::iota(t.image_ids.begin(), t.image_ids.end(), 0);
  }
  t.data.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    t.data[k] = load_le<float>(payload.data() + 4 * k);
    if (!std::isfinite(t.data[k]))
      throw FormatError(path.string() + ": non-finite token value");
  }
  return t;
}

void write_responses(const fs::path& path, std::span<const ResponseRow> rows) {
  std::string text;
  if (path.extension() == ".csv") {
    text = "image_id,voxel_id,rep,response\n";
    for (const auto& r : rows) {
      // The JSON number formatter gives the shortest round-trip form.
      text += std::to_string(r.image_id) + "," + std::to_string(r.voxel_id) + "," +
              std::to_string(r.rep_index) + "," + nlohmann::json(r.response).dump() + "\n";
    }
  } else {
    for (const auto& r : rows) {
      text += nlohmann::json{{"image_id", r.image_id},
                             {"voxel_id", r.voxel_id},
                             {"rep", r.rep_index},
                             {"response", r.response}}
                  .dump();
      text.push_back('\n');
    }
  }
  write_text(path, text);
}

std::vector<ResponseRow> read_responses(const fs::path& path) {
  std::vector<ResponseRow> rows;
  if (path.extension() == ".csv") {
    std::istringstream in(read_text(path));
    std::string line;
    if (!std::getline(in, line) || line != "image_id,voxel_id,rep,response")
      throw FormatError(path.string() + ": missing CSV header");
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto cells = split_csv_line(line);
      if (cells.size() != 4)
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 4 fields");
      try {
        rows.push_back({std::stoll(cells[0]), std::stoi(cells[1]), std::stoi(cells[2]),
                        std::stod(cells[3])});
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad number");
      }
    }
  } else {
    for (const auto& j : read_jsonl(path)) {
      rows.push_back({j.at("image_id").get<std::int64_t>(), j.at("voxel_id").get<int>(),
                      j.at("rep").get<int>(), j.at("response").get<double>()});
    }
  }
  std::set<std::tuple<std::int64_t, int, int>> keys;
  for (const auto& r : rows) {
    if (!std::isfinite(r.response))
      throw FormatError(path.string() + ": non-finite response");
    if (!keys.emplace(r.image_id, r.voxel_id, r.rep_index).second)
      throw FormatError(path.string() + ": duplicate (image, voxel, rep) = (" +
                        std::to_string(r.image_id) + ", " + std::to_string(r.voxel_id) +
                        ", " + std::to_string(r.rep_index) + ")");
  }
  return rows;
}

std::vector<ResponseRow> rows_from_cube(const ResponseCube& cube,
                                        std::span<const std::int64_t> image_ids) {
  if (static_cast<int>(image_ids.size()) != cube.n_images())
    throw DimensionError("image id count does not match the response cube");
  std::vector<ResponseRow> rows;
  rows.reserve(cube.raw().size());
  for (int i = 0; i < cube.n_images(); ++i)
    for (int v = 0; v < cube.n_voxels(); ++v)
      for (int r = 0; r < cube.n_reps(); ++r)
        rows.push_back({image_ids[i], v, r, cube.at(i, v, r)});
  return rows;
}

ResponseCube cube_from_rows(std::span<const ResponseRow> rows,
                            std::span<const std::int64_t> image_ids) {
  std::map<std::int64_t, int> index;
  for (std::size_t i = 0; i < image_ids.size(); ++i)
    index[image_ids[i]] = static_cast<int>(i);
  int n_voxels = 0, n_reps = 0;
  for (const auto& r : rows) {
    if (r.voxel_id < 0 || r.rep_index < 0) throw FormatError("negative voxel or rep index");
    n_voxels = std::max(n_voxels, r.voxel_id + 1);
    n_reps = std::max(n_reps, r.rep_index + 1);
  }
  ResponseCube cube(static_cast<int>(image_ids.size()), n_voxels, n_reps);
  std::vector<char> seen(cube.raw().size(), 0);
  std::size_t filled = 0;
  for (const auto& r : rows) {
    auto it = index.find(r.image_id);
    if (it == index.end()) continue;
    cube.at(it->second, r.voxel_id, r.rep_index) = r.response;
    const std::size_t flat =
        (static_cast<std::size_t>(it->second) * n_voxels + r.voxel_id) * n_reps + r.rep_index;
    if (!seen[flat]) {
      seen[flat] = 1;
      ++filled;
    }
  }
  if (filled != seen.size())
    throw FormatError("response table is missing " + std::to_string(seen.size() - filled) +
                      " (image, voxel, rep) entries");
  return cube;
}

void SplitSpec::validate(std::span<const std::int64_t> dataset_ids) const {
  std::set<std::int64_t> known(dataset_ids.begin(), dataset_ids.end());
  std::set<std::int64_t> used;
  for (const auto* part : {&train, &val, &test, &analysis}) {
    for (std::int64_t id : *part) {
      if (!known.count(id))
        throw ConfigError("split references unknown image " + std::to_string(id));
      if (!used.insert(id).second)
        throw ConfigError("image " + std::to_string(id) + " appears in two splits");
    }
  }
}

nlohmann::json to_json(const SplitSpec& s) {
  return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"analysis", s.analysis}};
}

SplitSpec split_from_json(const nlohmann::json& j) {
  SplitSpec s;
  j.at("train").get_to(s.train);
  j.at("val").get_to(s.val);
  j.at("test").get_to(s.test);
  j.at("analysis").get_to(s.analysis);
  return s;
}

SplitSpec make_splits(std::span<const std::int64_t> image_ids,
                      const std::array<double, 4>& fractions, std::uint64_t seed) {
  if (image_ids.empty()) throw InsufficientDataError("no images to split");
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (total > 1.0 + 1e-12) throw ConfigError("split fractions sum above 1");
  std::vector<std::int64_t> order(image_ids.begin(), image_ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n = order.size();
  SplitSpec split;
  std::vector<std::int64_t>* parts[4] = {&split.train, &split.val, &split.test,
                                         &split.analysis};
  std::size_t cursor = 0;
  for (int k = 0; k < 4; ++k) {
    std::size_t count = static_cast<std::size_t>(std::llround(fractions[k] * n));
    count = std::min(count, n - cursor);
    parts[k]->assign(order.begin() + cursor, order.begin() + cursor + count);
    cursor += count;
  }
  return split;
}

void write_checkpoint(const fs::path& path, const EncoderParams& params,
                      const CheckpointInfo& info) {
  if (!params.all_finite()) throw NumericError("refusing to checkpoint non-finite parameters");
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t count = 0;
  for (const auto& t : params.tensors()) {
    tensors.push_back({{"name", t.name}, {"shape", {t.tensor->rows(), t.tensor->cols()}}});
    count += static_cast<std::size_t>(t.tensor->size());
  }
  nlohmann::json header = {{"format", "voxlens-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"config", to_json(params.config)},
                           {"tensors", tensors},
                           {"epoch", info.epoch},
                           {"seed", info.seed},
                           {"hyperparameters", info.hyperparameters},
                           {"dtype", "f64"},
                           {"endianness", "little"}};
  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + 8 * count);
  for (const auto& t : params.tensors())
    for (Eigen::Index k = 0; k < t.tensor->size(); ++k) append_le(out, t.tensor->data()[k]);
  write_text(path, out);
}

EncoderParams read_checkpoint(const fs::path& path, CheckpointInfo* info,
                              const EncoderConfig* expected) {
  auto [header, payload] = read_framed(path);
  if (header.value("format", "") != "voxlens-checkpoint")
    throw FormatError(path.string() + ": not a checkpoint");
  const int version = header.value("version", -1);
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kCheckpointVersion) +
                      ")");
  if (header.value("dtype", "") != "f64")
    throw FormatError(path.string() + ": checkpoint dtype must be f64");
  EncoderConfig config = encoder_config_from_json(header.at("config"));
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw DimensionError(path.string() + ": " + e.what());
  }
  if (expected != nullptr && !(config == *expected))
    throw DimensionError(path.string() + ": checkpoint config does not match the model config");
  EncoderParams params = EncoderParams::zeros(config);
  auto tensors = params.tensors();
  const auto& declared = header.at("tensors");
  if (declared.size() != tensors.size())
    throw DimensionError(path.string() + ": expected " + std::to_string(tensors.size()) +
                         " tensors, header declares " + std::to_string(declared.size()));
  std::size_t count = 0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& d = declared[t];
    const auto shape = d.at("shape").get<std::vector<Eigen::Index>>();
    if (d.at("name").get<std::string>() != tensors[t].name || shape.size() != 2 ||
        shape[0] != tensors[t].tensor->rows() || shape[1] != tensors[t].tensor->cols())
      throw DimensionError(path.string() + ": tensor '" + tensors[t].name +
                           "' declared shape does not match the config");
    count += static_cast<std::size_t>(tensors[t].tensor->size());
  }
  check_payload(path, 8 * count, payload.size());
  const char* cursor = payload.data();
  for (auto& t : tensors)
    for (Eigen::Index k = 0; k < t.tensor->size(); ++k, cursor += 8)
      t.tensor->data()[k] = load_le<double>(cursor);
  if (info != nullptr) {
    info->epoch = header.value("epoch", 0);
    info->seed = header.value("seed", std::uint64_t{0});
    info->hyperparameters = header.value("hyperparameters", nlohmann::json::object());
  }
  return params;
}

}  // namespace voxlens
