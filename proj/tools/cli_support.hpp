/*
 * Copyright 2026 The HistoMIL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <openssl/evp.h>
#include <png.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "histomil/histomil.hpp"
#include "json.hpp"

namespace histomil::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "1.0.0";

inline std::string sha256_bytes(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw Error("sha256 failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

inline std::string sha256_file(const fs::path& path) {
  return sha256_bytes(detail::read_file_bytes(path.string()));
}

// Directory digest: hash of the sorted "name:sha256" lines of its files.
inline json directory_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string lines;
  for (const auto& f : files) lines += f.filename().string() + ":" + sha256_file(f) + "\n";
  return {{"files", files.size()}, {"sha256", sha256_bytes(lines)}};
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Everything needed to re-run a command: argv, effective parameters, seeds,
// versions and digests of the inputs.
struct RunMetadata {
  json doc;

  RunMetadata(const std::string& command, int argc, char** argv) {
    doc["command"] = command;
    doc["argv"] = std::vector<std::string>(argv, argv + argc);
    doc["started_at"] = utc_timestamp();
    doc["versions"] = {{"histomil", kVersion},
                       {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                     std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                     std::to_string(EIGEN_MINOR_VERSION)},
                       {"libpng", PNG_LIBPNG_VER_STRING},
                       {"compiler", __VERSION__}};
    doc["inputs"] = json::object();
    doc["outputs"] = json::array();
  }

  void input(const std::string& role, const fs::path& path) {
    if (fs::is_directory(path))
      doc["inputs"][role] = {{"path", path.string()}, {"digest", directory_digest(path)}};
    else
      doc["inputs"][role] = {{"path", path.string()}, {"sha256", sha256_file(path)}};
  }

  // Writes <output>.meta.json next to a file output, or run_metadata.json
  // inside a directory output.
  void write_for(const fs::path& output) {
    doc["outputs"].push_back(output.string());
    const fs::path meta =
        fs::is_directory(output) ? output / "run_metadata.json" : fs::path(output.string() + ".meta.json");
    std::ofstream out(meta);
    if (!out) throw Error("cannot write '" + meta.string() + "'");
    out << doc.dump(2) << '\n';
  }
};

// Flag values that override the config file only when given explicitly.
struct Overrides {
  struct Item {
    CLI::Option* option;
    std::function<void(json&)> apply;
  };
  std::vector<Item> items;

  template <class V>
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& section,
                   const std::string& key, const std::string& help) {
    auto value = std::make_shared<V>();
    CLI::Option* o = app->add_option(flag, *value, help);
    items.push_back({o, [=](json& j) { j[section][key] = *value; }});
    return o;
  }

  CLI::Option* add_flag(CLI::App* app, const std::string& flag, const std::string& section,
                        const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* o = app->add_flag(flag, *value, help);
    items.push_back({o, [=](json& j) { j[section][key] = *value; }});
    return o;
  }

  void apply(json& j) const {
    for (const auto& it : items)
      if (it.option->count() > 0) it.apply(j);
  }
};

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("'" + path + "' is not valid JSON: " + e.what());
  }
}

// defaults, then the config file, then explicit flags.
inline json effective_config(json defaults, const std::string& config_path, const Overrides& flags) {
  if (!config_path.empty()) {
    const json file = read_json_file(config_path);
    if (!file.is_object()) throw ParseError("config file must hold a JSON object");
    defaults.merge_patch(file);
  }
  json explicit_flags = json::object();
  flags.apply(explicit_flags);
  defaults.merge_patch(explicit_flags);
  return defaults;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

inline void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

// --- scores CSV ---------------------------------------------------------------

struct ScoreRow {
  std::string patient_id;
  std::string target;
  int fold = -1;
  double score = 0;
  int label = 0;
};

inline void write_scores_csv(const fs::path& path, const std::vector<ScoreRow>& rows) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.precision(17);
  out << "patient_id,target,fold,score,label\n";
  for (const auto& r : rows)
    out << r.patient_id << ',' << r.target << ',' << r.fold << ',' << r.score << ',' << r.label << '\n';
}

// Reads any CSV with "score" and "label" columns; "target" filters rows
// when present and a target is requested.
inline ScoredSet read_scores_csv(const std::string& path, const std::string& target = "") {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open scores file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("scores file '" + path + "' is empty");
  const auto header = detail::split_csv_line(line);
  int score_col = -1, label_col = -1, target_col = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "score") score_col = static_cast<int>(i);
    if (header[i] == "label") label_col = static_cast<int>(i);
    if (header[i] == "target") target_col = static_cast<int>(i);
  }
  if (score_col < 0 || label_col < 0)
    throw ParseError("scores file '" + path + "' needs 'score' and 'label' columns");
  ScoredSet s;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("scores file line " + std::to_string(line_no) + ": wrong column count");
    if (!target.empty() && target_col >= 0 && cells[static_cast<std::size_t>(target_col)] != target)
      continue;
    const std::string& sc = cells[static_cast<std::size_t>(score_col)];
    const std::string& lb = cells[static_cast<std::size_t>(label_col)];
    char* end = nullptr;
    const double v = std::strtod(sc.c_str(), &end);
    if (sc.empty() || *end != '\0' || !std::isfinite(v))
      throw ParseError("scores file line " + std::to_string(line_no) + ": bad score '" + sc + "'");
    if (lb != "0" && lb != "1")
      throw ParseError("scores file line " + std::to_string(line_no) + ": label must be 0 or 1");
    s.scores.push_back(v);
    s.labels.push_back(lb == "1" ? 1 : 0);
  }
  if (s.size() == 0) throw ValidationError("scores file '" + path + "' has no usable rows");
  return s;
}

}  // namespace histomil::cli
