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

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cctype>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/imaging.hpp"
#include "histomil/rng.hpp"

namespace histomil {

using EmbeddingMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One slide's tile embeddings. patient_id is carried by the dataset
// manifest and is not part of the bag file.
struct EmbeddingBag {
  std::string slide_id;
  std::string patient_id;
  std::vector<std::array<std::uint32_t, 2>> coords;  // (grid_x, grid_y); empty if unknown
  EmbeddingMatrix embeddings;                          // n x d

  Eigen::Index n() const { return embeddings.rows(); }
  Eigen::Index d() const { return embeddings.cols(); }
};

// Bitwise equality of everything stored in a bag file.
inline bool same_bag_payload(const EmbeddingBag& a, const EmbeddingBag& b) {
  if (a.slide_id != b.slide_id || a.coords != b.coords) return false;
  if (a.embeddings.rows() != b.embeddings.rows() || a.embeddings.cols() != b.embeddings.cols())
    return false;
  return std::memcmp(a.embeddings.data(), b.embeddings.data(),
                     sizeof(float) * static_cast<std::size_t>(a.embeddings.size())) == 0;
}

inline constexpr int kStubFeatureDim = 768;
inline constexpr int kStubGrid = 16;

namespace detail {

inline const Eigen::MatrixXd& seeded_orthonormal(int dim, std::uint64_t seed) {
  static std::mutex mutex;
  static std::map<std::pair<int, std::uint64_t>, Eigen::MatrixXd> cache;
  std::lock_guard lock(mutex);
  auto it = cache.find({dim, seed});
  if (it != cache.end()) return it->second;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Eigen::MatrixXd g(dim, dim);
  for (int c = 0; c < dim; ++c)
    for (int r = 0; r < dim; ++r) g(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(dim, dim);
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < dim; ++c)
    if (r(c, c) < 0) q.col(c) *= -1.0;
  return cache.emplace(std::make_pair(dim, seed), std::move(q)).first->second;
}

}  // namespace detail

// The 768 standardized 16x16x3 area-averaged intensities before projection.
inline Eigen::VectorXd stub_standardized_input(const Tile& tile) {
  Eigen::VectorXd v(kStubFeatureDim);
  for (int gy = 0; gy < kStubGrid; ++gy) {
    const int y0 = gy * tile.size / kStubGrid, y1 = (gy + 1) * tile.size / kStubGrid;
    for (int gx = 0; gx < kStubGrid; ++gx) {
      const int x0 = gx * tile.size / kStubGrid, x1 = (gx + 1) * tile.size / kStubGrid;
      std::array<double, 3> sum{};
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
          for (int c = 0; c < 3; ++c) sum[c] += tile.at(x, y, c);
      const double area = std::max(1, (y1 - y0) * (x1 - x0));
      for (int c = 0; c < 3; ++c) v((gy * kStubGrid + gx) * 3 + c) = sum[c] / area;
    }
  }
  constexpr int cells = kStubGrid * kStubGrid;
  for (int c = 0; c < 3; ++c) {
    double mean = 0;
    for (int i = 0; i < cells; ++i) mean += v(i * 3 + c);
    mean /= cells;
    double var = 0;
    for (int i = 0; i < cells; ++i) var += (v(i * 3 + c) - mean) * (v(i * 3 + c) - mean);
    const double sd = std::sqrt(var / cells);
    for (int i = 0; i < cells; ++i)
      v(i * 3 + c) = sd > 1e-12 ? (v(i * 3 + c) - mean) / sd : 0.0;
  }
  return v;
}

// Deterministic stand-in for a pretrained tile encoder.
inline Eigen::VectorXf stub_extract(const Tile& tile, std::uint64_t seed) {
  const Eigen::MatrixXd& q = detail::seeded_orthonormal(kStubFeatureDim, seed);
  return (q * stub_standardized_input(tile)).cast<float>();
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return data_.size() - pos_; }

  void need(std::uint64_t bytes, const char* what) const {
    if (remaining() < bytes)
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string data_;
  std::uint64_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline constexpr std::uint32_t kBagVersion = 1;

// Little-endian layout: "EMB1", u32 version, u32 n, u32 d, u32 flags
// (bit0: coords present), u32 slide_id length + utf-8 bytes,
// n x 2 u32 coords (if flagged), n x d float32 row-major.
inline std::string encode_bag(const EmbeddingBag& bag) {
  if (bag.n() < 1) throw ValidationError("write_bag: bag must contain at least one tile");
  if (!bag.coords.empty() && static_cast<Eigen::Index>(bag.coords.size()) != bag.n())
    throw DimensionError("write_bag: coords length does not match tile count");
  std::string out = "EMB1";
  detail::put_u32(out, kBagVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(bag.n()));
  detail::put_u32(out, static_cast<std::uint32_t>(bag.d()));
  detail::put_u32(out, bag.coords.empty() ? 0u : 1u);
  detail::put_u32(out, static_cast<std::uint32_t>(bag.slide_id.size()));
  out += bag.slide_id;
  for (const auto& c : bag.coords) {
    detail::put_u32(out, c[0]);
    detail::put_u32(out, c[1]);
  }
  const float* p = bag.embeddings.data();
  for (Eigen::Index i = 0; i < bag.embeddings.size(); ++i)
    detail::put_u32(out, std::bit_cast<std::uint32_t>(p[i]));
  return out;
}

inline EmbeddingBag decode_bag(std::string data) {
  detail::ByteReader in(std::move(data));
  if (in.remaining() < 4 || in.bytes(4, "magic") != "EMB1")
    throw FormatError("bad magic (expected EMB1)", 0);
  const auto version_at = in.offset();
  const std::uint32_t version = in.u32("version");
  if (version != kBagVersion)
    throw FormatError("unsupported bag version " + std::to_string(version), version_at);
  const auto n_at = in.offset();
  const std::uint32_t n = in.u32("n");
  const std::uint32_t d = in.u32("d");
  const std::uint32_t flags = in.u32("flags");
  if (n == 0 || d == 0) throw FormatError("bag header declares an empty matrix", n_at);
  const std::uint32_t id_len = in.u32("slide_id length");
  EmbeddingBag bag;
  bag.slide_id = in.bytes(id_len, "slide_id");
  if (flags & 1u) {
    in.need(std::uint64_t{n} * 8, "coords (truncated)");
    bag.coords.resize(n);
    for (auto& c : bag.coords) {
      c[0] = in.u32("coords");
      c[1] = in.u32("coords");
    }
  }
  const std::uint64_t payload = std::uint64_t{n} * d * 4;
  in.need(payload, "embeddings (truncated)");
  bag.embeddings.resize(n, d);
  float* p = bag.embeddings.data();
  for (std::uint64_t i = 0; i < std::uint64_t{n} * d; ++i) {
    const auto at = in.offset();
    p[i] = std::bit_cast<float>(in.u32("embeddings"));
    if (!std::isfinite(p[i])) throw FormatError("non-finite embedding value", at);
  }
  if (in.remaining() != 0)
    throw FormatError("trailing bytes after embedding payload", in.offset());
  return bag;
}

inline void write_bag(const EmbeddingBag& bag, const std::string& path) {
  const std::string bytes = encode_bag(bag);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write bag '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline EmbeddingBag read_bag(const std::string& path) {
  return decode_bag(detail::read_file_bytes(path));
}

// --- dataset manifest -------------------------------------------------------

using TargetValue = std::optional<bool>;  // nullopt = NA

struct ManifestRow {
  std::string patient_id;
  std::string feature_path;
  std::vector<TargetValue> targets;  // parallel to DatasetManifest::target_names
};

struct DatasetManifest {
  std::vector<std::string> target_names;
  std::vector<ManifestRow> rows;
  std::filesystem::path base_dir;  // relative FEATURE_PATHs resolve against this

  int target_index(const std::string& name) const {
    for (std::size_t i = 0; i < target_names.size(); ++i)
      if (target_names[i] == name) return static_cast<int>(i);
    throw ValidationError("target '" + name + "' is not a manifest column");
  }

  std::filesystem::path resolve(const ManifestRow& row) const {
    std::filesystem::path p(row.feature_path);
    return p.is_absolute() ? p : base_dir / p;
  }
};

namespace detail {

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace detail

inline DatasetManifest parse_manifest(std::istream& in, std::filesystem::path base_dir = {}) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("manifest: empty file");
  const auto header = detail::split_csv_line(line);
  int pid_col = -1, path_col = -1;
  std::vector<int> target_cols;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "PATIENT_ID") pid_col = static_cast<int>(i);
    else if (header[i] == "FEATURE_PATH") path_col = static_cast<int>(i);
    else if (!header[i].empty()) {
      m.target_names.push_back(header[i]);
      target_cols.push_back(static_cast<int>(i));
    }
  }
  if (pid_col < 0) throw ParseError("manifest: missing column PATIENT_ID");
  if (path_col < 0) throw ParseError("manifest: missing column FEATURE_PATH");
  if (target_cols.empty()) throw ParseError("manifest: no target columns");

  std::set<std::string> seen_paths;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() != header.size())
      throw ParseError("manifest line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    ManifestRow row;
    row.patient_id = fields[static_cast<std::size_t>(pid_col)];
    row.feature_path = fields[static_cast<std::size_t>(path_col)];
    if (row.patient_id.empty())
      throw ParseError("manifest line " + std::to_string(line_no) + ": empty PATIENT_ID");
    if (row.feature_path.empty())
      throw ParseError("manifest line " + std::to_string(line_no) + ": empty FEATURE_PATH");
    if (!seen_paths.insert(row.feature_path).second)
      throw DuplicateError("manifest line " + std::to_string(line_no) +
                           ": duplicate FEATURE_PATH '" + row.feature_path + "'");
    for (int col : target_cols) {
      const std::string& v = fields[static_cast<std::size_t>(col)];
      if (v == "0") row.targets.emplace_back(false);
      else if (v == "1") row.targets.emplace_back(true);
      else if (v == "NA" || v.empty()) row.targets.emplace_back(std::nullopt);
      else
        throw ParseError("manifest line " + std::to_string(line_no) + ": target value '" + v +
                         "' is not 0, 1 or NA");
    }
    m.rows.push_back(std::move(row));
  }
  return m;
}

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest '" + path + "'");
  return parse_manifest(in, std::filesystem::path(path).parent_path());
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest '" + path + "'");
  out << "PATIENT_ID,FEATURE_PATH";
  for (const auto& t : m.target_names) out << ',' << t;
  out << '\n';
  for (const auto& r : m.rows) {
    out << r.patient_id << ',' << r.feature_path;
    for (const auto& t : r.targets) out << ',' << (t ? (*t ? "1" : "0") : "NA");
    out << '\n';
  }
}

// Reads every bag referenced by the manifest; all bags must share one d.
inline std::vector<EmbeddingBag> load_bags(const DatasetManifest& m) {
  std::vector<EmbeddingBag> bags;
  bags.reserve(m.rows.size());
  for (const auto& row : m.rows) {
    EmbeddingBag b = read_bag(m.resolve(row).string());
    b.patient_id = row.patient_id;
    if (!bags.empty() && b.d() != bags.front().d())
      throw DimensionError("bag '" + row.feature_path + "' has d=" + std::to_string(b.d()) +
                           " but the dataset uses d=" + std::to_string(bags.front().d()));
    bags.push_back(std::move(b));
  }
  return bags;
}

}  // namespace histomil
