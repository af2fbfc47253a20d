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

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "histomil/error.hpp"
#include "histomil/features.hpp"
#include "histomil/model/common.hpp"
#include "json.hpp"

namespace histomil {

struct CheckpointMeta {
  std::string model_kind;
  nlohmann::json config;
  std::int64_t iteration = 0;
  double val_auroc = 0.0;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

struct RawCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Mat<float>> tensors;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "HMCK", u32 version, u64 header length, JSON header (config,
// iteration, best validation AUROC, seed, tensor registry with
// name/shape/offset), then the tensors as little-endian float32.
template <class Params>
std::string encode_checkpoint(Params params, const CheckpointMeta& meta) {
  nlohmann::json header;
  header["format"] = "histomil-checkpoint";
  header["model"] = meta.model_kind;
  header["config"] = meta.config;
  header["iteration"] = meta.iteration;
  header["val_auroc"] = meta.val_auroc;
  header["seed"] = meta.seed;
  header["extra"] = meta.extra;
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& t : params.tensors()) {
    header["tensors"].push_back({{"name", t.name},
                                 {"shape", {t.value->rows(), t.value->cols()}},
                                 {"offset", payload.size()}});
    for (Eigen::Index i = 0; i < t.value->size(); ++i)
      detail::put_u32(payload,
                      std::bit_cast<std::uint32_t>(static_cast<float>(t.value->data()[i])));
  }
  const std::string header_text = header.dump();
  std::string out = "HMCK";
  detail::put_u32(out, kCheckpointVersion);
  const auto len = static_cast<std::uint64_t>(header_text.size());
  detail::put_u32(out, static_cast<std::uint32_t>(len & 0xffffffffu));
  detail::put_u32(out, static_cast<std::uint32_t>(len >> 32));
  out += header_text;
  out += payload;
  return out;
}

template <class Params>
void write_checkpoint(const std::string& path, const Params& params, const CheckpointMeta& meta) {
  const std::string bytes = encode_checkpoint(params, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline RawCheckpoint decode_checkpoint(std::string data) {
  detail::ByteReader in(std::move(data));
  if (in.remaining() < 4 || in.bytes(4, "magic") != "HMCK")
    throw FormatError("bad checkpoint magic (expected HMCK)", 0);
  const auto version = in.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  const std::uint64_t lo = in.u32("header length");
  const std::uint64_t hi = in.u32("header length");
  const std::uint64_t len = lo | (hi << 32);
  const auto header_at = in.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.bytes(len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not JSON: ") + e.what(), header_at);
  }
  RawCheckpoint raw;
  try {
    raw.meta.model_kind = header.at("model").get<std::string>();
    raw.meta.config = header.at("config");
    raw.meta.iteration = header.at("iteration").get<std::int64_t>();
    raw.meta.val_auroc = header.at("val_auroc").get<double>();
    raw.meta.seed = header.at("seed").get<std::uint64_t>();
    raw.meta.extra = header.value("extra", nlohmann::json::object());
    const auto payload_start = in.offset();
    std::uint64_t consumed = 0;
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("shape").at(0).get<Eigen::Index>();
      const auto cols = t.at("shape").at(1).get<Eigen::Index>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      if (offset != consumed)
        throw FormatError("tensor '" + t.at("name").get<std::string>() + "' is not contiguous",
                          payload_start + offset);
      Mat<float> m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = std::bit_cast<float>(in.u32("tensor data"));
      consumed += static_cast<std::uint64_t>(m.size()) * 4;
      raw.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint header: ") + e.what(), header_at);
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes in checkpoint", in.offset());
  return raw;
}

inline RawCheckpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

// Copies named tensors from a checkpoint into already-shaped params.
template <class Params>
void load_tensors(Params& params, const RawCheckpoint& raw) {
  auto tensors = params.tensors();
  if (tensors.size() != raw.tensors.size())
    throw ValidationError("checkpoint holds " + std::to_string(raw.tensors.size()) +
                          " tensors but the model has " + std::to_string(tensors.size()));
  for (auto& t : tensors) {
    auto it = raw.tensors.find(t.name);
    if (it == raw.tensors.end())
      throw ValidationError("checkpoint is missing tensor '" + t.name + "'");
    if (it->second.rows() != t.value->rows() || it->second.cols() != t.value->cols())
      throw DimensionError("checkpoint tensor '" + t.name + "' has the wrong shape");
    *t.value = it->second.template cast<typename std::decay_t<decltype(*t.value)>::Scalar>();
  }
}

}  // namespace histomil
