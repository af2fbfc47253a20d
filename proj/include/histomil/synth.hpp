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
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "histomil/features.hpp"
#include "histomil/rng.hpp"
#include "histomil/train.hpp"

namespace histomil {

// Synthetic MIL task: background instances ~ N(0, sigma^2 I); a positive
// bag additionally holds witness instances whose mean is shifted by
// shift * sigma in every coordinate along a seeded sign pattern.
struct SynthConfig {
  int dim = 768;
  int min_bag = 30;
  int max_bag = 200;
  int min_witness = 1;
  int max_witness = 5;
  double shift = 1.5;
  double sigma = 1.0;
  double prevalence = 0.15;
  // Shared by every split drawn from the same task.
  std::uint64_t direction_seed = 1;
};

struct SynthBag {
  EmbeddingBag bag;
  bool positive = false;
  std::vector<bool> witness;  // per instance
};

inline Eigen::VectorXf witness_direction(const SynthConfig& cfg) {
  Rng rng(cfg.direction_seed * 0x2545f4914f6cdd1dULL + 17);
  Eigen::VectorXf s(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i) s(i) = rng.uniform() < 0.5 ? -1.0f : 1.0f;
  return s;
}

// count bags with exactly round(count * prevalence) positives in random order.
inline std::vector<SynthBag> generate_synthetic_bags(int count, std::uint64_t seed,
                                                     const SynthConfig& cfg = {},
                                                     const std::string& prefix = "synth") {
  Rng rng(seed);
  const Eigen::VectorXf shift = witness_direction(cfg) * static_cast<float>(cfg.shift * cfg.sigma);
  const auto n_pos = static_cast<int>(std::llround(count * cfg.prevalence));
  std::vector<bool> positive(static_cast<std::size_t>(count), false);
  for (int i = 0; i < n_pos; ++i) positive[static_cast<std::size_t>(i)] = true;
  rng.shuffle(positive);

  std::vector<SynthBag> out(static_cast<std::size_t>(count));
  for (int b = 0; b < count; ++b) {
    SynthBag& sb = out[static_cast<std::size_t>(b)];
    const int n = static_cast<int>(rng.uniform_int(cfg.min_bag, cfg.max_bag));
    sb.positive = positive[static_cast<std::size_t>(b)];
    sb.bag.slide_id = prefix + "_" + std::to_string(b);
    sb.bag.patient_id = prefix + "_patient_" + std::to_string(b);
    sb.bag.embeddings.resize(n, cfg.dim);
    for (Eigen::Index i = 0; i < sb.bag.embeddings.size(); ++i)
      sb.bag.embeddings.data()[i] = static_cast<float>(rng.normal(0.0, cfg.sigma));
    sb.witness.assign(static_cast<std::size_t>(n), false);
    if (sb.positive) {
      const int k = static_cast<int>(rng.uniform_int(cfg.min_witness, std::min(cfg.max_witness, n)));
      std::vector<int> idx(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
      rng.shuffle(idx);
      for (int w = 0; w < k; ++w) {
        const int i = idx[static_cast<std::size_t>(w)];
        sb.witness[static_cast<std::size_t>(i)] = true;
        sb.bag.embeddings.row(i) += shift.transpose();
      }
    }
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    sb.bag.coords.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      sb.bag.coords[static_cast<std::size_t>(i)] = {static_cast<std::uint32_t>(i % cols),
                                                    static_cast<std::uint32_t>(i / cols)};
  }
  return out;
}

template <class T>
std::vector<TrainingBag<T>> to_training_bags(const std::vector<SynthBag>& bags) {
  std::vector<TrainingBag<T>> out;
  out.reserve(bags.size());
  for (const auto& b : bags) out.push_back(make_training_bag<T>(b.bag, {TargetValue(b.positive)}));
  return out;
}

// Manifest view of synthetic bags: one patient per bag, feature files named
// <slide_id>.emb, a single binary target.
inline DatasetManifest synthetic_manifest(const std::vector<SynthBag>& bags,
                                          const std::string& target = "LABEL") {
  DatasetManifest m;
  m.target_names = {target};
  for (const auto& b : bags)
    m.rows.push_back({b.bag.patient_id, b.bag.slide_id + ".emb", {TargetValue(b.positive)}});
  return m;
}

inline std::vector<EmbeddingBag> embedding_bags(const std::vector<SynthBag>& bags) {
  std::vector<EmbeddingBag> out;
  out.reserve(bags.size());
  for (const auto& b : bags) out.push_back(b.bag);
  return out;
}

}  // namespace histomil
