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
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/imaging.hpp"
#include "histomil/model/transformer.hpp"
#include "histomil/parallel.hpp"
#include "histomil/quantile.hpp"

namespace histomil {

namespace detail {

inline void require_class_token_trace(const AttentionTrace& trace, int target) {
  if (trace.aggregation != Aggregation::class_token || trace.num_class_tokens == 0)
    throw UnsupportedAggregation("explanations need a class-token model trace");
  if (target < 0 || target >= trace.num_class_tokens)
    throw ValidationError("explain: target index out of range");
  if (trace.attention.empty()) throw ValidationError("explain: empty attention trace");
}

}  // namespace detail

// Head-averaged, residual-mixed (0.5 A + 0.5 I), row-renormalized attention
// of one layer.
inline Eigen::MatrixXd rollout_layer_matrix(const std::vector<Mat<double>>& heads) {
  Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(heads.front().rows(), heads.front().cols());
  for (const auto& h : heads) avg += h;
  avg /= static_cast<double>(heads.size());
  Eigen::MatrixXd mixed = 0.5 * avg + 0.5 * Eigen::MatrixXd::Identity(avg.rows(), avg.cols());
  for (Eigen::Index r = 0; r < mixed.rows(); ++r) mixed.row(r) /= mixed.row(r).sum();
  return mixed;
}

// R = A'_L ... A'_1 over all layers.
inline Eigen::MatrixXd rollout_matrix(const AttentionTrace& trace) {
  Eigen::MatrixXd r = rollout_layer_matrix(trace.attention.front());
  for (std::size_t l = 1; l < trace.attention.size(); ++l)
    r = rollout_layer_matrix(trace.attention[l]) * r;
  return r;
}

struct RolloutResult {
  std::vector<double> scores;  // one per patch
  // The class token's rolled-out attention puts no mass on any patch.
  bool degenerate = false;
};

inline RolloutResult attention_rollout(const AttentionTrace& trace, int target = 0) {
  detail::require_class_token_trace(trace, target);
  const Eigen::MatrixXd r = rollout_matrix(trace);
  RolloutResult out;
  const int t = trace.num_class_tokens;
  out.scores.resize(static_cast<std::size_t>(trace.num_patches));
  double mass = 0;
  for (int i = 0; i < trace.num_patches; ++i) {
    out.scores[static_cast<std::size_t>(i)] = r(target, t + i);
    mass += r(target, t + i);
  }
  out.degenerate = mass < 1e-12;
  return out;
}

// Class-token attention row of every head in one layer (-1 = last),
// restricted to the patch columns.
inline std::vector<std::vector<double>> per_head_class_attention(const AttentionTrace& trace,
                                                                 int layer = -1, int target = 0) {
  detail::require_class_token_trace(trace, target);
  const int n_layers = static_cast<int>(trace.attention.size());
  if (layer < 0) layer += n_layers;
  if (layer < 0 || layer >= n_layers) throw ValidationError("explain: layer out of range");
  const int t = trace.num_class_tokens;
  std::vector<std::vector<double>> maps;
  for (const auto& head : trace.attention[static_cast<std::size_t>(layer)]) {
    std::vector<double> m(static_cast<std::size_t>(trace.num_patches));
    for (int i = 0; i < trace.num_patches; ++i) m[static_cast<std::size_t>(i)] = head(target, t + i);
    maps.push_back(std::move(m));
  }
  return maps;
}

// Each patch through the model on its own; sigmoid of the target logit.
template <class Model>
std::vector<double> per_patch_class_scores(const Model& model, const Mat<typename Model::Scalar>& x,
                                           int target = 0) {
  std::vector<double> scores(static_cast<std::size_t>(x.rows()));
  parallel_for(scores.size(), [&](std::size_t i) {
    const Mat<typename Model::Scalar> single = x.row(static_cast<Eigen::Index>(i));
    scores[i] = sigmoid(static_cast<double>(model.logits(single)(target)));
  });
  return scores;
}

// Clamp to the [lower, upper] quantiles, then min-max scale to [0, 1].
// A zero span maps everything to 0.5.
inline std::vector<double> quantile_clamp_normalize(const std::vector<double>& scores,
                                                    double lower = 0.05, double upper = 0.95) {
  if (scores.empty()) throw ValidationError("quantile_clamp_normalize: empty input");
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  const double lo = quantile_sorted(sorted, lower);
  const double hi = quantile_sorted(sorted, upper);
  std::vector<double> out(scores.size());
  const double span = hi - lo;
  for (std::size_t i = 0; i < scores.size(); ++i)
    out[i] = span > 0 ? (std::clamp(scores[i], lo, hi) - lo) / span : 0.5;
  return out;
}

enum class HeatmapMode { attention, class_score };

using Rgb = std::array<std::uint8_t, 3>;

// attention: blue -> red; class_score: blue -> white (0.5) -> red.
inline Rgb heat_color(double v, HeatmapMode mode) {
  v = std::clamp(v, 0.0, 1.0);
  auto lerp = [](double a, double b, double t) {
    return static_cast<std::uint8_t>(std::lround(a + (b - a) * t));
  };
  if (mode == HeatmapMode::attention) return {lerp(0, 255, v), 0, lerp(255, 0, v)};
  if (v < 0.5) {
    const double t = v / 0.5;
    return {lerp(0, 255, t), lerp(0, 255, t), 255};
  }
  const double t = (v - 0.5) / 0.5;
  return {255, lerp(255, 0, t), lerp(255, 0, t)};
}

// Placement of the scored tiles on the slide grid.
struct HeatmapLayout {
  int cols = 0;
  int rows = 0;
  std::vector<std::array<int, 2>> positions;  // (grid_x, grid_y) per score
};

inline HeatmapLayout layout_from_grid(const TileGrid& grid, bool kept_only = true) {
  HeatmapLayout l{grid.grid_cols, grid.grid_rows, {}};
  for (const auto& t : grid.tiles)
    if (!kept_only || t.informative) l.positions.push_back({t.grid_x, t.grid_y});
  return l;
}

inline HeatmapLayout layout_from_coords(const std::vector<std::array<std::uint32_t, 2>>& coords) {
  HeatmapLayout l;
  for (const auto& c : coords) {
    l.positions.push_back({static_cast<int>(c[0]), static_cast<int>(c[1])});
    l.cols = std::max(l.cols, static_cast<int>(c[0]) + 1);
    l.rows = std::max(l.rows, static_cast<int>(c[1]) + 1);
  }
  return l;
}

// One solid cell_px square per scored tile over a gray background (or a
// grayscale version of the thumbnail when given).
inline RasterImage render_heatmap(const HeatmapLayout& layout, const std::vector<double>& scores,
                                  HeatmapMode mode, int cell_px = 8,
                                  const RasterImage* thumbnail = nullptr) {
  if (scores.size() != layout.positions.size())
    throw DimensionError("render_heatmap: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(layout.positions.size()) + " tiles");
  if (cell_px < 1) throw ValidationError("render_heatmap: cell_px must be >= 1");
  RasterImage img(layout.cols * cell_px, layout.rows * cell_px, 0.0, 128);
  if (thumbnail && thumbnail->width > 0) {
    const RasterImage scaled = resample_bilinear(*thumbnail, img.width, img.height, 0.0);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double g = 0.299 * scaled.at(x, y, 0) + 0.587 * scaled.at(x, y, 1) +
                         0.114 * scaled.at(x, y, 2);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(g));
      }
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto [gx, gy] = layout.positions[i];
    if (gx < 0 || gy < 0 || gx >= layout.cols || gy >= layout.rows)
      throw DimensionError("render_heatmap: tile position outside the grid");
    const Rgb color = heat_color(scores[i], mode);
    for (int y = gy * cell_px; y < (gy + 1) * cell_px; ++y)
      for (int x = gx * cell_px; x < (gx + 1) * cell_px; ++x)
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = color[static_cast<std::size_t>(c)];
  }
  return img;
}

}  // namespace histomil
