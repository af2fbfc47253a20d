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

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/parallel.hpp"

namespace histomil {

// 8-bit interleaved RGB raster with its scan resolution.
struct RasterImage {
  int width = 0;
  int height = 0;
  double mpp = 0.5;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  RasterImage() = default;
  RasterImage(int w, int h, double microns_per_pixel, std::uint8_t fill = 0)
      : width(w),
        height(h),
        mpp(microns_per_pixel),
        pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

// Square RGB patch cut from a slide at a fixed grid position.
struct Tile {
  int size = 0;
  int grid_x = 0;
  int grid_y = 0;
  bool informative = true;
  std::vector<std::uint8_t> pixels;  // size * size * 3

  Tile() = default;
  explicit Tile(int px, std::uint8_t fill = 0)
      : size(px), pixels(static_cast<std::size_t>(px) * px * 3, fill) {}

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(size) * size;
  }
  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c];
  }
};

struct TileGrid {
  std::string slide_id;
  std::vector<Tile> tiles;  // row-major by (grid_y, grid_x)
  int grid_cols = 0;
  int grid_rows = 0;
  double source_mpp = 0.0;
  double target_mpp = 0.0;
};

struct FilterParams {
  int white_threshold = 224;
  double max_background = 0.9;
  double sigma = 1.4;
  double low = 40.0;
  double high = 100.0;
  double min_edge_fraction = 0.02;
};

// Bilinear resampling with pixel-centre alignment and clamped borders.
inline RasterImage resample_bilinear(const RasterImage& src, int out_w,
                                     int out_h, double out_mpp) {
  RasterImage out(out_w, out_h, out_mpp);
  if (out_w == src.width && out_h == src.height) {
    out.pixels = src.pixels;
    return out;
  }
  const double sx = static_cast<double>(src.width) / out_w;
  const double sy = static_cast<double>(src.height) / out_h;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * src.at(x0, y0, c) + wx * src.at(x1, y0, c);
        const double bot = (1 - wx) * src.at(x0, y1, c) + wx * src.at(x1, y1, c);
        const double v = (1 - wy) * top + wy * bot;
        out.at(x, y, c) =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

// Resamples the image from image.mpp to target_mpp and cuts it into
// non-overlapping tile_px squares. Partial tiles on the right and bottom
// edges are dropped. Tiles come back unfiltered (informative = true).
inline TileGrid tessellate(const RasterImage& image, double target_mpp,
                           int tile_px, const std::string& slide_id = "slide") {
  if (image.width < 1 || image.height < 1 || !(image.mpp > 0))
    throw ValidationError("tessellate: invalid raster image");
  if (!(target_mpp > 0)) throw ValidationError("tessellate: target_mpp must be > 0");
  if (tile_px < 16) throw ValidationError("tessellate: tile_px must be >= 16");

  const double factor = image.mpp / target_mpp;
  const int out_w = static_cast<int>(std::floor(image.width * factor + 1e-9));
  const int out_h = static_cast<int>(std::floor(image.height * factor + 1e-9));

  TileGrid grid;
  grid.slide_id = slide_id;
  grid.source_mpp = image.mpp;
  grid.target_mpp = target_mpp;
  grid.grid_cols = out_w / tile_px;
  grid.grid_rows = out_h / tile_px;
  if (grid.grid_cols == 0 || grid.grid_rows == 0)
    throw EmptyGridError("tessellate: resampled image " + std::to_string(out_w) +
                         "x" + std::to_string(out_h) +
                         " is smaller than one tile of " +
                         std::to_string(tile_px) + " px");

  const RasterImage scaled = resample_bilinear(image, out_w, out_h, target_mpp);
  grid.tiles.resize(static_cast<std::size_t>(grid.grid_cols) * grid.grid_rows);
  for (int gy = 0; gy < grid.grid_rows; ++gy) {
    for (int gx = 0; gx < grid.grid_cols; ++gx) {
      Tile& tile = grid.tiles[static_cast<std::size_t>(gy) * grid.grid_cols + gx];
      tile = Tile(tile_px);
      tile.grid_x = gx;
      tile.grid_y = gy;
      for (int y = 0; y < tile_px; ++y) {
        const auto* row = &scaled.pixels[(static_cast<std::size_t>(gy * tile_px + y) *
                                              scaled.width +
                                          static_cast<std::size_t>(gx) * tile_px) *
                                         3];
        std::copy(row, row + tile_px * 3,
                  tile.pixels.begin() + static_cast<std::ptrdiff_t>(y) * tile_px * 3);
      }
    }
  }
  return grid;
}

// Fraction of pixels whose three channels all exceed white_threshold.
inline double background_fraction(const Tile& tile, int white_threshold) {
  const std::size_t n = tile.pixel_count();
  if (n == 0) return 0.0;
  std::size_t white = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = &tile.pixels[i * 3];
    if (p[0] > white_threshold && p[1] > white_threshold && p[2] > white_threshold)
      ++white;
  }
  return static_cast<double>(white) / static_cast<double>(n);
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0)) return {1.0};
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable convolution with replicated borders.
inline std::vector<double> blur(const std::vector<double>& img, int w, int h,
                                double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i)
        s += k[i + r] * img[static_cast<std::size_t>(y) * w + std::clamp(x + i, 0, w - 1)];
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i)
        s += k[i + r] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, h - 1)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  return out;
}

inline std::vector<double> to_gray(const Tile& tile) {
  std::vector<double> g(tile.pixel_count());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto* p = &tile.pixels[i * 3];
    g[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  }
  return g;
}

}  // namespace detail

// Binary Canny edge map (1 = edge) of the tile.
inline std::vector<std::uint8_t> canny_edges(const Tile& tile, double sigma,
                                             double low, double high) {
  const int w = tile.size, h = tile.size;
  const auto idx = [w](int x, int y) { return static_cast<std::size_t>(y) * w + x; };
  const auto smooth = detail::blur(detail::to_gray(tile), w, h, sigma);
  const auto px = [&](int x, int y) {
    return smooth[idx(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1))];
  };

  std::vector<double> mag(smooth.size());
  std::vector<std::uint8_t> dir(smooth.size());  // 0:E-W 1:NE-SW 2:N-S 3:NW-SE
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gx = (px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)) -
                        (px(x - 1, y - 1) + 2 * px(x - 1, y) + px(x - 1, y + 1));
      const double gy = (px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)) -
                        (px(x - 1, y - 1) + 2 * px(x, y - 1) + px(x + 1, y - 1));
      mag[idx(x, y)] = std::hypot(gx, gy);
      double angle = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
      if (angle < 0) angle += 180.0;
      std::uint8_t d;
      if (angle < 22.5 || angle >= 157.5) d = 0;
      else if (angle < 67.5) d = 1;
      else if (angle < 112.5) d = 2;
      else d = 3;
      dir[idx(x, y)] = d;
    }

  // Non-maximum suppression; ties go to the left/upper neighbour.
  constexpr std::array<std::array<int, 2>, 4> step{{{1, 0}, {1, 1}, {0, 1}, {-1, 1}}};
  std::vector<std::uint8_t> state(smooth.size(), 0);  // 0 none, 1 weak, 2 strong
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      const double m = mag[idx(x, y)];
      if (!(m > low)) continue;
      const auto [dx, dy] = step[dir[idx(x, y)]];
      const double before = mag[idx(x - dx, y - dy)];
      const double after = mag[idx(x + dx, y + dy)];
      if (m > before && m >= after) state[idx(x, y)] = m > high ? 2 : 1;
    }

  // Hysteresis: weak pixels survive when 8-connected to a strong one.
  std::vector<std::uint8_t> edges(smooth.size(), 0);
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (state[idx(x, y)] == 2) {
        edges[idx(x, y)] = 1;
        queue.emplace_back(x, y);
      }
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int nx = x + dx, ny = y + dy;
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
        if (state[idx(nx, ny)] == 1 && !edges[idx(nx, ny)]) {
          edges[idx(nx, ny)] = 1;
          queue.emplace_back(nx, ny);
        }
      }
  }
  return edges;
}

inline double canny_edge_fraction(const Tile& tile, double sigma, double low,
                                  double high) {
  if (low < 0 || high < low)
    throw ValidationError("canny_edge_fraction: require 0 <= low <= high");
  if (tile.pixel_count() == 0) return 0.0;
  const auto edges = canny_edges(tile, sigma, low, high);
  std::size_t count = 0;
  for (auto e : edges) count += e;
  return static_cast<double>(count) / static_cast<double>(edges.size());
}

inline bool is_informative(const Tile& tile, const FilterParams& p) {
  if (background_fraction(tile, p.white_threshold) > p.max_background) return false;
  return canny_edge_fraction(tile, p.sigma, p.low, p.high) >= p.min_edge_fraction;
}

// Sets tile.informative on every tile of the grid.
inline void filter_tiles(TileGrid& grid, const FilterParams& p) {
  parallel_for(grid.tiles.size(), [&](std::size_t i) {
    grid.tiles[i].informative = is_informative(grid.tiles[i], p);
  });
}

}  // namespace histomil
