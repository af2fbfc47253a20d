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
#include <fstream>
#include <string>
#include <vector>

#include "histomil/imaging.hpp"
#include "histomil/metrics.hpp"

namespace histomil {

namespace detail {

inline void plot_pixel(RasterImage& img, int x, int y, std::array<std::uint8_t, 3> c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  for (int k = 0; k < 3; ++k) img.at(x, y, k) = c[static_cast<std::size_t>(k)];
}

inline void plot_line(RasterImage& img, int x0, int y0, int x1, int y1,
                      std::array<std::uint8_t, 3> c, int thickness = 1) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    for (int ty = 0; ty < thickness; ++ty)
      for (int tx = 0; tx < thickness; ++tx) plot_pixel(img, x0 + tx, y0 + ty, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

// Unit-square curve plot: axes frame, optional chance diagonal, and the
// curve as a polyline. Pure raster, no text.
inline RasterImage plot_curve(const std::vector<CurvePoint>& pts, bool diagonal, int size = 400) {
  RasterImage img(size, size, 0.0, 255);
  const int margin = size / 10;
  const int span = size - 2 * margin;
  auto px = [&](double x) { return margin + static_cast<int>(std::lround(x * span)); };
  auto py = [&](double y) { return size - margin - static_cast<int>(std::lround(y * span)); };
  const std::array<std::uint8_t, 3> black{0, 0, 0}, gray{170, 170, 170}, red{200, 30, 30};
  detail::plot_line(img, px(0), py(0), px(1), py(0), black);
  detail::plot_line(img, px(0), py(0), px(0), py(1), black);
  detail::plot_line(img, px(1), py(0), px(1), py(1), black);
  detail::plot_line(img, px(0), py(1), px(1), py(1), black);
  if (diagonal) detail::plot_line(img, px(0), py(0), px(1), py(1), gray);
  for (std::size_t i = 1; i < pts.size(); ++i)
    detail::plot_line(img, px(pts[i - 1].x), py(pts[i - 1].y), px(pts[i].x), py(pts[i].y), red, 2);
  return img;
}

inline void write_curve_csv(const std::string& path, const std::vector<CurvePoint>& pts,
                            const std::string& x_name, const std::string& y_name) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out.precision(17);
  out << x_name << ',' << y_name << '\n';
  for (const auto& p : pts) out << p.x << ',' << p.y << '\n';
}

}  // namespace histomil
