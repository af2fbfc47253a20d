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

#include <algorithm>
#include <set>

#include "test_util.hpp"

#ifdef HISTOMIL_HAVE_OPENCV
#include <opencv2/imgproc.hpp>
#endif

using namespace histomil;
using histomil::testing::noise_tile;
using histomil::testing::scratch_dir;

namespace {

RasterImage patterned_image(int w, int h, double mpp, std::uint64_t seed) {
  Rng rng(seed);
  RasterImage img(w, h, mpp);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
  return img;
}

Tile step_tile(int size) {
  Tile t(size);
  for (int y = 0; y < size; ++y)
    for (int x = size / 2; x < size; ++x)
      for (int c = 0; c < 3; ++c) t.at(x, y, c) = 255;
  return t;
}

Tile checkerboard(int size, int cell) {
  Tile t(size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool dark = ((x / cell) + (y / cell)) % 2 == 0;
      for (int c = 0; c < 3; ++c) t.at(x, y, c) = dark ? 40 : 200;
    }
  return t;
}

Tile blurred(const Tile& t, double sigma) {
  Tile out = t;
  std::vector<double> ch(t.pixel_count());
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < ch.size(); ++i) ch[i] = t.pixels[i * 3 + c];
    const auto b = detail::blur(ch, t.size, t.size, sigma);
    for (std::size_t i = 0; i < ch.size(); ++i)
      out.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(b[i]), 0L, 255L));
  }
  return out;
}

Tile box_filtered(const Tile& t, int k) {
  Tile out = t;
  const int r = k / 2;
  for (int y = 0; y < t.size; ++y)
    for (int x = 0; x < t.size; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int dy = -r; dy <= r; ++dy)
          for (int dx = -r; dx <= r; ++dx)
            s += t.at(std::clamp(x + dx, 0, t.size - 1), std::clamp(y + dy, 0, t.size - 1), c);
        out.at(x, y, c) = static_cast<std::uint8_t>(std::lround(s / (k * k)));
      }
  return out;
}

}  // namespace

TEST(Tessellate, ExactPartitionAtNativeResolution) {
  const auto grid = tessellate(patterned_image(1024, 1024, 0.5, 1), 0.5, 512);
  EXPECT_EQ(grid.grid_cols, 2);
  EXPECT_EQ(grid.grid_rows, 2);
  EXPECT_EQ(grid.tiles.size(), 4u);
}

TEST(Tessellate, DownscalesByResolutionFactor) {
  const auto grid = tessellate(patterned_image(1024, 1024, 0.25, 2), 0.5, 512);
  EXPECT_EQ(grid.tiles.size(), 1u);
  EXPECT_EQ(grid.tiles[0].size, 512);
}

TEST(Tessellate, DropsEdgeRemainders) {
  const auto grid = tessellate(patterned_image(1300, 700, 0.5, 3), 0.5, 512);
  EXPECT_EQ(grid.grid_cols, 2);
  EXPECT_EQ(grid.grid_rows, 1);
  EXPECT_EQ(grid.tiles.size(), 2u);
}

TEST(Tessellate, TooSmallImageThrows) {
  EXPECT_THROW(tessellate(patterned_image(300, 300, 0.5, 4), 0.5, 512), EmptyGridError);
  EXPECT_THROW(tessellate(patterned_image(600, 600, 0.25, 4), 0.5, 512), EmptyGridError);
}

TEST(Tessellate, RejectsInvalidArguments) {
  const auto img = patterned_image(64, 64, 0.5, 5);
  EXPECT_THROW(tessellate(img, 0.0, 32), ValidationError);
  EXPECT_THROW(tessellate(img, 0.5, 8), ValidationError);
}

TEST(Tessellate, PartitionCoversEveryPixelOnce) {
  const auto img = patterned_image(160, 96, 0.5, 6);
  const auto grid = tessellate(img, 0.5, 32);
  ASSERT_EQ(grid.tiles.size(), 15u);
  std::set<std::pair<int, int>> positions;
  for (std::size_t i = 0; i < grid.tiles.size(); ++i) {
    const Tile& t = grid.tiles[i];
    EXPECT_EQ(static_cast<std::size_t>(t.grid_y * grid.grid_cols + t.grid_x), i);
    EXPECT_TRUE(positions.insert({t.grid_x, t.grid_y}).second);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c)
          ASSERT_EQ(t.at(x, y, c), img.at(t.grid_x * 32 + x, t.grid_y * 32 + y, c));
  }
}

TEST(Tessellate, TileCountMatchesResampledFloor) {
  for (auto [w, h, mpp] : {std::tuple{700, 333, 0.3}, {1000, 1000, 0.75}, {257, 129, 0.5}}) {
    const auto grid = tessellate(patterned_image(w, h, mpp, 7), 0.5, 64);
    const int rw = static_cast<int>(std::floor(w * mpp / 0.5 + 1e-9));
    const int rh = static_cast<int>(std::floor(h * mpp / 0.5 + 1e-9));
    EXPECT_EQ(grid.tiles.size(), static_cast<std::size_t>((rw / 64) * (rh / 64)));
  }
}

TEST(Tessellate, Deterministic) {
  const auto img = patterned_image(300, 300, 0.4, 8);
  const auto a = tessellate(img, 0.5, 64);
  const auto b = tessellate(img, 0.5, 64);
  ASSERT_EQ(a.tiles.size(), b.tiles.size());
  for (std::size_t i = 0; i < a.tiles.size(); ++i) EXPECT_EQ(a.tiles[i].pixels, b.tiles[i].pixels);
}

TEST(Resample, BilinearMidpointsOfTwoPixelRamp) {
  RasterImage src(2, 1, 1.0);
  for (int c = 0; c < 3; ++c) {
    src.at(0, 0, c) = 0;
    src.at(1, 0, c) = 200;
  }
  const auto out = resample_bilinear(src, 4, 1, 0.5);
  // Output centres sit at source x = -0.25, 0.25, 0.75, 1.25 (clamped).
  EXPECT_EQ(out.at(0, 0, 0), 0);
  EXPECT_EQ(out.at(1, 0, 0), 50);
  EXPECT_EQ(out.at(2, 0, 0), 150);
  EXPECT_EQ(out.at(3, 0, 0), 200);
}

TEST(BackgroundFraction, Examples) {
  EXPECT_DOUBLE_EQ(background_fraction(Tile(64, 255), 224), 1.0);
  EXPECT_DOUBLE_EQ(background_fraction(Tile(64, 0), 224), 0.0);
  Tile half(64, 128);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) half.at(x, y, c) = 255;
  EXPECT_DOUBLE_EQ(background_fraction(half, 224), 0.5);
}

TEST(BackgroundFraction, RequiresAllThreeChannels) {
  Tile t(16, 255);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 8; ++x) t.at(x, y, 2) = 100;
  EXPECT_DOUBLE_EQ(background_fraction(t, 224), 0.5);
}

TEST(BackgroundFraction, MonotoneInThreshold) {
  const Tile t = noise_tile(64, 11);
  double prev = 2.0;
  for (int thr = 0; thr <= 255; ++thr) {
    const double f = background_fraction(t, thr);
    EXPECT_LE(f, prev);
    prev = f;
  }
}

TEST(BackgroundFraction, RotationInvariantMultiset) {
  const auto img = patterned_image(128, 96, 0.5, 12);
  RasterImage rot(img.width, img.height, img.mpp);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        rot.at(img.width - 1 - x, img.height - 1 - y, c) = img.at(x, y, c);
  std::multiset<double> a, b;
  for (const auto& t : tessellate(img, 0.5, 32).tiles) a.insert(background_fraction(t, 128));
  for (const auto& t : tessellate(rot, 0.5, 32).tiles) b.insert(background_fraction(t, 128));
  EXPECT_EQ(a, b);
}

TEST(Canny, ConstantTileHasNoEdges) {
  EXPECT_DOUBLE_EQ(canny_edge_fraction(Tile(128, 77), 1.4, 40, 100), 0.0);
}

TEST(Canny, VerticalStepMarksOneColumn) {
  const Tile t = step_tile(512);
  const double f = canny_edge_fraction(t, 1.4, 40, 100);
  EXPECT_GE(f, 0.0 / 512);
  EXPECT_LE(f, 2.0 / 512);
  EXPECT_GT(f, 0.9 / 512);
  const auto edges = canny_edges(t, 1.4, 40, 100);
  std::set<int> cols;
  for (int y = 0; y < 512; ++y)
    for (int x = 0; x < 512; ++x)
      if (edges[static_cast<std::size_t>(y) * 512 + x]) cols.insert(x);
  ASSERT_EQ(cols.size(), 1u);
  EXPECT_NEAR(*cols.begin(), 255.5, 1.0);
}

#ifdef HISTOMIL_HAVE_OPENCV
TEST(Canny, StepFractionAgreesWithOpenCvWithinOneColumn) {
  const Tile t = step_tile(512);
  cv::Mat gray(512, 512, CV_8UC1);
  for (int y = 0; y < 512; ++y)
    for (int x = 0; x < 512; ++x)
      gray.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(
          0.299 * t.at(x, y, 0) + 0.587 * t.at(x, y, 1) + 0.114 * t.at(x, y, 2)));
  cv::Mat smooth, edges;
  cv::GaussianBlur(gray, smooth, cv::Size(0, 0), 1.4, 1.4, cv::BORDER_REPLICATE);
  cv::Canny(smooth, edges, 40, 100, 3, true);
  const double reference = cv::countNonZero(edges) / (512.0 * 512.0);
  EXPECT_NEAR(canny_edge_fraction(t, 1.4, 40, 100), reference, 1.0 / 512);
}
#endif

TEST(Canny, NoiseHasMoreEdgesThanBoxBlurredNoise) {
  const Tile noise = noise_tile(128, 13);
  EXPECT_GT(canny_edge_fraction(noise, 1.4, 40, 100),
            canny_edge_fraction(box_filtered(noise, 9), 1.4, 40, 100));
}

TEST(Canny, RejectsBadThresholds) {
  const Tile t(32, 0);
  EXPECT_THROW(canny_edge_fraction(t, 1.4, 50, 10), ValidationError);
  EXPECT_THROW(canny_edge_fraction(t, 1.4, -1, 10), ValidationError);
  EXPECT_NO_THROW(canny_edge_fraction(t, 1.4, 10, 10));
}

TEST(Informative, WhiteTileRejected) { EXPECT_FALSE(is_informative(Tile(128, 255), {})); }

TEST(Informative, TextureAcceptedBlurredTextureRejected) {
  const Tile board = checkerboard(256, 8);
  EXPECT_LE(background_fraction(board, 224), 0.9);
  EXPECT_GE(canny_edge_fraction(board, 1.4, 40, 100), 0.02);
  EXPECT_TRUE(is_informative(board, {}));
  const Tile soft = blurred(board, 8.0);
  EXPECT_LT(canny_edge_fraction(soft, 1.4, 40, 100), 0.02);
  EXPECT_FALSE(is_informative(soft, {}));
}

TEST(Informative, FilterTilesMatchesSerialDecision) {
  TileGrid grid;
  grid.tiles = {Tile(64, 255), checkerboard(64, 4), noise_tile(64, 3), Tile(64, 10)};
  filter_tiles(grid, {});
  for (const auto& t : grid.tiles) EXPECT_EQ(t.informative, is_informative(t, {}));
  EXPECT_FALSE(grid.tiles[0].informative);
  EXPECT_TRUE(grid.tiles[1].informative);
}

TEST(Png, RoundTrip) {
  const auto dir = scratch_dir();
  const auto img = patterned_image(37, 23, 0.5, 9);
  write_png((dir / "a.png").string(), img);
  const auto back = read_png((dir / "a.png").string(), 0.25);
  EXPECT_EQ(back.width, 37);
  EXPECT_EQ(back.height, 23);
  EXPECT_DOUBLE_EQ(back.mpp, 0.25);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(read_tile_png((dir / "a.png").string()), DimensionError);
  EXPECT_THROW(read_png((dir / "missing.png").string()), ValidationError);
}
