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

#include <fstream>

#include "test_util.hpp"

using namespace histomil;
using histomil::testing::scratch_dir;

namespace {

double mean_abs_diff(const Tile& a, const Tile& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i)
    s += std::abs(static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]));
  return s / static_cast<double>(a.pixels.size());
}

double best_cosine(const Eigen::Vector3d& v, const Eigen::Matrix<double, 3, 2>& m) {
  return std::max(std::abs(v.dot(m.col(0).normalized())), std::abs(v.dot(m.col(1).normalized())));
}

Eigen::Matrix<double, 3, 2> custom_stains() {
  Eigen::Matrix<double, 3, 2> s;
  s << 0.55, 0.20,
       0.75, 0.85,
       0.36, 0.49;
  s.col(0).normalize();
  s.col(1).normalize();
  return s;
}

}  // namespace

TEST(OpticalDensity, AnalyticValues) {
  EXPECT_DOUBLE_EQ(od_from_intensity(255), 0.0);
  EXPECT_NEAR(od_from_intensity(127), std::log10(2.0), 1e-15);
  EXPECT_NEAR(od_from_intensity(0), std::log10(256.0), 1e-15);
}

TEST(OpticalDensity, MonotoneAndInvertibleOnIntegers) {
  for (int i = 0; i < 256; ++i) {
    EXPECT_GE(od_from_intensity(i), 0.0);
    if (i > 0) EXPECT_LT(od_from_intensity(i), od_from_intensity(i - 1));
    EXPECT_EQ(intensity_from_od(od_from_intensity(i)), i);
  }
}

TEST(OpticalDensity, TileConversionLayout) {
  Tile t(2, 255);
  t.at(1, 0, 2) = 127;
  const ODImage od = rgb_to_od(t);
  ASSERT_EQ(od.values.rows(), 4);
  EXPECT_NEAR(od.values(1, 2), std::log10(2.0), 1e-15);
  EXPECT_EQ(od.values(1, 0), 0.0);
}

TEST(Estimate, RecoversKnownStainVectors) {
  const auto stains = custom_stains();
  Rng rng(3);
  const int size = 96;
  Eigen::Matrix<double, Eigen::Dynamic, 2> conc(size * size, 2);
  for (Eigen::Index i = 0; i < conc.rows(); ++i) {
    conc(i, 0) = rng.uniform(0.1, 1.2);
    conc(i, 1) = rng.uniform(0.1, 1.2);
  }
  const StainProfile p = estimate_stain_profile(rgb_to_od(compose_stained_tile(size, stains, conc)));
  EXPECT_GE(best_cosine(stains.col(0), p.stain_matrix), 0.99);
  EXPECT_GE(best_cosine(stains.col(1), p.stain_matrix), 0.99);
  // Larger red component is the hematoxylin column.
  EXPECT_GE(p.stain_matrix(0, 0), p.stain_matrix(0, 1));
}

TEST(Estimate, ConstantImageFails) {
  EXPECT_THROW(estimate_stain_profile(rgb_to_od(Tile(64, 90))), StainEstimationFailed);
}

TEST(Estimate, NearWhiteImageFails) {
  Rng rng(4);
  Tile t(64);
  for (auto& p : t.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(235, 255));
  EXPECT_THROW(estimate_stain_profile(rgb_to_od(t)), StainEstimationFailed);
}

TEST(Estimate, ProfileInvariants) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const StainProfile p = estimate_stain_profile(rgb_to_od(synthetic_he_template(128, seed)));
    for (int c = 0; c < 2; ++c) {
      EXPECT_NEAR(p.stain_matrix.col(c).norm(), 1.0, 1e-12);
      EXPECT_GE(p.stain_matrix.col(c).minCoeff(), 0.0);
      EXPECT_GT(p.max_concentrations(c), 0.0);
    }
  }
}

TEST(Estimate, InvariantToPixelPermutation) {
  const Tile t = synthetic_he_template(96, 5);
  Tile shuffled = t;
  std::vector<std::size_t> order(t.pixel_count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(6);
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size(); ++i)
    for (int c = 0; c < 3; ++c) shuffled.pixels[i * 3 + c] = t.pixels[order[i] * 3 + c];
  const StainProfile a = estimate_stain_profile(rgb_to_od(t));
  const StainProfile b = estimate_stain_profile(rgb_to_od(shuffled));
  EXPECT_LT((a.stain_matrix - b.stain_matrix).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT((a.max_concentrations - b.max_concentrations).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Normalize, TemplateAgainstOwnProfileIsNearIdentity) {
  const Tile t = synthetic_he_template();
  const auto out = normalize_tile(t, default_reference_profile());
  ASSERT_TRUE(out.normalized);
  EXPECT_LE(mean_abs_diff(t, out.tile), 3.0);
}

TEST(Normalize, WhiteTilePassesThrough) {
  const Tile t(64, 255);
  const auto out = normalize_tile(t, default_reference_profile());
  EXPECT_FALSE(out.normalized);
  EXPECT_EQ(out.tile.pixels, t.pixels);
}

TEST(Normalize, ConstantTilePassesThrough) {
  const Tile t(64, 120);
  const auto out = normalize_tile(t, default_reference_profile());
  EXPECT_FALSE(out.normalized);
  EXPECT_EQ(out.tile.pixels, t.pixels);
}

TEST(Normalize, DoubledConcentrationsMapToSameResult) {
  const auto stains = custom_stains();
  const auto conc = synthetic_he_concentrations(256, 21);
  const Tile base = compose_stained_tile(256, stains, 0.5 * conc);
  const Tile doubled = compose_stained_tile(256, stains, conc);
  const auto ref = default_reference_profile();
  const auto a = normalize_tile(base, ref);
  const auto b = normalize_tile(doubled, ref);
  ASSERT_TRUE(a.normalized && b.normalized);
  EXPECT_LE(mean_abs_diff(a.tile, b.tile), 3.0);
}

TEST(Normalize, ApproximatelyIdempotent) {
  const auto ref = default_reference_profile();
  const Tile src = compose_stained_tile(256, custom_stains(), synthetic_he_concentrations(256, 8));
  const auto once = normalize_tile(src, ref);
  const auto twice = normalize_tile(once.tile, ref);
  ASSERT_TRUE(once.normalized && twice.normalized);
  EXPECT_LE(mean_abs_diff(once.tile, twice.tile), 3.0);
}

TEST(Normalize, PerSlideProfileMatchesPerTileOnSameTile) {
  const auto ref = default_reference_profile();
  const Tile src = compose_stained_tile(128, custom_stains(), synthetic_he_concentrations(128, 9));
  const StainProfile own = estimate_stain_profile(rgb_to_od(src));
  EXPECT_EQ(apply_stain_normalization(src, own, ref).pixels, normalize_tile(src, ref).tile.pixels);
}

TEST(ProfileJson, RoundTripAndValidation) {
  const auto dir = scratch_dir();
  const StainProfile p = default_reference_profile();
  save_profile((dir / "p.json").string(), p);
  const StainProfile q = load_profile((dir / "p.json").string());
  EXPECT_LT((p.stain_matrix - q.stain_matrix).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((p.max_concentrations - q.max_concentrations).cwiseAbs().maxCoeff(), 1e-12);

  nlohmann::json flat = profile_to_json(p);
  nlohmann::json rows = flat["stain_matrix"];
  flat["stain_matrix"] = nlohmann::json::array();
  for (const auto& r : rows)
    for (const auto& v : r) flat["stain_matrix"].push_back(v);
  EXPECT_NO_THROW(profile_from_json(flat));

  nlohmann::json bad = profile_to_json(p);
  bad["max_concentrations"] = {1.0, -1.0};
  EXPECT_THROW(profile_from_json(bad), ParseError);
  bad = profile_to_json(p);
  bad["stain_matrix"][0][0] = 5.0;
  EXPECT_THROW(profile_from_json(bad), ParseError);
  EXPECT_THROW(profile_from_json(nlohmann::json::object()), ParseError);
  std::ofstream((dir / "broken.json").string()) << "{not json";
  EXPECT_THROW(load_profile((dir / "broken.json").string()), ParseError);
}
