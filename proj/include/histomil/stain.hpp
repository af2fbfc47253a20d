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
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/imaging.hpp"
#include "histomil/quantile.hpp"
#include "histomil/rng.hpp"
#include "json.hpp"

namespace histomil {

// Per-pixel optical densities, one row per pixel in raster order.
struct ODImage {
  int width = 0;
  int height = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> values;
};

// Columns are the hematoxylin and eosin OD vectors (unit norm).
struct StainProfile {
  Eigen::Matrix<double, 3, 2> stain_matrix = Eigen::Matrix<double, 3, 2>::Zero();
  Eigen::Vector2d max_concentrations = Eigen::Vector2d::Zero();
};

struct MacenkoParams {
  double alpha_percentile = 1.0;
  double beta = 0.15;
};

inline double od_from_intensity(double intensity) {
  return -std::log10((intensity + 1.0) / 256.0);
}

inline std::uint8_t intensity_from_od(double od) {
  const double v = std::round(256.0 * std::pow(10.0, -od) - 1.0);
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

inline ODImage rgb_to_od(const Tile& tile) {
  ODImage od;
  od.width = od.height = tile.size;
  od.values.resize(static_cast<Eigen::Index>(tile.pixel_count()), 3);
  for (std::size_t i = 0; i < tile.pixel_count(); ++i)
    for (int c = 0; c < 3; ++c)
      od.values(static_cast<Eigen::Index>(i), c) = od_from_intensity(tile.pixels[i * 3 + c]);
  return od;
}

namespace detail {

// Least-squares concentrations for every pixel, negatives clamped to zero.
inline Eigen::Matrix<double, Eigen::Dynamic, 2> solve_concentrations(
    const ODImage& od, const Eigen::Matrix<double, 3, 2>& stains) {
  const Eigen::Matrix2d gram = stains.transpose() * stains;
  if (std::abs(gram.determinant()) < 1e-12)
    throw StainEstimationFailed("stain vectors are collinear");
  const Eigen::Matrix<double, 2, 3> pinv = gram.inverse() * stains.transpose();
  Eigen::Matrix<double, Eigen::Dynamic, 2> conc = od.values * pinv.transpose();
  return conc.cwiseMax(0.0);
}

inline double column_percentile(const Eigen::Matrix<double, Eigen::Dynamic, 2>& m,
                                int col, double pct) {
  std::vector<double> v(m.col(col).data(), m.col(col).data() + m.rows());
  return quantile(std::move(v), pct / 100.0);
}

}  // namespace detail

// Macenko estimation of the two stain vectors and their robust maxima.
inline StainProfile estimate_stain_profile(const ODImage& od,
                                           const MacenkoParams& p = {}) {
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(od.values.rows()));
  for (Eigen::Index i = 0; i < od.values.rows(); ++i)
    if (od.values.row(i).minCoeff() >= p.beta) keep.push_back(i);
  if (keep.size() < 50)
    throw StainEstimationFailed("only " + std::to_string(keep.size()) +
                                " pixels above the optical density threshold");

  Eigen::Matrix<double, Eigen::Dynamic, 3> tissue(static_cast<Eigen::Index>(keep.size()), 3);
  for (std::size_t k = 0; k < keep.size(); ++k)
    tissue.row(static_cast<Eigen::Index>(k)) = od.values.row(keep[k]);

  const Eigen::RowVector3d mean = tissue.colwise().mean();
  const Eigen::Matrix<double, Eigen::Dynamic, 3> centered = tissue.rowwise() - mean;
  const Eigen::Matrix3d cov =
      centered.transpose() * centered / static_cast<double>(tissue.rows() - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  if (eig.info() != Eigen::Success)
    throw StainEstimationFailed("eigen decomposition did not converge");
  const Eigen::Vector3d lambda = eig.eigenvalues();  // ascending
  if (!(lambda(2) > 1e-12) || !(lambda(1) > 1e-10 * lambda(2)))
    throw StainEstimationFailed("optical density covariance is rank deficient");

  Eigen::Matrix<double, 3, 2> plane;
  plane.col(0) = eig.eigenvectors().col(2);
  plane.col(1) = eig.eigenvectors().col(1);
  for (int c = 0; c < 2; ++c)
    if (plane(0, c) < 0) plane.col(c) *= -1.0;

  const Eigen::Matrix<double, Eigen::Dynamic, 2> projected = tissue * plane;
  std::vector<double> phi(static_cast<std::size_t>(projected.rows()));
  for (Eigen::Index i = 0; i < projected.rows(); ++i)
    phi[static_cast<std::size_t>(i)] = std::atan2(projected(i, 1), projected(i, 0));
  std::sort(phi.begin(), phi.end());
  const double phi_lo = quantile_sorted(phi, p.alpha_percentile / 100.0);
  const double phi_hi = quantile_sorted(phi, 1.0 - p.alpha_percentile / 100.0);

  auto unit_stain = [&](double angle) {
    Eigen::Vector3d v = plane * Eigen::Vector2d(std::cos(angle), std::sin(angle));
    if (v.sum() < 0) v = -v;
    v = v.cwiseMax(0.0);
    const double norm = v.norm();
    if (!(norm > 0)) throw StainEstimationFailed("degenerate stain vector");
    return Eigen::Vector3d(v / norm);
  };
  Eigen::Vector3d a = unit_stain(phi_lo);
  Eigen::Vector3d b = unit_stain(phi_hi);
  const bool a_is_h = a(0) > b(0) || (a(0) == b(0) && a(1) >= b(1));

  StainProfile profile;
  profile.stain_matrix.col(0) = a_is_h ? a : b;
  profile.stain_matrix.col(1) = a_is_h ? b : a;

  const auto conc = detail::solve_concentrations(od, profile.stain_matrix);
  for (int s = 0; s < 2; ++s)
    profile.max_concentrations(s) = detail::column_percentile(conc, s, 99.0);
  if (!(profile.max_concentrations.minCoeff() > 0))
    throw StainEstimationFailed("99th percentile stain concentration is zero");
  return profile;
}

struct NormalizedTile {
  Tile tile;
  bool normalized = false;
};

// Maps the tile's stain concentrations onto the reference profile using a
// known source profile (per-slide mode).
inline Tile apply_stain_normalization(const Tile& tile, const StainProfile& source,
                                      const StainProfile& reference) {
  const ODImage od = rgb_to_od(tile);
  Eigen::Matrix<double, Eigen::Dynamic, 2> conc =
      detail::solve_concentrations(od, source.stain_matrix);
  for (int s = 0; s < 2; ++s)
    conc.col(s) *= reference.max_concentrations(s) / source.max_concentrations(s);
  const Eigen::Matrix<double, Eigen::Dynamic, 3> out_od =
      conc * reference.stain_matrix.transpose();
  Tile out = tile;
  for (Eigen::Index i = 0; i < out_od.rows(); ++i)
    for (int c = 0; c < 3; ++c)
      out.pixels[static_cast<std::size_t>(i) * 3 + c] = intensity_from_od(out_od(i, c));
  return out;
}

// Per-tile Macenko normalization. Tiles whose own profile cannot be
// estimated are passed through unchanged with normalized = false.
inline NormalizedTile normalize_tile(const Tile& tile, const StainProfile& reference,
                                     const MacenkoParams& p = {}) {
  try {
    const StainProfile source = estimate_stain_profile(rgb_to_od(tile), p);
    return {apply_stain_normalization(tile, source, reference), true};
  } catch (const StainEstimationFailed&) {
    return {tile, false};
  }
}

inline nlohmann::json profile_to_json(const StainProfile& profile) {
  nlohmann::json j;
  j["stain_matrix"] = nlohmann::json::array();
  for (int r = 0; r < 3; ++r)
    j["stain_matrix"].push_back({profile.stain_matrix(r, 0), profile.stain_matrix(r, 1)});
  j["max_concentrations"] = {profile.max_concentrations(0), profile.max_concentrations(1)};
  return j;
}

inline StainProfile profile_from_json(const nlohmann::json& j) {
  StainProfile p;
  try {
    const auto& m = j.at("stain_matrix");
    if (m.size() == 6) {
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 2; ++c) p.stain_matrix(r, c) = m.at(r * 2 + c).get<double>();
    } else if (m.size() == 3) {
      for (int r = 0; r < 3; ++r) {
        if (m.at(r).size() != 2) throw ParseError("stain_matrix rows must have 2 entries");
        for (int c = 0; c < 2; ++c) p.stain_matrix(r, c) = m.at(r).at(c).get<double>();
      }
    } else {
      throw ParseError("stain_matrix must be 3x2");
    }
    const auto& mc = j.at("max_concentrations");
    if (mc.size() != 2) throw ParseError("max_concentrations must have 2 entries");
    p.max_concentrations << mc.at(0).get<double>(), mc.at(1).get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("stain profile: ") + e.what());
  }
  for (int c = 0; c < 2; ++c)
    if (std::abs(p.stain_matrix.col(c).norm() - 1.0) > 1e-6 ||
        p.stain_matrix.col(c).minCoeff() < 0)
      throw ParseError("stain profile: columns must be non-negative unit vectors");
  if (!(p.max_concentrations.minCoeff() > 0))
    throw ParseError("stain profile: max_concentrations must be positive");
  return p;
}

inline StainProfile load_profile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open stain profile '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("stain profile '" + path + "': " + e.what());
  }
  return profile_from_json(j);
}

inline void save_profile(const std::string& path, const StainProfile& profile) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write stain profile '" + path + "'");
  out << profile_to_json(profile).dump(2) << '\n';
}

// Renders a tile from a stain matrix and per-pixel concentrations (n x 2).
inline Tile compose_stained_tile(int size, const Eigen::Matrix<double, 3, 2>& stains,
                                 const Eigen::Matrix<double, Eigen::Dynamic, 2>& conc) {
  Tile tile(size);
  const Eigen::Matrix<double, Eigen::Dynamic, 3> od = conc * stains.transpose();
  for (Eigen::Index i = 0; i < od.rows(); ++i)
    for (int c = 0; c < 3; ++c)
      tile.pixels[static_cast<std::size_t>(i) * 3 + c] = intensity_from_od(od(i, c));
  return tile;
}

inline Eigen::Matrix<double, 3, 2> reference_he_vectors() {
  Eigen::Matrix<double, 3, 2> s;
  s << 0.65, 0.07,
       0.70, 0.99,
       0.29, 0.11;
  s.col(0).normalize();
  s.col(1).normalize();
  return s;
}

// Stain concentrations of the synthetic H&E-like template: an eosin-rich
// stroma field with hematoxylin-dense nuclei and a few unstained lumina.
inline Eigen::Matrix<double, Eigen::Dynamic, 2> synthetic_he_concentrations(
    int size, std::uint64_t seed) {
  Rng rng(seed);
  struct Blob {
    double x, y, r, strength;
  };
  std::vector<Blob> nuclei, lumina;
  const int n_nuclei = size * size / 900;
  for (int i = 0; i < n_nuclei; ++i)
    nuclei.push_back({rng.uniform(0, size), rng.uniform(0, size), rng.uniform(4, 9),
                      rng.uniform(0.9, 1.6)});
  for (int i = 0; i < 3; ++i)
    lumina.push_back({rng.uniform(0, size), rng.uniform(0, size),
                      rng.uniform(size / 16.0, size / 9.0), 1.0});

  // Low-frequency stroma texture from a sum of random waves.
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 6; ++i)
    waves.push_back({rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08),
                     rng.uniform(0, 6.283185307179586), rng.uniform(0.05, 0.12)});

  Eigen::Matrix<double, Eigen::Dynamic, 2> conc(static_cast<Eigen::Index>(size) * size, 2);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double h = 0.25, e = 0.75;
      for (const auto& w : waves) e += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
      for (const auto& b : nuclei) {
        const double d2 = (x - b.x) * (x - b.x) + (y - b.y) * (y - b.y);
        if (d2 < b.r * b.r) {
          const double t = 1.0 - d2 / (b.r * b.r);
          h += b.strength * t;
          e *= 1.0 - 0.5 * t;
        }
      }
      double keep = 1.0;
      for (const auto& b : lumina) {
        const double d = std::hypot(x - b.x, y - b.y);
        keep = std::min(keep, std::clamp((d - b.r) / 6.0, 0.0, 1.0));
      }
      h = std::max(0.0, (h + 0.03 * rng.normal()) * keep);
      e = std::max(0.0, (e + 0.03 * rng.normal()) * keep);
      conc(static_cast<Eigen::Index>(y) * size + x, 0) = h;
      conc(static_cast<Eigen::Index>(y) * size + x, 1) = e;
    }
  return conc;
}

inline Tile synthetic_he_template(int size = 512, std::uint64_t seed = 2009) {
  return compose_stained_tile(size, reference_he_vectors(),
                              synthetic_he_concentrations(size, seed));
}

// Profile of the bundled synthetic template.
inline StainProfile default_reference_profile() {
  static const StainProfile profile =
      estimate_stain_profile(rgb_to_od(synthetic_he_template()));
  return profile;
}

}  // namespace histomil
