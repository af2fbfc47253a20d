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
#include <optional>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/features.hpp"
#include "histomil/rng.hpp"

namespace histomil {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Labels = std::vector<TargetValue>;

// Non-owning handle on one trainable tensor. Vectors are stored as 1 x k.
template <class T>
struct NamedTensor {
  std::string name;
  Mat<T>* value;
};

template <class T>
struct ConstNamedTensor {
  std::string name;
  const Mat<T>* value;
};

// Applies fn(a_tensor, b_tensor) over two parameter sets with the same layout.
template <class P, class Fn>
void zip_tensors(P& a, P& b, Fn&& fn) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  for (std::size_t i = 0; i < ta.size(); ++i) fn(*ta[i].value, *tb[i].value);
}

template <class P>
P zeros_like(const P& p) {
  P z = p;
  for (auto& t : z.tensors()) t.value->setZero();
  return z;
}

template <class T>
void fill_uniform(Mat<T>& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
void fill_normal(Mat<T>& m, Rng& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<T>(rng.normal(0.0, stddev));
}

template <class Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* where) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite values in ") + where);
}

// Row-wise softmax with max subtraction.
template <class T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// Backward of a row-wise softmax given its output s and upstream ds.
template <class T>
Mat<T> softmax_rows_backward(const Mat<T>& s, const Mat<T>& ds) {
  const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (s.array() * ds.array()).rowwise().sum();
  return (s.array() * (ds.colwise() - dot).array()).matrix();
}

template <class T>
struct LayerNormCache {
  Mat<T> normalized;                           // (x - mean) / sqrt(var + eps)
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;  // per row
};

// Per-row layer normalization followed by scale (gamma) and shift (beta).
template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, double eps,
                  LayerNormCache<T>* cache = nullptr) {
  const auto d = static_cast<T>(x.cols());
  const Eigen::Matrix<T, Eigen::Dynamic, 1> mean = x.rowwise().sum() / d;
  Mat<T> centered = x.colwise() - mean;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> var = centered.array().square().rowwise().sum() / d;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std =
      (var.array() + static_cast<T>(eps)).rsqrt();
  Mat<T> normalized = centered.array().colwise() * inv_std.array();
  Mat<T> y = (normalized.array().rowwise() * gamma.row(0).array()).rowwise() +
             beta.row(0).array();
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache,
                           const Mat<T>& gamma, Mat<T>& dgamma, Mat<T>& dbeta) {
  dgamma.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const auto d = static_cast<T>(dy.cols());
  const Mat<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
  const Eigen::Matrix<T, Eigen::Dynamic, 1> sum_d = dxhat.rowwise().sum();
  const Eigen::Matrix<T, Eigen::Dynamic, 1> sum_dx =
      (dxhat.array() * cache.normalized.array()).rowwise().sum();
  Mat<T> dx = (d * dxhat.array()).colwise() - sum_d.array();
  dx.array() -= cache.normalized.array().colwise() * sum_dx.array();
  dx.array().colwise() *= cache.inv_std.array() / d;
  return dx;
}

template <class T>
struct LossResult {
  T loss;
  RowVec<T> grad;  // d loss / d logits
};

// Mean binary cross-entropy with logits over the labelled targets.
template <class T>
LossResult<T> bce_loss(const RowVec<T>& logits, const Labels& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.size())
    throw DimensionError("bce_loss: label count does not match logit count");
  int count = 0;
  for (const auto& l : labels) count += l.has_value();
  if (count == 0) throw MaskedOutError("bce_loss: every target is NA");
  LossResult<T> r{T(0), RowVec<T>::Zero(logits.size())};
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    if (!labels[static_cast<std::size_t>(j)]) continue;
    const T z = logits(j);
    const T y = *labels[static_cast<std::size_t>(j)] ? T(1) : T(0);
    r.loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    const T sig = z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
    r.grad(j) = (sig - y) / static_cast<T>(count);
  }
  r.loss /= static_cast<T>(count);
  return r;
}

template <class T>
T sigmoid(T z) {
  return z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

// Inverted dropout mask (entries 0 or 1/(1-p)).
template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<T> mask(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.uniform() < p ? T(0) : keep;
  return mask;
}

}  // namespace histomil
