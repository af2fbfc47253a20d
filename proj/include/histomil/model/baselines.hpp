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

#include "histomil/error.hpp"
#include "histomil/model/common.hpp"
#include "json.hpp"

namespace histomil {

// Attention-based MIL pooling (Ilse et al.): e_i = w . tanh(V x_i),
// a = softmax(e), z = sum_i a_i x_i, linear head per target.
struct AttentionMilConfig {
  int input_dim = 768;
  int attention_dim = 128;
  int num_targets = 1;

  void validate() const {
    if (input_dim < 1 || attention_dim < 1 || num_targets < 1)
      throw ValidationError("attention MIL config: dimensions must be positive");
  }
};

inline nlohmann::json to_json(const AttentionMilConfig& c) {
  return {{"input_dim", c.input_dim},
          {"attention_dim", c.attention_dim},
          {"num_targets", c.num_targets}};
}

inline AttentionMilConfig attention_mil_config_from_json(const nlohmann::json& j,
                                                         AttentionMilConfig c = {}) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.attention_dim = j.value("attention_dim", c.attention_dim);
  c.num_targets = j.value("num_targets", c.num_targets);
  c.validate();
  return c;
}

template <class T>
struct AttentionMilParams {
  Mat<T> attn_v;  // input_dim x attention_dim
  Mat<T> attn_w;  // 1 x attention_dim
  Mat<T> head_w;  // num_targets x input_dim
  Mat<T> head_b;  // 1 x num_targets

  std::vector<NamedTensor<T>> tensors() {
    return {{"attn_v", &attn_v}, {"attn_w", &attn_w}, {"head_w", &head_w}, {"head_b", &head_b}};
  }
};

template <class T>
AttentionMilParams<T> init_attention_mil_params(const AttentionMilConfig& cfg,
                                                std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  AttentionMilParams<T> p;
  p.attn_v.resize(cfg.input_dim, cfg.attention_dim);
  fill_uniform(p.attn_v, rng, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)));
  p.attn_w.resize(1, cfg.attention_dim);
  fill_uniform(p.attn_w, rng, 1.0 / std::sqrt(static_cast<double>(cfg.attention_dim)));
  p.head_w.resize(cfg.num_targets, cfg.input_dim);
  fill_uniform(p.head_w, rng, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)));
  p.head_b = Mat<T>::Zero(1, cfg.num_targets);
  return p;
}

template <class T>
struct AttentionMilOutput {
  RowVec<T> logits;
  RowVec<T> weights;  // attention over patches
};

template <class T>
AttentionMilOutput<T> attention_mil_forward(const Mat<T>& x, const AttentionMilParams<T>& p) {
  if (x.cols() != p.attn_v.rows())
    throw DimensionError("attention_mil_forward: bag dimension mismatch");
  if (x.rows() < 1) throw DimensionError("attention_mil_forward: empty bag");
  require_finite(x, "attention MIL input");
  const Mat<T> hidden = (x * p.attn_v).array().tanh();
  Mat<T> scores = (hidden * p.attn_w.transpose()).transpose();  // 1 x n
  AttentionMilOutput<T> out;
  out.weights = softmax_rows<T>(scores).row(0);
  const RowVec<T> pooled = out.weights * x;
  out.logits = pooled * p.head_w.transpose() + p.head_b.row(0);
  require_finite(out.logits, "attention MIL logits");
  return out;
}

template <class T>
T attention_mil_loss_and_gradient(const Mat<T>& x, const Labels& labels,
                                  const AttentionMilParams<T>& p, AttentionMilParams<T>& grad) {
  require_finite(x, "attention MIL input");
  if (x.cols() != p.attn_v.rows())
    throw DimensionError("attention_mil: bag dimension mismatch");
  const Mat<T> hidden = (x * p.attn_v).array().tanh();
  const Mat<T> scores = (hidden * p.attn_w.transpose()).transpose();
  const RowVec<T> a = softmax_rows<T>(scores).row(0);
  const RowVec<T> pooled = a * x;
  const RowVec<T> logits = pooled * p.head_w.transpose() + p.head_b.row(0);
  require_finite(logits, "attention MIL logits");
  const LossResult<T> loss = bce_loss(logits, labels);

  grad.head_w.noalias() += loss.grad.transpose() * pooled;
  grad.head_b.row(0) += loss.grad;
  const RowVec<T> dpooled = loss.grad * p.head_w;
  const RowVec<T> da = (x * dpooled.transpose()).transpose();
  const RowVec<T> de = (a.array() * (da.array() - a.dot(da))).matrix();
  grad.attn_w.row(0).noalias() += de * hidden;
  Mat<T> dhidden = de.transpose() * p.attn_w;
  dhidden.array() *= T(1) - hidden.array().square();
  grad.attn_v.noalias() += x.transpose() * dhidden;
  return loss.loss;
}

template <class T>
struct AttentionMilModel {
  using Scalar = T;
  using Params = AttentionMilParams<T>;
  static constexpr const char* kind = "attention_mil";

  AttentionMilConfig config;
  Params params;

  AttentionMilModel() = default;
  AttentionMilModel(AttentionMilConfig cfg, std::uint64_t seed)
      : config(cfg), params(init_attention_mil_params<T>(cfg, seed)) {}

  int num_targets() const { return config.num_targets; }
  RowVec<T> logits(const Mat<T>& x) const { return attention_mil_forward(x, params).logits; }
  T loss_and_gradient(const Mat<T>& x, const Labels& labels, Params& grad,
                      Rng* = nullptr) const {
    return attention_mil_loss_and_gradient(x, labels, params, grad);
  }
  nlohmann::json config_json() const { return to_json(config); }
};

// Mean pooling over patch embeddings followed by a linear head.
struct MeanPoolConfig {
  int input_dim = 768;
  int num_targets = 1;

  void validate() const {
    if (input_dim < 1 || num_targets < 1)
      throw ValidationError("mean-pool config: dimensions must be positive");
  }
};

inline nlohmann::json to_json(const MeanPoolConfig& c) {
  return {{"input_dim", c.input_dim}, {"num_targets", c.num_targets}};
}

inline MeanPoolConfig mean_pool_config_from_json(const nlohmann::json& j, MeanPoolConfig c = {}) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.num_targets = j.value("num_targets", c.num_targets);
  c.validate();
  return c;
}

template <class T>
struct MeanPoolParams {
  Mat<T> head_w;  // num_targets x input_dim
  Mat<T> head_b;  // 1 x num_targets

  std::vector<NamedTensor<T>> tensors() { return {{"head_w", &head_w}, {"head_b", &head_b}}; }
};

template <class T>
MeanPoolParams<T> init_mean_pool_params(const MeanPoolConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  MeanPoolParams<T> p;
  p.head_w.resize(cfg.num_targets, cfg.input_dim);
  fill_uniform(p.head_w, rng, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)));
  p.head_b = Mat<T>::Zero(1, cfg.num_targets);
  return p;
}

template <class T>
RowVec<T> mean_pool_forward(const Mat<T>& x, const MeanPoolParams<T>& p) {
  if (x.cols() != p.head_w.cols()) throw DimensionError("mean_pool_forward: bag dimension mismatch");
  if (x.rows() < 1) throw DimensionError("mean_pool_forward: empty bag");
  require_finite(x, "mean-pool input");
  const RowVec<T> pooled = x.colwise().mean();
  return pooled * p.head_w.transpose() + p.head_b.row(0);
}

template <class T>
T mean_pool_loss_and_gradient(const Mat<T>& x, const Labels& labels, const MeanPoolParams<T>& p,
                              MeanPoolParams<T>& grad) {
  const RowVec<T> pooled = x.colwise().mean();
  const RowVec<T> logits = mean_pool_forward(x, p);
  const LossResult<T> loss = bce_loss(logits, labels);
  grad.head_w.noalias() += loss.grad.transpose() * pooled;
  grad.head_b.row(0) += loss.grad;
  return loss.loss;
}

template <class T>
struct MeanPoolModel {
  using Scalar = T;
  using Params = MeanPoolParams<T>;
  static constexpr const char* kind = "mean_pool";

  MeanPoolConfig config;
  Params params;

  MeanPoolModel() = default;
  MeanPoolModel(MeanPoolConfig cfg, std::uint64_t seed)
      : config(cfg), params(init_mean_pool_params<T>(cfg, seed)) {}

  int num_targets() const { return config.num_targets; }
  RowVec<T> logits(const Mat<T>& x) const { return mean_pool_forward(x, params); }
  T loss_and_gradient(const Mat<T>& x, const Labels& labels, Params& grad,
                      Rng* = nullptr) const {
    return mean_pool_loss_and_gradient(x, labels, params, grad);
  }
  nlohmann::json config_json() const { return to_json(config); }
};

}  // namespace histomil
