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
#include "histomil/model/common.hpp"
#include "histomil/rng.hpp"
#include "json.hpp"

namespace histomil {

enum class Aggregation { class_token, global_average };

inline std::string to_string(Aggregation a) {
  return a == Aggregation::class_token ? "class_token" : "global_average";
}

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "class_token") return Aggregation::class_token;
  if (s == "global_average") return Aggregation::global_average;
  throw ValidationError("unknown aggregation '" + s + "'");
}

struct ModelConfig {
  int input_dim = 768;
  int latent_dim = 512;
  int layers = 2;
  int heads = 8;
  int mlp_hidden = 2048;
  int num_targets = 1;
  Aggregation aggregation = Aggregation::class_token;
  double dropout = 0.0;
  // Extra LayerNorm on the readout token(s) before the heads.
  bool head_layer_norm = false;
  double layer_norm_eps = 1e-6;

  int head_dim() const { return latent_dim / heads; }
  int class_tokens() const {
    return aggregation == Aggregation::class_token ? num_targets : 0;
  }

  void validate() const {
    if (input_dim < 1 || latent_dim < 1 || mlp_hidden < 1)
      throw ValidationError("model config: dimensions must be positive");
    if (heads < 1 || latent_dim % heads != 0)
      throw ValidationError("model config: heads must divide latent_dim");
    if (layers < 1) throw ValidationError("model config: layers must be >= 1");
    if (num_targets < 1) throw ValidationError("model config: num_targets must be >= 1");
    if (dropout < 0 || dropout >= 1) throw ValidationError("model config: dropout must be in [0,1)");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_dim", c.input_dim},         {"latent_dim", c.latent_dim},
          {"layers", c.layers},               {"heads", c.heads},
          {"mlp_hidden", c.mlp_hidden},       {"num_targets", c.num_targets},
          {"aggregation", to_string(c.aggregation)},
          {"dropout", c.dropout},             {"head_layer_norm", c.head_layer_norm},
          {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.num_targets = j.value("num_targets", c.num_targets);
  if (j.contains("aggregation")) c.aggregation = aggregation_from_string(j["aggregation"]);
  c.dropout = j.value("dropout", c.dropout);
  c.head_layer_norm = j.value("head_layer_norm", c.head_layer_norm);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  c.validate();
  return c;
}

template <class T>
struct TransformerLayerParams {
  Mat<T> w_q, w_k, w_v;  // latent x (heads * head_dim)
  Mat<T> w_o;            // (heads * head_dim) x latent
  Mat<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Mat<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <class T>
struct ModelParams {
  Mat<T> proj_w;        // input_dim x latent
  Mat<T> proj_b;        // 1 x latent
  Mat<T> class_tokens;  // num_targets x latent (class_token mode only)
  std::vector<TransformerLayerParams<T>> layers;
  Mat<T> head_ln_gamma, head_ln_beta;  // head_layer_norm only
  Mat<T> head_w;  // num_targets x latent
  Mat<T> head_b;  // 1 x num_targets

  std::vector<NamedTensor<T>> tensors() {
    std::vector<NamedTensor<T>> out{{"proj_w", &proj_w}, {"proj_b", &proj_b}};
    if (class_tokens.size()) out.push_back({"class_tokens", &class_tokens});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& p = layers[l];
      const std::string pre = "layers." + std::to_string(l) + ".";
      for (auto [name, m] : {std::pair{"w_q", &p.w_q}, {"w_k", &p.w_k}, {"w_v", &p.w_v},
                             {"w_o", &p.w_o}, {"ln1_gamma", &p.ln1_gamma},
                             {"ln1_beta", &p.ln1_beta}, {"ln2_gamma", &p.ln2_gamma},
                             {"ln2_beta", &p.ln2_beta}, {"mlp_w1", &p.mlp_w1},
                             {"mlp_b1", &p.mlp_b1}, {"mlp_w2", &p.mlp_w2},
                             {"mlp_b2", &p.mlp_b2}})
        out.push_back({pre + name, m});
    }
    if (head_ln_gamma.size()) {
      out.push_back({"head_ln_gamma", &head_ln_gamma});
      out.push_back({"head_ln_beta", &head_ln_beta});
    }
    out.push_back({"head_w", &head_w});
    out.push_back({"head_b", &head_b});
    return out;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams copy = *this;
    auto src = copy.tensors();
    ModelParams<U> out = ModelParams<U>::shaped_like(*this);
    auto dst = out.tensors();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].value = src[i].value->template cast<U>();
    return out;
  }

  template <class U>
  static ModelParams shaped_like(const ModelParams<U>& other) {
    ModelParams p;
    p.proj_w.resize(other.proj_w.rows(), other.proj_w.cols());
    p.proj_b.resize(other.proj_b.rows(), other.proj_b.cols());
    p.class_tokens.resize(other.class_tokens.rows(), other.class_tokens.cols());
    p.layers.resize(other.layers.size());
    for (std::size_t l = 0; l < other.layers.size(); ++l) {
      const auto& o = other.layers[l];
      auto& q = p.layers[l];
      q.w_q.resize(o.w_q.rows(), o.w_q.cols());
      q.w_k.resize(o.w_k.rows(), o.w_k.cols());
      q.w_v.resize(o.w_v.rows(), o.w_v.cols());
      q.w_o.resize(o.w_o.rows(), o.w_o.cols());
      q.ln1_gamma.resize(1, o.ln1_gamma.cols());
      q.ln1_beta.resize(1, o.ln1_beta.cols());
      q.ln2_gamma.resize(1, o.ln2_gamma.cols());
      q.ln2_beta.resize(1, o.ln2_beta.cols());
      q.mlp_w1.resize(o.mlp_w1.rows(), o.mlp_w1.cols());
      q.mlp_b1.resize(1, o.mlp_b1.cols());
      q.mlp_w2.resize(o.mlp_w2.rows(), o.mlp_w2.cols());
      q.mlp_b2.resize(1, o.mlp_b2.cols());
    }
    p.head_ln_gamma.resize(other.head_ln_gamma.rows(), other.head_ln_gamma.cols());
    p.head_ln_beta.resize(other.head_ln_beta.rows(), other.head_ln_beta.cols());
    p.head_w.resize(other.head_w.rows(), other.head_w.cols());
    p.head_b.resize(other.head_b.rows(), other.head_b.cols());
    return p;
  }
};

// Seeded initialization: linear maps ~ U(+-1/sqrt(fan_in)), biases 0,
// LayerNorm scale 1 / shift 0, class tokens ~ N(0, 0.02^2).
template <class T>
ModelParams<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int d = cfg.latent_dim;
  auto uniform = [&](int rows, int cols, int fan_in) {
    Mat<T> m(rows, cols);
    fill_uniform(m, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    return m;
  };
  ModelParams<T> p;
  p.proj_w = uniform(cfg.input_dim, d, cfg.input_dim);
  p.proj_b = Mat<T>::Zero(1, d);
  if (cfg.class_tokens() > 0) {
    p.class_tokens.resize(cfg.class_tokens(), d);
    fill_normal(p.class_tokens, rng, 0.02);
  }
  const int hd = cfg.heads * cfg.head_dim();
  for (int l = 0; l < cfg.layers; ++l) {
    TransformerLayerParams<T> layer;
    layer.w_q = uniform(d, hd, d);
    layer.w_k = uniform(d, hd, d);
    layer.w_v = uniform(d, hd, d);
    layer.w_o = uniform(hd, d, hd);
    layer.ln1_gamma = Mat<T>::Ones(1, d);
    layer.ln1_beta = Mat<T>::Zero(1, d);
    layer.ln2_gamma = Mat<T>::Ones(1, d);
    layer.ln2_beta = Mat<T>::Zero(1, d);
    layer.mlp_w1 = uniform(d, cfg.mlp_hidden, d);
    layer.mlp_b1 = Mat<T>::Zero(1, cfg.mlp_hidden);
    layer.mlp_w2 = uniform(cfg.mlp_hidden, d, cfg.mlp_hidden);
    layer.mlp_b2 = Mat<T>::Zero(1, d);
    p.layers.push_back(std::move(layer));
  }
  if (cfg.head_layer_norm) {
    p.head_ln_gamma = Mat<T>::Ones(1, d);
    p.head_ln_beta = Mat<T>::Zero(1, d);
  }
  p.head_w = uniform(cfg.num_targets, d, d);
  p.head_b = Mat<T>::Zero(1, cfg.num_targets);
  return p;
}

// softmax(Q K^T / sqrt(d_k)) V. Optionally returns the attention matrix.
template <class T, class DQ, class DK, class DV>
Mat<T> self_attention(const Eigen::MatrixBase<DQ>& q, const Eigen::MatrixBase<DK>& k,
                      const Eigen::MatrixBase<DV>& v, Mat<T>* attention = nullptr) {
  if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols())
    throw DimensionError("self_attention: shape mismatch");
  if (q.cols() < 1) throw DimensionError("self_attention: d_k must be >= 1");
  require_finite(q, "self_attention Q");
  require_finite(k, "self_attention K");
  require_finite(v, "self_attention V");
  const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
  const Mat<T> logits = (q * k.transpose()) * scale;
  Mat<T> s = softmax_rows<T>(logits);
  Mat<T> out = s * v;
  if (attention) *attention = std::move(s);
  return out;
}

template <class T>
struct LayerCache {
  Mat<T> input;
  LayerNormCache<T> ln1;
  Mat<T> normed1;
  Mat<T> q, k, v;
  std::vector<Mat<T>> attention;  // per head, post-softmax
  Mat<T> concat;
  Mat<T> mid;  // input + MSA
  LayerNormCache<T> ln2;
  Mat<T> normed2;
  Mat<T> hidden_pre;
  Mat<T> hidden;  // after ReLU and dropout
  Mat<T> hidden_mask;
};

template <class T>
struct MsaResult {
  Mat<T> output;
  std::vector<Mat<T>> attention;
};

// Multi-headed self-attention: concat(head_1..head_h) W_O with
// head_i = SA(x W_Q^(i), x W_K^(i), x W_V^(i)).
template <class T>
MsaResult<T> msa(const Mat<T>& x, const TransformerLayerParams<T>& layer, int heads,
                 bool capture = false, LayerCache<T>* cache = nullptr) {
  const Eigen::Index hd = layer.w_q.cols();
  if (x.cols() != layer.w_q.rows() || hd % heads != 0)
    throw DimensionError("msa: shape mismatch");
  const Eigen::Index dk = hd / heads;
  Mat<T> q = x * layer.w_q, k = x * layer.w_k, v = x * layer.w_v;
  Mat<T> concat(x.rows(), hd);
  MsaResult<T> r;
  std::vector<Mat<T>> attn(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    concat.middleCols(h * dk, dk) =
        self_attention<T>(q.middleCols(h * dk, dk), k.middleCols(h * dk, dk),
                          v.middleCols(h * dk, dk), &attn[static_cast<std::size_t>(h)]);
  }
  r.output = concat * layer.w_o;
  require_finite(r.output, "msa output");
  if (capture) r.attention = attn;
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attention = std::move(attn);
    cache->concat = std::move(concat);
  }
  return r;
}

// Attention maps captured during a forward pass. Token order is
// [class tokens..., patches...].
struct AttentionTrace {
  Aggregation aggregation = Aggregation::class_token;
  int num_class_tokens = 0;
  int num_patches = 0;
  std::vector<std::vector<Mat<double>>> attention;  // [layer][head]
  std::vector<Mat<double>> queries, keys;           // [layer], tokens x (heads*head_dim)
  int heads() const { return attention.empty() ? 0 : static_cast<int>(attention[0].size()); }
};

template <class T>
struct ForwardCache {
  Mat<T> input;
  Mat<T> proj_pre;
  Mat<T> proj_mask;
  std::vector<LayerCache<T>> layers;
  Mat<T> readout_raw;  // class-token rows, or 1 x latent mean
  LayerNormCache<T> head_ln;
  Mat<T> readout;      // after optional LN
};

template <class T>
struct ForwardResult {
  RowVec<T> logits;
  std::optional<AttentionTrace> trace;
};

namespace detail {

template <class T>
RowVec<T> transformer_forward_impl(const Mat<T>& x, const ModelParams<T>& p,
                                   const ModelConfig& cfg, ForwardCache<T>* cache,
                                   AttentionTrace* trace, Rng* dropout_rng) {
  if (x.cols() != cfg.input_dim)
    throw DimensionError("forward: bag has d=" + std::to_string(x.cols()) +
                         " but the model expects " + std::to_string(cfg.input_dim));
  if (x.rows() < 1) throw DimensionError("forward: empty bag");
  require_finite(x, "forward input");
  const bool train_dropout = dropout_rng && cfg.dropout > 0;
  const int t = cfg.class_tokens();
  const Eigen::Index m = x.rows() + t;

  Mat<T> proj_pre = (x * p.proj_w).rowwise() + p.proj_b.row(0);
  Mat<T> z(m, cfg.latent_dim);
  if (t > 0) z.topRows(t) = p.class_tokens;
  Mat<T> proj_mask;
  z.bottomRows(x.rows()) = proj_pre.cwiseMax(T(0));
  if (train_dropout) {
    proj_mask = dropout_mask<T>(x.rows(), cfg.latent_dim, cfg.dropout, *dropout_rng);
    z.bottomRows(x.rows()).array() *= proj_mask.array();
  }
  if (cache) {
    cache->input = x;
    cache->proj_pre = std::move(proj_pre);
    cache->proj_mask = std::move(proj_mask);
    cache->layers.assign(static_cast<std::size_t>(cfg.layers), {});
  }
  if (trace) {
    trace->aggregation = cfg.aggregation;
    trace->num_class_tokens = t;
    trace->num_patches = static_cast<int>(x.rows());
    trace->attention.clear();
    trace->queries.clear();
    trace->keys.clear();
  }

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& layer = p.layers[static_cast<std::size_t>(l)];
    LayerCache<T> local;
    LayerCache<T>& lc = cache ? cache->layers[static_cast<std::size_t>(l)] : local;
    lc.input = z;
    lc.normed1 = layer_norm(z, layer.ln1_gamma, layer.ln1_beta, cfg.layer_norm_eps, &lc.ln1);
    MsaResult<T> attn = msa(lc.normed1, layer, cfg.heads, false, &lc);
    if (trace) {
      std::vector<Mat<double>> heads;
      for (const auto& a : lc.attention) heads.push_back(a.template cast<double>());
      trace->attention.push_back(std::move(heads));
      trace->queries.push_back(lc.q.template cast<double>());
      trace->keys.push_back(lc.k.template cast<double>());
    }
    lc.mid = z + attn.output;
    lc.normed2 = layer_norm(lc.mid, layer.ln2_gamma, layer.ln2_beta, cfg.layer_norm_eps, &lc.ln2);
    lc.hidden_pre = (lc.normed2 * layer.mlp_w1).rowwise() + layer.mlp_b1.row(0);
    lc.hidden = lc.hidden_pre.cwiseMax(T(0));
    if (train_dropout) {
      lc.hidden_mask = dropout_mask<T>(m, cfg.mlp_hidden, cfg.dropout, *dropout_rng);
      lc.hidden.array() *= lc.hidden_mask.array();
    }
    z = lc.mid + ((lc.hidden * layer.mlp_w2).rowwise() + layer.mlp_b2.row(0));
    require_finite(z, "transformer layer output");
  }

  Mat<T> readout_raw = cfg.aggregation == Aggregation::class_token
                           ? Mat<T>(z.topRows(t))
                           : Mat<T>(z.colwise().mean());
  LayerNormCache<T> head_ln;
  Mat<T> readout = cfg.head_layer_norm
                       ? layer_norm(readout_raw, p.head_ln_gamma, p.head_ln_beta,
                                    cfg.layer_norm_eps, &head_ln)
                       : readout_raw;
  RowVec<T> logits(cfg.num_targets);
  for (int j = 0; j < cfg.num_targets; ++j) {
    const Eigen::Index row = cfg.aggregation == Aggregation::class_token ? j : 0;
    logits(j) = readout.row(row).dot(p.head_w.row(j)) + p.head_b(0, j);
  }
  require_finite(logits, "logits");
  if (cache) {
    cache->readout_raw = std::move(readout_raw);
    cache->head_ln = std::move(head_ln);
    cache->readout = std::move(readout);
  }
  return logits;
}

}  // namespace detail

template <class T>
ForwardResult<T> forward(const Mat<T>& x, const ModelParams<T>& params, const ModelConfig& cfg,
                         bool capture = false) {
  ForwardResult<T> r;
  AttentionTrace trace;
  r.logits = detail::transformer_forward_impl<T>(x, params, cfg, nullptr,
                                              capture ? &trace : nullptr, nullptr);
  if (capture) r.trace = std::move(trace);
  return r;
}

// Reverse pass from d loss / d logits; accumulates into grad.
template <class T>
void backward(const ForwardCache<T>& c, const RowVec<T>& dlogits, const ModelParams<T>& p,
              const ModelConfig& cfg, ModelParams<T>& grad) {
  const int t = cfg.class_tokens();
  const bool cls = cfg.aggregation == Aggregation::class_token;
  Mat<T> dreadout = Mat<T>::Zero(c.readout.rows(), c.readout.cols());
  for (int j = 0; j < cfg.num_targets; ++j) {
    const Eigen::Index row = cls ? j : 0;
    grad.head_w.row(j) += dlogits(j) * c.readout.row(row);
    grad.head_b(0, j) += dlogits(j);
    dreadout.row(row) += dlogits(j) * p.head_w.row(j);
  }
  Mat<T> dreadout_raw = cfg.head_layer_norm
                            ? layer_norm_backward(dreadout, c.head_ln, p.head_ln_gamma,
                                                  grad.head_ln_gamma, grad.head_ln_beta)
                            : dreadout;
  const Eigen::Index m = c.layers.front().input.rows();
  Mat<T> dz(m, cfg.latent_dim);
  if (cls) {
    dz.setZero();
    dz.topRows(t) = dreadout_raw;
  } else {
    dz.rowwise() = dreadout_raw.row(0) / static_cast<T>(m);
  }

  const int heads = cfg.heads;
  const Eigen::Index dk = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& layer = p.layers[static_cast<std::size_t>(l)];
    auto& g = grad.layers[static_cast<std::size_t>(l)];
    const auto& lc = c.layers[static_cast<std::size_t>(l)];

    // MLP block.
    g.mlp_w2.noalias() += lc.hidden.transpose() * dz;
    g.mlp_b2.row(0) += dz.colwise().sum();
    Mat<T> dhidden = dz * layer.mlp_w2.transpose();
    if (lc.hidden_mask.size()) dhidden.array() *= lc.hidden_mask.array();
    dhidden.array() *= (lc.hidden_pre.array() > T(0)).template cast<T>();
    g.mlp_w1.noalias() += lc.normed2.transpose() * dhidden;
    g.mlp_b1.row(0) += dhidden.colwise().sum();
    const Mat<T> dnormed2 = dhidden * layer.mlp_w1.transpose();
    Mat<T> dmid = dz + layer_norm_backward(dnormed2, lc.ln2, layer.ln2_gamma, g.ln2_gamma,
                                           g.ln2_beta);

    // Attention block.
    g.w_o.noalias() += lc.concat.transpose() * dmid;
    const Mat<T> dconcat = dmid * layer.w_o.transpose();
    Mat<T> dq(m, heads * dk), dk_(m, heads * dk), dv(m, heads * dk);
    for (int h = 0; h < heads; ++h) {
      const Mat<T>& s = lc.attention[static_cast<std::size_t>(h)];
      const auto dout = dconcat.middleCols(h * dk, dk);
      dv.middleCols(h * dk, dk) = s.transpose() * dout;
      const Mat<T> ds = dout * lc.v.middleCols(h * dk, dk).transpose();
      const Mat<T> dlog = softmax_rows_backward(s, ds) * scale;
      dq.middleCols(h * dk, dk) = dlog * lc.k.middleCols(h * dk, dk);
      dk_.middleCols(h * dk, dk) = dlog.transpose() * lc.q.middleCols(h * dk, dk);
    }
    g.w_q.noalias() += lc.normed1.transpose() * dq;
    g.w_k.noalias() += lc.normed1.transpose() * dk_;
    g.w_v.noalias() += lc.normed1.transpose() * dv;
    const Mat<T> dnormed1 = dq * layer.w_q.transpose() + dk_ * layer.w_k.transpose() +
                            dv * layer.w_v.transpose();
    dz = dmid + layer_norm_backward(dnormed1, lc.ln1, layer.ln1_gamma, g.ln1_gamma, g.ln1_beta);
  }

  if (t > 0) grad.class_tokens += dz.topRows(t);
  Mat<T> dproj = dz.bottomRows(c.input.rows());
  if (c.proj_mask.size()) dproj.array() *= c.proj_mask.array();
  dproj.array() *= (c.proj_pre.array() > T(0)).template cast<T>();
  grad.proj_w.noalias() += c.input.transpose() * dproj;
  grad.proj_b.row(0) += dproj.colwise().sum();
}

// Loss of one bag and its gradient (accumulated into grad).
template <class T>
T transformer_loss_and_gradient(const Mat<T>& x, const Labels& labels, const ModelParams<T>& p,
                                const ModelConfig& cfg, ModelParams<T>& grad,
                                Rng* dropout_rng = nullptr) {
  ForwardCache<T> cache;
  const RowVec<T> logits =
      detail::transformer_forward_impl<T>(x, p, cfg, &cache, nullptr, dropout_rng);
  const LossResult<T> loss = bce_loss(logits, labels);
  backward(cache, loss.grad, p, cfg, grad);
  return loss.loss;
}

// The transformer aggregator bundled with its config, in the shape the
// training loop expects.
template <class T>
struct TransformerModel {
  using Scalar = T;
  using Params = ModelParams<T>;
  static constexpr const char* kind = "transformer";

  ModelConfig config;
  Params params;

  TransformerModel() = default;
  TransformerModel(ModelConfig cfg, std::uint64_t seed)
      : config(cfg), params(init_model_params<T>(cfg, seed)) {}

  int num_targets() const { return config.num_targets; }
  RowVec<T> logits(const Mat<T>& x) const { return forward(x, params, config).logits; }
  T loss_and_gradient(const Mat<T>& x, const Labels& labels, Params& grad,
                      Rng* dropout_rng = nullptr) const {
    return transformer_loss_and_gradient(x, labels, params, config, grad, dropout_rng);
  }
  nlohmann::json config_json() const { return to_json(config); }
};

}  // namespace histomil
