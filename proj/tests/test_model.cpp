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

#include <cmath>
#include <functional>
#include <limits>

#include "gradcheck.hpp"
#include "reference_model.hpp"
#include "test_util.hpp"

using namespace histomil;
using histomil::testing::random_matrix;
using histomil::testing::scratch_dir;
using histomil::testing::max_gradient_error;
using histomil::testing::perturb;

namespace {

ModelConfig tiny_config(Aggregation agg, bool head_ln = false) {
  ModelConfig c;
  c.input_dim = 8;
  c.latent_dim = 8;
  c.heads = 2;
  c.layers = 2;
  c.mlp_hidden = 16;
  c.num_targets = 2;
  c.aggregation = agg;
  c.head_layer_norm = head_ln;
  return c;
}

double max_abs_diff(const RowVec<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (Eigen::Index j = 0; j < a.size(); ++j)
    m = std::max(m, std::abs(a(j) - b[static_cast<std::size_t>(j)]));
  return m;
}

const Labels kTinyLabels{TargetValue(true), TargetValue()};

}  // namespace

TEST(SelfAttention, ZeroQueriesAndKeysAverageValues) {
  const Mat<double> q = Mat<double>::Zero(3, 4), k = Mat<double>::Zero(3, 4);
  const Mat<double> v = random_matrix<double>(3, 5, 1);
  const Mat<double> out = self_attention<double>(q, k, v);
  for (Eigen::Index i = 0; i < 3; ++i)
    EXPECT_LT((out.row(i) - v.colwise().mean()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SelfAttention, SingleTokenReturnsValue) {
  const Mat<double> q = random_matrix<double>(1, 4, 2), k = random_matrix<double>(1, 4, 3);
  const Mat<double> v = random_matrix<double>(1, 6, 4);
  EXPECT_LT((self_attention<double>(q, k, v) - v).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SelfAttention, MatchesScalarOracle) {
  const Mat<double> q = random_matrix<double>(3, 4, 5), k = random_matrix<double>(3, 4, 6);
  const Mat<double> v = random_matrix<double>(3, 4, 7);
  Mat<double> attn;
  const Mat<double> out = self_attention<double>(q, k, v, &attn);
  reference::Rows w;
  const auto ref = reference::attention_head(reference::to_rows(q), reference::to_rows(k),
                                             reference::to_rows(v), 0, 4, &w);
  for (int i = 0; i < 3; ++i) {
    double row = 0;
    for (int j = 0; j < 3; ++j) {
      EXPECT_NEAR(out(i, j), ref[i][j], 1e-12);
      EXPECT_NEAR(attn(i, j), w[i][j], 1e-12);
      EXPECT_GE(attn(i, j), 0.0);
      row += attn(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(SelfAttention, RejectsNonFiniteInput) {
  Mat<double> q = random_matrix<double>(2, 2, 8);
  q(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(self_attention<double>(q, q, q), NumericError);
  EXPECT_THROW(self_attention<double>(q.topRows(1), q, q), DimensionError);
}

TEST(Msa, SingleHeadIsAttentionThenOutputMap) {
  ModelConfig c;
  c.latent_dim = 6;
  c.heads = 1;
  c.mlp_hidden = 4;
  c.input_dim = 6;
  const auto p = init_model_params<double>(c, 3);
  const Mat<double> x = random_matrix<double>(5, 6, 9);
  const auto& l = p.layers[0];
  const Mat<double> expect = self_attention<double>(x * l.w_q, x * l.w_k, x * l.w_v) * l.w_o;
  EXPECT_LT((msa(x, l, 1).output - expect).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Msa, GoldenOutputsAndOracle) {
  const auto p = init_model_params<double>(ModelConfig{}, 0);
  const Mat<double> z = random_matrix<double>(4, 512, 2);
  const auto r = msa(z, p.layers[0], 8, true);
  EXPECT_NEAR(r.output(0, 0), 0.10668431091052162, 1e-10);
  EXPECT_NEAR(r.output(1, 7), 0.14337874080815588, 1e-10);
  EXPECT_NEAR(r.output(2, 100), 0.11422558335128377, 1e-10);
  EXPECT_NEAR(r.output(3, 511), -0.42539716055478871, 1e-10);
  EXPECT_NEAR(r.output.sum(), -13.677153231595316, 1e-9);
  std::vector<reference::Rows> w;
  const auto ref = reference::msa(reference::to_rows(z), p.layers[0], 8, &w);
  double m = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 512; ++j) m = std::max(m, std::abs(r.output(i, j) - ref[i][j]));
  EXPECT_LT(m, 1e-10);
  ASSERT_EQ(r.attention.size(), 8u);
  for (std::size_t h = 0; h < 8; ++h)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) EXPECT_NEAR(r.attention[h](i, j), w[h][i][j], 1e-12);
}

TEST(Msa, RowPermutationEquivariant) {
  ModelConfig c = tiny_config(Aggregation::class_token);
  auto p = init_model_params<double>(c, 4);
  const Mat<double> x = random_matrix<double>(6, 8, 10);
  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  Mat<double> xp(6, 8);
  for (int i = 0; i < 6; ++i) xp.row(i) = x.row(perm[i]);
  const Mat<double> a = msa(x, p.layers[0], c.heads).output;
  const Mat<double> b = msa(xp, p.layers[0], c.heads).output;
  for (int i = 0; i < 6; ++i) EXPECT_LT((b.row(i) - a.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  const Mat<double> x = random_matrix<double>(4, 32, 11, 3.0);
  const Mat<double> y = layer_norm<double>(x, Mat<double>::Ones(1, 32), Mat<double>::Zero(1, 32), 1e-6);
  for (Eigen::Index i = 0; i < 4; ++i) {
    const double mean = y.row(i).mean();
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR((y.row(i).array() - mean).square().mean(), 1.0, 1e-5);
  }
}

TEST(Transformer, GoldenLogitsFromDefaultInit) {
  const Mat<double> x = random_matrix<double>(5, 768, 0);
  ModelConfig c;
  EXPECT_NEAR(forward(x, init_model_params<double>(c, 0), c).logits(0), -0.022702367327323718, 1e-10);
  c.aggregation = Aggregation::global_average;
  EXPECT_NEAR(forward(x, init_model_params<double>(c, 0), c).logits(0), 0.18434166063988497, 1e-10);
}

TEST(Transformer, MatchesScalarOracleInEveryMode) {
  for (auto agg : {Aggregation::class_token, Aggregation::global_average})
    for (bool head_ln : {false, true}) {
      ModelConfig c = tiny_config(agg, head_ln);
      c.input_dim = 12;
      auto p = init_model_params<double>(c, 5);
      perturb(p, 6);
      const Mat<double> x = random_matrix<double>(7, 12, 12);
      EXPECT_LT(max_abs_diff(forward(x, p, c).logits, reference::transformer_logits(x, p, c)), 1e-12);
    }
}

TEST(Transformer, InitIsSeedDeterministic) {
  ModelConfig c = tiny_config(Aggregation::class_token);
  auto a = init_model_params<double>(c, 9), b = init_model_params<double>(c, 9);
  auto d = init_model_params<double>(c, 10);
  auto ta = a.tensors(), tb = b.tensors(), td = d.tensors();
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(*ta[i].value, *tb[i].value) << ta[i].name;
    any_diff |= (*ta[i].value != *td[i].value);
  }
  EXPECT_TRUE(any_diff);
  const double bound = 1.0 / std::sqrt(8.0);
  EXPECT_LE(a.proj_w.cwiseAbs().maxCoeff(), bound);
  EXPECT_EQ(a.proj_b.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(a.layers[0].ln1_gamma, Mat<double>::Ones(1, 8));
}

TEST(Transformer, PatchPermutationInvariant) {
  for (auto agg : {Aggregation::class_token, Aggregation::global_average}) {
    ModelConfig c = tiny_config(agg, true);
    auto p = init_model_params<double>(c, 7);
    perturb(p, 8);
    const Mat<double> x = random_matrix<double>(9, 8, 13);
    Mat<double> xr = x.colwise().reverse();
    std::vector<int> perm{4, 8, 0, 2, 6, 1, 7, 3, 5};
    Mat<double> xp(9, 8);
    for (int i = 0; i < 9; ++i) xp.row(i) = x.row(perm[i]);
    const RowVec<double> base = forward(x, p, c).logits;
    EXPECT_LT((forward(xr, p, c).logits - base).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((forward(xp, p, c).logits - base).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Transformer, AttentionTraceIsRowStochastic) {
  ModelConfig c = tiny_config(Aggregation::class_token);
  auto p = init_model_params<double>(c, 11);
  perturb(p, 12, 0.5);
  const auto r = forward(random_matrix<double>(6, 8, 14), p, c, true);
  ASSERT_TRUE(r.trace.has_value());
  EXPECT_EQ(r.trace->num_class_tokens, 2);
  EXPECT_EQ(r.trace->num_patches, 6);
  ASSERT_EQ(r.trace->attention.size(), 2u);
  for (const auto& layer : r.trace->attention) {
    ASSERT_EQ(layer.size(), 2u);
    for (const auto& a : layer) {
      ASSERT_EQ(a.rows(), 8);
      EXPECT_GE(a.minCoeff(), 0.0);
      EXPECT_LT((a.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
  }
}

TEST(Transformer, DimensionAndNumericErrors) {
  ModelConfig c = tiny_config(Aggregation::class_token);
  const auto p = init_model_params<double>(c, 1);
  EXPECT_THROW(forward(random_matrix<double>(3, 9, 1), p, c), DimensionError);
  EXPECT_THROW(forward(Mat<double>(0, 8), p, c), DimensionError);
  Mat<double> bad = random_matrix<double>(3, 8, 2);
  bad(0, 3) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward(bad, p, c), NumericError);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(aggregation_from_string("max"), ValidationError);
}

TEST(Transformer, FloatAndDoubleAgree) {
  ModelConfig c = tiny_config(Aggregation::global_average);
  auto p = init_model_params<double>(c, 2);
  perturb(p, 3);
  const Mat<double> x = random_matrix<double>(5, 8, 4);
  const auto pf = p.cast<float>();
  const RowVec<float> lf = forward<float>(x.cast<float>(), pf, c).logits;
  EXPECT_LT((lf.cast<double>() - forward(x, p, c).logits).cwiseAbs().maxCoeff(), 1e-4);
}

class TransformerGradient : public ::testing::TestWithParam<std::tuple<Aggregation, bool>> {};

TEST_P(TransformerGradient, MatchesFiniteDifferences) {
  const auto [agg, head_ln] = GetParam();
  const ModelConfig c = tiny_config(agg, head_ln);
  auto p = init_model_params<double>(c, 21);
  perturb(p, 22);
  const Mat<double> x = random_matrix<double>(5, 8, 23);
  auto grad = zeros_like(p);
  transformer_loss_and_gradient(x, kTinyLabels, p, c, grad);
  std::string worst;
  const double err = max_gradient_error<ModelParams<double>>(
      p, grad,
      [&](const ModelParams<double>& q) { return bce_loss(forward(x, q, c).logits, kTinyLabels).loss; },
      &worst);
  EXPECT_LE(err, 1e-4) << "worst entry " << worst;
  // The NA target contributes nothing.
  EXPECT_EQ(grad.head_w.row(1).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(grad.head_b(0, 1), 0.0);
}

INSTANTIATE_TEST_SUITE_P(Modes, TransformerGradient,
                         ::testing::Combine(::testing::Values(Aggregation::class_token,
                                                              Aggregation::global_average),
                                            ::testing::Bool()));

TEST(Transformer, GradientWithFixedDropoutMasks) {
  ModelConfig c = tiny_config(Aggregation::class_token);
  c.dropout = 0.25;
  auto p = init_model_params<double>(c, 31);
  perturb(p, 32);
  const Mat<double> x = random_matrix<double>(5, 8, 33);
  auto grad = zeros_like(p);
  Rng rng(77);
  transformer_loss_and_gradient(x, kTinyLabels, p, c, grad, &rng);
  const double err = max_gradient_error<ModelParams<double>>(p, grad, [&](const ModelParams<double>& q) {
    auto g = zeros_like(q);
    Rng r(77);
    return transformer_loss_and_gradient(x, kTinyLabels, q, c, g, &r);
  });
  EXPECT_LE(err, 1e-4);
  // Evaluation ignores dropout.
  EXPECT_EQ(forward(x, p, c).logits, forward(x, p, c).logits);
}

TEST(AttentionMil, GoldenLogitAndOracle) {
  const Mat<double> x = random_matrix<double>(5, 768, 0);
  const auto p = init_attention_mil_params<double>(AttentionMilConfig{}, 0);
  const auto out = attention_mil_forward(x, p);
  EXPECT_NEAR(out.logits(0), 0.22212393877556263, 1e-10);
  AttentionMilConfig c{10, 6, 3};
  auto q = init_attention_mil_params<double>(c, 1);
  perturb(q, 2);
  const Mat<double> y = random_matrix<double>(7, 10, 3);
  EXPECT_LT(max_abs_diff(attention_mil_forward(y, q).logits, reference::attention_mil_logits(y, q)), 1e-12);
}

TEST(AttentionMil, WeightsFormDistributionAndPermutationInvariance) {
  auto p = init_attention_mil_params<double>({8, 4, 1}, 3);
  perturb(p, 4, 0.5);
  const Mat<double> x = random_matrix<double>(6, 8, 5);
  const auto out = attention_mil_forward(x, p);
  EXPECT_GE(out.weights.minCoeff(), 0.0);
  EXPECT_NEAR(out.weights.sum(), 1.0, 1e-12);
  const Mat<double> xr = x.colwise().reverse();
  EXPECT_NEAR(attention_mil_forward(xr, p).logits(0), out.logits(0), 1e-12);
  EXPECT_EQ(attention_mil_forward(Mat<double>(x.topRows(1)), p).weights(0), 1.0);
}

TEST(AttentionMil, DuplicatedBagGivesSameLogit) {
  auto p = init_attention_mil_params<double>({8, 4, 2}, 6);
  const Mat<double> x = random_matrix<double>(4, 8, 7);
  Mat<double> xx(8, 8);
  xx << x, x;
  EXPECT_LT((attention_mil_forward(xx, p).logits - attention_mil_forward(x, p).logits).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(AttentionMil, GradientMatchesFiniteDifferences) {
  auto p = init_attention_mil_params<double>({8, 5, 2}, 8);
  perturb(p, 9);
  const Mat<double> x = random_matrix<double>(5, 8, 10);
  auto grad = zeros_like(p);
  attention_mil_loss_and_gradient(x, kTinyLabels, p, grad);
  const double err = max_gradient_error<AttentionMilParams<double>>(
      p, grad, [&](const AttentionMilParams<double>& q) {
        return bce_loss(attention_mil_forward(x, q).logits, kTinyLabels).loss;
      });
  EXPECT_LE(err, 1e-4);
}

TEST(MeanPool, GoldenLogitOracleAndGradient) {
  const Mat<double> x = random_matrix<double>(5, 768, 0);
  EXPECT_NEAR(mean_pool_forward(x, init_mean_pool_params<double>({}, 0))(0), -0.88830580348996901, 1e-10);
  auto p = init_mean_pool_params<double>({8, 2}, 1);
  perturb(p, 2);
  const Mat<double> y = random_matrix<double>(5, 8, 3);
  EXPECT_LT(max_abs_diff(mean_pool_forward(y, p), reference::mean_pool_logits(y, p)), 1e-12);
  auto grad = zeros_like(p);
  mean_pool_loss_and_gradient(y, kTinyLabels, p, grad);
  const double err = max_gradient_error<MeanPoolParams<double>>(
      p, grad, [&](const MeanPoolParams<double>& q) { return bce_loss(mean_pool_forward(y, q), kTinyLabels).loss; });
  EXPECT_LE(err, 1e-4);
}

TEST(MeanPool, IdenticalPatchesEqualSinglePatch) {
  const auto p = init_mean_pool_params<double>({8, 1}, 4);
  const Mat<double> one = random_matrix<double>(1, 8, 5);
  const Mat<double> many = one.replicate(6, 1);
  EXPECT_NEAR(mean_pool_forward(many, p)(0), mean_pool_forward(one, p)(0), 1e-14);
}

TEST(Bce, Examples) {
  RowVec<double> z(1);
  z << 0.0;
  EXPECT_NEAR(bce_loss(z, {TargetValue(true)}).loss, std::log(2.0), 1e-15);
  z << 50.0;
  const auto big = bce_loss(z, {TargetValue(false)});
  EXPECT_TRUE(std::isfinite(big.loss));
  EXPECT_NEAR(big.loss, 50.0, 1e-12);
  z << -800.0;
  EXPECT_NEAR(bce_loss(z, {TargetValue(true)}).loss, 800.0, 1e-9);
  RowVec<double> two(2);
  two << 0.0, 99.0;
  const auto masked = bce_loss(two, {TargetValue(true), TargetValue()});
  EXPECT_NEAR(masked.loss, std::log(2.0), 1e-15);
  EXPECT_EQ(masked.grad(1), 0.0);
  EXPECT_NEAR(masked.grad(0), -0.5, 1e-15);
  EXPECT_THROW(bce_loss(two, {TargetValue(), TargetValue()}), MaskedOutError);
  EXPECT_THROW(bce_loss(two, {TargetValue(true)}), DimensionError);
}

TEST(Checkpoint, RoundTripPreservesFloatTensors) {
  const auto dir = scratch_dir();
  ModelConfig c = tiny_config(Aggregation::class_token, true);
  auto p = init_model_params<float>(c, 5);
  CheckpointMeta meta{"transformer", to_json(c), 123, 0.875, 5, {{"note", "x"}}};
  const std::string path = (dir / "m.ckpt").string();
  write_checkpoint(path, p, meta);
  const auto raw = read_checkpoint(path);
  EXPECT_EQ(raw.meta.model_kind, "transformer");
  EXPECT_EQ(raw.meta.iteration, 123);
  EXPECT_EQ(raw.meta.val_auroc, 0.875);
  EXPECT_EQ(raw.meta.seed, 5u);
  EXPECT_EQ(raw.meta.extra["note"], "x");
  const ModelConfig back_cfg = model_config_from_json(raw.meta.config);
  auto q = init_model_params<float>(back_cfg, 99);
  load_tensors(q, raw);
  auto tp = p.tensors(), tq = q.tensors();
  ASSERT_EQ(tp.size(), tq.size());
  for (std::size_t i = 0; i < tp.size(); ++i) EXPECT_EQ(*tp[i].value, *tq[i].value) << tp[i].name;

  auto wrong = init_model_params<float>(tiny_config(Aggregation::global_average), 1);
  EXPECT_THROW(load_tensors(wrong, raw), ValidationError);
}

TEST(Checkpoint, CorruptionIsReported) {
  auto p = init_mean_pool_params<float>({4, 1}, 1);
  const std::string good = encode_checkpoint(p, {"mean_pool", to_json(MeanPoolConfig{4, 1})});
  EXPECT_NO_THROW(decode_checkpoint(good));
  std::string bad = good;
  bad[1] = 'X';
  try {
    decode_checkpoint(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  bad = good;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, good.size() - 2)), FormatError);
  EXPECT_THROW(decode_checkpoint(good + "zz"), FormatError);
  EXPECT_THROW(decode_checkpoint(good.substr(0, 6)), FormatError);
  EXPECT_THROW(read_checkpoint("/nonexistent/model.ckpt"), ValidationError);
}
