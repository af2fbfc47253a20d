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
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "histomil/error.hpp"
#include "histomil/features.hpp"
#include "histomil/metrics.hpp"
#include "histomil/model/common.hpp"
#include "histomil/rng.hpp"
#include "json.hpp"

namespace histomil {

// --- optimizers --------------------------------------------------------------

enum class OptimizerKind { adamw, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "adam"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adamw") return OptimizerKind::adamw;
  if (s == "adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + s + "'");
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class P>
struct AdamState {
  P m, v;
  std::int64_t t = 0;
  std::int64_t skipped = 0;

  explicit AdamState(const P& like) : m(zeros_like(like)), v(zeros_like(like)) {}
};

namespace detail {

template <class P>
void check_finite_grads(P& grads) {
  for (const auto& t : grads.tensors())
    if (!t.value->allFinite()) throw NumericError("non-finite gradient in '" + t.name + "'");
}

template <class P>
void adam_update(P& params, P& grads, AdamState<P>& state, double lr, double coupled_wd,
                 double decoupled_wd, const AdamHyper& h) {
  try {
    check_finite_grads(grads);
  } catch (const NumericError&) {
    ++state.skipped;
    throw;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  auto pt = params.tensors();
  auto gt = grads.tensors();
  auto mt = state.m.tensors();
  auto vt = state.v.tensors();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    auto& p = *pt[i].value;
    using S = typename std::decay_t<decltype(p)>::Scalar;
    auto g = gt[i].value->array() + static_cast<S>(coupled_wd) * p.array();
    auto& m = *mt[i].value;
    auto& v = *vt[i].value;
    m.array() = static_cast<S>(h.beta1) * m.array() + static_cast<S>(1 - h.beta1) * g;
    v.array() = static_cast<S>(h.beta2) * v.array() + static_cast<S>(1 - h.beta2) * g.square();
    if (decoupled_wd != 0) p *= static_cast<S>(1.0 - lr * decoupled_wd);
    p.array() -= static_cast<S>(lr) * (m.array() / static_cast<S>(bc1)) /
                 ((v.array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(h.eps));
  }
}

}  // namespace detail

// AdamW: bias-corrected Adam step plus decoupled decay theta *= (1 - lr*wd).
// Non-finite gradients throw NumericError and leave params untouched.
template <class P>
void adamw_step(P& params, P& grads, AdamState<P>& state, double lr, double weight_decay,
                const AdamHyper& h = {}) {
  detail::adam_update(params, grads, state, lr, 0.0, weight_decay, h);
}

// Adam with L2 decay folded into the gradient.
template <class P>
void adam_step(P& params, P& grads, AdamState<P>& state, double lr, double weight_decay,
               const AdamHyper& h = {}) {
  detail::adam_update(params, grads, state, lr, weight_decay, 0.0, h);
}

// --- schedules ---------------------------------------------------------------

inline constexpr double kOneCycleStartDiv = 25.0;
inline constexpr double kOneCycleEndDiv = 1e4;

// Cosine warm-up from max_lr/25 to max_lr over warmup_frac of the steps,
// then cosine decay to max_lr/1e4.
inline double one_cycle_lr(std::int64_t step, std::int64_t total_steps, double max_lr,
                           double warmup_frac = 0.25) {
  if (total_steps <= 0) return max_lr;
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  const double start = max_lr / kOneCycleStartDiv, end = max_lr / kOneCycleEndDiv;
  const double warm = warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s <= warm) {
    if (warm <= 0) return max_lr;
    return start + (max_lr - start) * 0.5 * (1.0 - std::cos(std::numbers::pi * s / warm));
  }
  const double frac = (s - warm) / (static_cast<double>(total_steps) - warm);
  return end + (max_lr - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

struct Schedule {
  enum class Kind { constant, one_cycle } kind = Kind::constant;
  double max_lr = 1e-4;
  double warmup_frac = 0.25;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 2e-5;
  double weight_decay = 2e-5;
  int epochs = 8;
  int eval_interval = 500;
  Schedule schedule;
  std::uint64_t seed = 0;
  AdamHyper adam;
  std::optional<double> grad_clip_norm;

  double lr_at(std::int64_t step, std::int64_t total) const {
    return schedule.kind == Schedule::Kind::one_cycle
               ? one_cycle_lr(step, total, schedule.max_lr, schedule.warmup_frac)
               : lr;
  }

  void validate() const {
    if (!(lr > 0)) throw ValidationError("train config: lr must be > 0");
    if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
    if (eval_interval < 1) throw ValidationError("train config: eval_interval must be >= 1");
    if (weight_decay < 0) throw ValidationError("train config: weight_decay must be >= 0");
  }
};

// Transformer defaults: AdamW, lr = wd = 2e-5, 8 epochs.
inline TrainConfig transformer_train_config() { return {}; }

// AttentionMIL defaults: Adam, wd 1e-2, one-cycle with max_lr 1e-4, 32 epochs.
inline TrainConfig attention_mil_train_config() {
  TrainConfig c;
  c.optimizer = OptimizerKind::adam;
  c.weight_decay = 1e-2;
  c.lr = 1e-4;
  c.epochs = 32;
  c.schedule.kind = Schedule::Kind::one_cycle;
  c.schedule.max_lr = 1e-4;
  c.schedule.warmup_frac = 0.25;
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"optimizer", to_string(c.optimizer)},
                   {"lr", c.lr},
                   {"weight_decay", c.weight_decay},
                   {"epochs", c.epochs},
                   {"eval_interval", c.eval_interval},
                   {"seed", c.seed},
                   {"beta1", c.adam.beta1},
                   {"beta2", c.adam.beta2},
                   {"eps", c.adam.eps}};
  if (c.schedule.kind == Schedule::Kind::one_cycle)
    j["schedule"] = {{"kind", "one_cycle"},
                     {"max_lr", c.schedule.max_lr},
                     {"warmup_frac", c.schedule.warmup_frac}};
  else
    j["schedule"] = {{"kind", "constant"}};
  j["grad_clip_norm"] = c.grad_clip_norm ? nlohmann::json(*c.grad_clip_norm) : nlohmann::json();
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j["optimizer"]);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.eval_interval = j.value("eval_interval", c.eval_interval);
  c.seed = j.value("seed", c.seed);
  c.adam.beta1 = j.value("beta1", c.adam.beta1);
  c.adam.beta2 = j.value("beta2", c.adam.beta2);
  c.adam.eps = j.value("eps", c.adam.eps);
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    const std::string kind = s.is_string() ? s.get<std::string>() : s.value("kind", "constant");
    if (kind == "one_cycle") c.schedule.kind = Schedule::Kind::one_cycle;
    else if (kind == "constant") c.schedule.kind = Schedule::Kind::constant;
    else throw ValidationError("unknown schedule '" + kind + "'");
    if (s.is_object()) {
      c.schedule.max_lr = s.value("max_lr", c.schedule.max_lr);
      c.schedule.warmup_frac = s.value("warmup_frac", c.schedule.warmup_frac);
    }
  }
  if (j.contains("grad_clip_norm") && !j["grad_clip_norm"].is_null())
    c.grad_clip_norm = j["grad_clip_norm"].get<double>();
  c.validate();
  return c;
}

// --- data --------------------------------------------------------------------

template <class T>
struct TrainingBag {
  std::string patient_id;
  Mat<T> x;
  Labels labels;
};

template <class T>
TrainingBag<T> make_training_bag(const EmbeddingBag& bag, Labels labels) {
  return {bag.patient_id, bag.embeddings.template cast<T>(), std::move(labels)};
}

// --- cross-validation folds --------------------------------------------------

struct PatientLabel {
  std::string patient_id;
  bool positive;
};

// One label per patient for the given target; NA patients are left out.
inline std::vector<PatientLabel> patient_labels(const DatasetManifest& m,
                                                const std::string& target) {
  const int idx = m.target_index(target);
  std::vector<PatientLabel> out;
  std::map<std::string, bool> seen;
  for (const auto& row : m.rows) {
    const auto& v = row.targets[static_cast<std::size_t>(idx)];
    if (!v) continue;
    auto [it, inserted] = seen.emplace(row.patient_id, *v);
    if (inserted) out.push_back({row.patient_id, *v});
    else if (it->second != *v)
      throw ValidationError("patient '" + row.patient_id + "' has conflicting labels for " +
                            target);
  }
  return out;
}

struct FoldRoles {
  std::vector<std::string> test, val, train;
};

struct SplitPlan {
  std::vector<std::vector<std::string>> folds;

  int k() const { return static_cast<int>(folds.size()); }

  // test = fold i, validation = fold (i+1) mod k, training = the rest.
  FoldRoles roles(int i) const {
    FoldRoles r;
    const int n = k();
    r.test = folds[static_cast<std::size_t>(i)];
    r.val = folds[static_cast<std::size_t>((i + 1) % n)];
    for (int f = 0; f < n; ++f)
      if (f != i && f != (i + 1) % n)
        r.train.insert(r.train.end(), folds[static_cast<std::size_t>(f)].begin(),
                       folds[static_cast<std::size_t>(f)].end());
    return r;
  }
};

inline nlohmann::json to_json(const SplitPlan& plan) { return {{"folds", plan.folds}}; }

// Stratified round-robin: shuffled positives are dealt into folds first,
// then shuffled negatives continue from the next fold.
inline SplitPlan make_folds(const std::vector<PatientLabel>& patients, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("make_folds: k must be >= 2");
  std::vector<std::string> pos, neg;
  std::set<std::string> unique;
  for (const auto& p : patients) {
    if (!unique.insert(p.patient_id).second)
      throw DuplicateError("make_folds: patient '" + p.patient_id + "' listed twice");
    (p.positive ? pos : neg).push_back(p.patient_id);
  }
  if (static_cast<int>(pos.size()) < k || static_cast<int>(neg.size()) < k)
    throw StratificationError("make_folds: need at least " + std::to_string(k) +
                              " patients per class (have " + std::to_string(pos.size()) +
                              " positive, " + std::to_string(neg.size()) + " negative)");
  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  SplitPlan plan;
  plan.folds.resize(static_cast<std::size_t>(k));
  std::size_t slot = 0;
  for (const auto& id : pos) plan.folds[slot++ % static_cast<std::size_t>(k)].push_back(id);
  for (const auto& id : neg) plan.folds[slot++ % static_cast<std::size_t>(k)].push_back(id);
  return plan;
}

inline SplitPlan make_folds(const DatasetManifest& m, const std::string& target, int k,
                            std::uint64_t seed) {
  return make_folds(patient_labels(m, target), k, seed);
}

// Manifest restricted to the given patients (all of their rows).
inline DatasetManifest select_patients(const DatasetManifest& m,
                                       const std::vector<std::string>& patients) {
  const std::set<std::string> keep(patients.begin(), patients.end());
  DatasetManifest out;
  out.target_names = m.target_names;
  out.base_dir = m.base_dir;
  for (const auto& row : m.rows)
    if (keep.count(row.patient_id)) out.rows.push_back(row);
  return out;
}

// Nested stratified subsets: for one seed, every smaller subset is contained
// in every larger one. The positive count is round(size * pool prevalence).
inline std::vector<DatasetManifest> subsample_patients(const DatasetManifest& m,
                                                       const std::string& target,
                                                       const std::vector<int>& sizes,
                                                       std::uint64_t seed) {
  const auto patients = patient_labels(m, target);
  std::vector<std::string> pos, neg;
  for (const auto& p : patients) (p.positive ? pos : neg).push_back(p.patient_id);
  Rng rng(seed);
  rng.shuffle(pos);
  rng.shuffle(neg);
  const double prevalence =
      patients.empty() ? 0.0 : static_cast<double>(pos.size()) / static_cast<double>(patients.size());
  std::vector<DatasetManifest> out;
  for (int size : sizes) {
    if (size < 1 || static_cast<std::size_t>(size) > patients.size())
      throw RangeError("subsample_patients: size " + std::to_string(size) + " outside [1, " +
                       std::to_string(patients.size()) + "]");
    auto n_pos = static_cast<std::size_t>(std::llround(size * prevalence));
    n_pos = std::min(n_pos, pos.size());
    std::size_t n_neg = static_cast<std::size_t>(size) - n_pos;
    if (n_neg > neg.size()) {
      n_neg = neg.size();
      n_pos = static_cast<std::size_t>(size) - n_neg;
    }
    std::vector<std::string> chosen(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos));
    chosen.insert(chosen.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
    out.push_back(select_patients(m, chosen));
  }
  return out;
}

// --- training loop -----------------------------------------------------------

// Scores (sigmoid of the logit) for one target over the bags labelled for it.
template <class Model>
ScoredSet score_bags(const Model& model, const std::vector<TrainingBag<typename Model::Scalar>>& bags,
                     int target = 0) {
  ScoredSet s;
  for (const auto& b : bags) {
    const auto& l = b.labels[static_cast<std::size_t>(target)];
    if (!l) continue;
    const auto logits = model.logits(b.x);
    s.scores.push_back(static_cast<double>(sigmoid(static_cast<double>(logits(target)))));
    s.labels.push_back(*l ? 1 : 0);
  }
  return s;
}

// Mean AUROC over the targets that have both classes in the bag set.
template <class Model>
double mean_auroc(const Model& model, const std::vector<TrainingBag<typename Model::Scalar>>& bags) {
  double sum = 0;
  int count = 0;
  for (int j = 0; j < model.num_targets(); ++j) {
    const ScoredSet s = score_bags(model, bags, j);
    if (s.positives() == 0 || s.negatives() == 0) continue;
    sum += auroc(s);
    ++count;
  }
  if (count == 0) throw UndefinedMetric("validation set has no target with both classes");
  return sum / count;
}

struct EvalRecord {
  std::int64_t iteration;
  double val_auroc;
};

template <class Model>
struct TrainResult {
  Model best;
  std::int64_t best_iteration = 0;
  double best_val_auroc = -1;
  std::int64_t total_steps = 0;
  std::vector<double> losses;
  std::vector<EvalRecord> evaluations;
  bool aborted = false;
  std::string abort_reason;
};

template <class P>
double global_grad_norm(P& grads) {
  double sq = 0;
  for (const auto& t : grads.tensors()) sq += static_cast<double>(t.value->squaredNorm());
  return std::sqrt(sq);
}

// Batch-size-1 training. Each epoch visits the training bags in a freshly
// seeded shuffle; validation AUROC is computed every eval_interval steps and
// once more at the final step. Returns the best model (ties: earliest).
template <class Model>
TrainResult<Model> train_loop(Model model,
                              const std::vector<TrainingBag<typename Model::Scalar>>& train,
                              const std::vector<TrainingBag<typename Model::Scalar>>& val,
                              const TrainConfig& cfg) {
  using P = typename Model::Params;
  cfg.validate();
  if (train.empty() || val.empty())
    throw ValidationError("train_loop: training and validation sets must be non-empty");
  const auto d = train.front().x.cols();
  for (const auto* set : {&train, &val})
    for (const auto& b : *set)
      if (b.x.cols() != d) throw DimensionError("train_loop: inconsistent embedding dimension");

  TrainResult<Model> result;
  result.best = model;
  const std::int64_t total = static_cast<std::int64_t>(train.size()) * cfg.epochs;
  result.total_steps = total;
  result.losses.reserve(static_cast<std::size_t>(total));
  AdamState<P> state(model.params);
  Rng shuffle_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
  std::vector<std::size_t> order(train.size());

  auto evaluate = [&](std::int64_t step) {
    const double a = mean_auroc(model, val);
    result.evaluations.push_back({step, a});
    if (a > result.best_val_auroc) {
      result.best_val_auroc = a;
      result.best_iteration = step;
      result.best = model;
    }
  };

  std::int64_t step = 0;
  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      shuffle_rng.shuffle(order);
      for (std::size_t idx : order) {
        const auto& bag = train[idx];
        bool labelled = false;
        for (const auto& l : bag.labels) labelled |= l.has_value();
        P grads = zeros_like(model.params);
        double loss = 0;
        if (labelled) {
          loss = static_cast<double>(model.loss_and_gradient(bag.x, bag.labels, grads, &dropout_rng));
          if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
          if (cfg.grad_clip_norm) {
            const double norm = global_grad_norm(grads);
            if (norm > *cfg.grad_clip_norm)
              for (auto& t : grads.tensors())
                *t.value *= static_cast<typename Model::Scalar>(*cfg.grad_clip_norm / norm);
          }
          const double lr = cfg.lr_at(step, total);
          if (cfg.optimizer == OptimizerKind::adamw)
            adamw_step(model.params, grads, state, lr, cfg.weight_decay, cfg.adam);
          else
            adam_step(model.params, grads, state, lr, cfg.weight_decay, cfg.adam);
        }
        result.losses.push_back(loss);
        ++step;
        if (step % cfg.eval_interval == 0 || step == total) evaluate(step);
      }
    }
  } catch (const NumericError& e) {
    result.aborted = true;
    result.abort_reason = e.what();
    if (result.evaluations.empty()) throw;
  }
  return result;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Sample standard deviation (n - 1 denominator).
inline double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace histomil
