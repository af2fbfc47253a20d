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

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "histomil/features.hpp"
#include "histomil/metrics.hpp"
#include "histomil/train.hpp"
#include "json.hpp"

namespace histomil {

// Training bags for the given targets, restricted to a patient set when one
// is given. Rows with every requested target NA are skipped.
template <class T>
std::vector<TrainingBag<T>> training_bags(const DatasetManifest& m,
                                          const std::vector<EmbeddingBag>& bags,
                                          const std::vector<std::string>& targets,
                                          const std::vector<std::string>* patients = nullptr) {
  if (bags.size() != m.rows.size())
    throw ValidationError("training_bags: manifest and bag list differ in length");
  std::vector<int> idx;
  for (const auto& t : targets) idx.push_back(m.target_index(t));
  std::set<std::string> keep;
  if (patients) keep.insert(patients->begin(), patients->end());
  std::vector<TrainingBag<T>> out;
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    const auto& row = m.rows[r];
    if (patients && !keep.count(row.patient_id)) continue;
    Labels labels;
    bool any = false;
    for (int i : idx) {
      labels.push_back(row.targets[static_cast<std::size_t>(i)]);
      any |= labels.back().has_value();
    }
    if (!any) continue;
    TrainingBag<T> b = make_training_bag<T>(bags[r], std::move(labels));
    b.patient_id = row.patient_id;
    out.push_back(std::move(b));
  }
  return out;
}

struct TargetScores {
  ScoredSet scores;
  std::optional<double> auroc, auprc;  // unset when the set lacks a class
};

template <class Model>
std::vector<TargetScores> score_targets(const Model& model,
                                        const std::vector<TrainingBag<typename Model::Scalar>>& bags) {
  std::vector<TargetScores> out;
  for (int j = 0; j < model.num_targets(); ++j) {
    TargetScores t{score_bags(model, bags, j), {}, {}};
    if (t.scores.positives() > 0 && t.scores.negatives() > 0) {
      t.auroc = auroc(t.scores);
      t.auprc = auprc(t.scores);
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <class Model>
struct FoldOutcome {
  int fold = 0;
  FoldRoles roles;
  TrainResult<Model> result;
  std::vector<TargetScores> test;
};

struct MetricSummary {
  std::vector<double> values;
  double mean = 0;
  double std = 0;
};

inline MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.mean = mean_of(values);
  s.std = stddev_of(values);
  s.values = std::move(values);
  return s;
}

inline nlohmann::json to_json(const MetricSummary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"values", s.values}};
}

// Rotating k-fold protocol stratified on the first target. Fold i trains
// with seed cfg.seed + i. make_model(fold) returns a fresh model.
template <class Model, class Factory>
std::vector<FoldOutcome<Model>> cross_validate(const DatasetManifest& m,
                                               const std::vector<EmbeddingBag>& bags,
                                               const std::vector<std::string>& targets, int k,
                                               std::uint64_t split_seed, const TrainConfig& cfg,
                                               Factory&& make_model,
                                               SplitPlan* plan_out = nullptr) {
  if (targets.empty()) throw ValidationError("cross_validate: no targets");
  const SplitPlan plan = make_folds(m, targets.front(), k, split_seed);
  if (plan_out) *plan_out = plan;
  using T = typename Model::Scalar;
  std::vector<FoldOutcome<Model>> out;
  for (int i = 0; i < plan.k(); ++i) {
    FoldOutcome<Model> f;
    f.fold = i;
    f.roles = plan.roles(i);
    const auto train = training_bags<T>(m, bags, targets, &f.roles.train);
    const auto val = training_bags<T>(m, bags, targets, &f.roles.val);
    const auto test = training_bags<T>(m, bags, targets, &f.roles.test);
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed + static_cast<std::uint64_t>(i);
    f.result = train_loop(make_model(i), train, val, fold_cfg);
    f.test = score_targets(f.result.best, test);
    out.push_back(std::move(f));
  }
  return out;
}

// Per-target mean and standard deviation over folds.
template <class Model>
nlohmann::json crossval_summary(const std::vector<FoldOutcome<Model>>& folds,
                                const std::vector<std::string>& targets) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t t = 0; t < targets.size(); ++t) {
    std::vector<double> roc, pr;
    for (const auto& f : folds) {
      if (f.test[t].auroc) roc.push_back(*f.test[t].auroc);
      if (f.test[t].auprc) pr.push_back(*f.test[t].auprc);
    }
    j[targets[t]] = {{"auroc", to_json(summarize(roc))}, {"auprc", to_json(summarize(pr))}};
  }
  return j;
}

struct SweepPoint {
  int size = 0;
  int repeat = 0;
  double test_auroc = 0;
  std::int64_t best_iteration = 0;
};

// Data-efficiency protocol: fold 0 of a stratified split is the test set,
// fold 1 validation, the rest the training pool. Each repeat draws nested
// stratified training subsets of the requested sizes from the pool.
template <class Model, class Factory>
std::vector<SweepPoint> data_efficiency_sweep(const DatasetManifest& m,
                                              const std::vector<EmbeddingBag>& bags,
                                              const std::string& target,
                                              const std::vector<int>& sizes, int repeats,
                                              std::uint64_t seed, const TrainConfig& cfg,
                                              Factory&& make_model) {
  if (repeats < 1) throw ValidationError("sweep: repeats must be >= 1");
  using T = typename Model::Scalar;
  const SplitPlan plan = make_folds(m, target, 5, seed);
  const FoldRoles roles = plan.roles(0);
  const std::vector<std::string> targets{target};
  const auto val = training_bags<T>(m, bags, targets, &roles.val);
  const auto test = training_bags<T>(m, bags, targets, &roles.test);
  const DatasetManifest pool = select_patients(m, roles.train);
  std::vector<SweepPoint> out;
  for (int r = 0; r < repeats; ++r) {
    const auto subsets = subsample_patients(pool, target, sizes, seed + 1 + static_cast<std::uint64_t>(r));
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      std::vector<std::string> ids;
      for (const auto& row : subsets[s].rows) ids.push_back(row.patient_id);
      const auto train = training_bags<T>(m, bags, targets, &ids);
      TrainConfig run_cfg = cfg;
      run_cfg.seed = cfg.seed + static_cast<std::uint64_t>(r);
      const auto res = train_loop(make_model(r), train, val, run_cfg);
      out.push_back({sizes[s], r, auroc(score_bags(res.best, test)), res.best_iteration});
    }
  }
  return out;
}

inline nlohmann::json sweep_summary(const std::vector<SweepPoint>& points) {
  std::map<int, std::vector<double>> by_size;
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& p : points) {
    by_size[p.size].push_back(p.test_auroc);
    runs.push_back({{"size", p.size},
                    {"repeat", p.repeat},
                    {"test_auroc", p.test_auroc},
                    {"best_iteration", p.best_iteration}});
  }
  nlohmann::json sizes = nlohmann::json::array();
  for (const auto& [size, v] : by_size) {
    nlohmann::json row = to_json(summarize(v));
    row["size"] = size;
    sizes.push_back(row);
  }
  return {{"runs", runs}, {"sizes", sizes}};
}

}  // namespace histomil
