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
#include <cstdio>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "histomil/error.hpp"
#include "json.hpp"

namespace histomil {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 or 1

  std::size_t size() const { return scores.size(); }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
  std::size_t negatives() const { return size() - positives(); }

  void validate() const {
    if (scores.size() != labels.size())
      throw ValidationError("scored set: scores and labels differ in length");
    for (int l : labels)
      if (l != 0 && l != 1) throw ValidationError("scored set: labels must be 0 or 1");
  }
};

namespace detail {

// Groups of tied scores in descending score order: (positives, negatives).
inline std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> descending_groups(
    const ScoredSet& s) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> groups;
  for (std::size_t i = 0; i < order.size();) {
    const double v = s.scores[order[i]];
    std::size_t pos = 0, neg = 0;
    for (; i < order.size() && s.scores[order[i]] == v; ++i)
      (s.labels[order[i]] == 1 ? pos : neg)++;
    groups.push_back({v, {pos, neg}});
  }
  return groups;
}

inline void require_both_classes(const ScoredSet& s, const char* metric) {
  s.validate();
  if (s.positives() == 0 || s.negatives() == 0)
    throw UndefinedMetric(std::string(metric) + " needs both classes");
}

}  // namespace detail

// Mann-Whitney AUROC with half credit for tied positive/negative pairs.
inline double auroc(const ScoredSet& s) {
  detail::require_both_classes(s, "AUROC");
  const auto groups = detail::descending_groups(s);
  double credit = 0.0;
  double neg_below = static_cast<double>(s.negatives());
  for (const auto& [score, counts] : groups) {
    const auto [pos, neg] = counts;
    neg_below -= static_cast<double>(neg);
    credit += static_cast<double>(pos) * (neg_below + 0.5 * static_cast<double>(neg));
  }
  return credit / (static_cast<double>(s.positives()) * static_cast<double>(s.negatives()));
}

// Average precision: every positive in a tie group receives the precision
// at the end of its group.
inline double auprc(const ScoredSet& s) {
  s.validate();
  const double total_pos = static_cast<double>(s.positives());
  if (total_pos == 0) throw UndefinedMetric("AUPRC needs at least one positive");
  double tp = 0, fp = 0, ap = 0;
  for (const auto& [score, counts] : detail::descending_groups(s)) {
    tp += static_cast<double>(counts.first);
    fp += static_cast<double>(counts.second);
    if (counts.first) ap += static_cast<double>(counts.first) / total_pos * (tp / (tp + fp));
  }
  return ap;
}

struct CurvePoint {
  double x;
  double y;
};

// (FPR, TPR) vertices from (0,0) to (1,1), one per distinct threshold.
inline std::vector<CurvePoint> roc_points(const ScoredSet& s) {
  detail::require_both_classes(s, "ROC curve");
  const double p = static_cast<double>(s.positives()), n = static_cast<double>(s.negatives());
  std::vector<CurvePoint> pts{{0.0, 0.0}};
  double tp = 0, fp = 0;
  for (const auto& [score, counts] : detail::descending_groups(s)) {
    tp += static_cast<double>(counts.first);
    fp += static_cast<double>(counts.second);
    pts.push_back({fp / n, tp / p});
  }
  return pts;
}

// (recall, precision) vertices, one per distinct threshold.
inline std::vector<CurvePoint> pr_points(const ScoredSet& s) {
  detail::require_both_classes(s, "PR curve");
  const double p = static_cast<double>(s.positives());
  std::vector<CurvePoint> pts;
  double tp = 0, fp = 0;
  for (const auto& [score, counts] : detail::descending_groups(s)) {
    tp += static_cast<double>(counts.first);
    fp += static_cast<double>(counts.second);
    pts.push_back({tp / p, tp / (tp + fp)});
  }
  return pts;
}

inline double trapezoid(const std::vector<CurvePoint>& pts) {
  double area = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].x - pts[i - 1].x) * (pts[i].y + pts[i - 1].y) * 0.5;
  return area;
}

struct Confusion {
  double threshold = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  // nullopt where the rate is 0/0.
  std::optional<double> sensitivity, specificity, precision, npv, f1;
};

inline std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

// Predict positive iff score >= threshold.
inline Confusion confusion(const ScoredSet& s, double threshold) {
  s.validate();
  Confusion c;
  c.threshold = threshold;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool pred = s.scores[i] >= threshold;
    if (s.labels[i] == 1) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  c.sensitivity = ratio(c.tp, c.tp + c.fn);
  c.specificity = ratio(c.tn, c.tn + c.fp);
  c.precision = ratio(c.tp, c.tp + c.fp);
  c.npv = ratio(c.tn, c.tn + c.fn);
  c.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  return c;
}

// Largest threshold whose sensitivity is still >= target.
inline double threshold_for_sensitivity(const ScoredSet& s, double target = 0.95) {
  s.validate();
  std::vector<double> pos;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.labels[i] == 1) pos.push_back(s.scores[i]);
  if (pos.empty()) throw UndefinedMetric("threshold_for_sensitivity needs a positive");
  std::sort(pos.begin(), pos.end(), std::greater<>());
  const std::size_t p = pos.size();
  std::size_t k = 1;
  while (k < p && !(static_cast<double>(k) / static_cast<double>(p) >= target)) ++k;
  return pos[k - 1];
}

struct GmeanThreshold {
  double threshold;
  double gmean;
};

// Distinct score maximizing sqrt(sensitivity * specificity); ties go to the
// higher threshold.
inline GmeanThreshold gmean_threshold(const ScoredSet& s) {
  detail::require_both_classes(s, "gmean threshold");
  const double p = static_cast<double>(s.positives()), n = static_cast<double>(s.negatives());
  GmeanThreshold best{0, -1};
  double tp = 0, fp = 0;
  for (const auto& [score, counts] : detail::descending_groups(s)) {
    tp += static_cast<double>(counts.first);
    fp += static_cast<double>(counts.second);
    const double g = std::sqrt((tp / p) * ((n - fp) / n));
    if (g > best.gmean) best = {score, g};
  }
  return best;
}

inline nlohmann::json to_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const Confusion& c) {
  return {{"threshold", c.threshold},     {"TP", c.tp},
          {"FP", c.fp},                   {"TN", c.tn},
          {"FN", c.fn},                   {"sensitivity", to_json(c.sensitivity)},
          {"specificity", to_json(c.specificity)}, {"precision", to_json(c.precision)},
          {"npv", to_json(c.npv)},        {"f1", to_json(c.f1)}};
}

struct LabeledConfusion {
  std::string label;
  Confusion confusion;
};

// Confusion matrices at the sensitivity-95 threshold and at 0.25/0.5/0.75.
inline std::vector<LabeledConfusion> threshold_report(const ScoredSet& s,
                                                      double target_sensitivity = 0.95) {
  std::vector<LabeledConfusion> out;
  const double t = threshold_for_sensitivity(s, target_sensitivity);
  char name[32];
  std::snprintf(name, sizeof(name), "sens%.0f", target_sensitivity * 100);
  out.push_back({name, confusion(s, t)});
  for (double fixed : {0.25, 0.5, 0.75}) {
    std::snprintf(name, sizeof(name), "%.2f", fixed);
    out.push_back({name, confusion(s, fixed)});
  }
  return out;
}

// Plain-text 2x2 matrices side by side, one per threshold.
inline std::string format_confusion_table(const std::vector<LabeledConfusion>& report) {
  auto fmt = [](const std::optional<double>& v) {
    char buf[16];
    if (v) std::snprintf(buf, sizeof(buf), "%.3f", *v);
    else std::snprintf(buf, sizeof(buf), "n/a");
    return std::string(buf);
  };
  std::string out;
  char line[256];
  for (const auto& [label, c] : report) {
    std::snprintf(line, sizeof(line), "threshold %s (t=%.4f)\n", label.c_str(), c.threshold);
    out += line;
    std::snprintf(line, sizeof(line), "              pred 0   pred 1\n");
    out += line;
    std::snprintf(line, sizeof(line), "  true 0    %7zu  %7zu\n", c.tn, c.fp);
    out += line;
    std::snprintf(line, sizeof(line), "  true 1    %7zu  %7zu\n", c.fn, c.tp);
    out += line;
    out += "  sensitivity " + fmt(c.sensitivity) + "  specificity " + fmt(c.specificity) +
           "  PPV " + fmt(c.precision) + "  NPV " + fmt(c.npv) + "\n\n";
  }
  return out;
}

// AUROC, AUPRC, F1 at 0.5 and at the gmean threshold, and the threshold
// report. gmean_selection, when given, is the set the gmean threshold is
// chosen on (e.g. validation); otherwise the evaluated set itself.
inline nlohmann::json evaluation_report(const ScoredSet& s,
                                        const ScoredSet* gmean_selection = nullptr) {
  nlohmann::json j;
  j["n"] = s.size();
  j["positives"] = s.positives();
  j["auroc"] = auroc(s);
  j["auprc"] = auprc(s);
  j["f1_at_0.5"] = to_json(confusion(s, 0.5).f1);
  const GmeanThreshold g = gmean_threshold(gmean_selection ? *gmean_selection : s);
  j["gmean_threshold"] = g.threshold;
  j["gmean_threshold_source"] = gmean_selection ? "selection_set" : "evaluation_set";
  j["f1_at_gmean"] = to_json(confusion(s, g.threshold).f1);
  j["confusion"] = nlohmann::json::array();
  for (const auto& [label, c] : threshold_report(s)) {
    nlohmann::json row = to_json(c);
    row["label"] = label;
    j["confusion"].push_back(row);
  }
  return j;
}

}  // namespace histomil
