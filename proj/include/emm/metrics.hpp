// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "emm/errors.hpp"

namespace emm {

/// Area under the ROC curve via the rank statistic: ranks are ascending by
/// score, tied scores share their average rank, and
/// auc = (sum of positive ranks - n_pos*(n_pos+1)/2) / (n_pos*n_neg).
/// With average ranks this equals P(s+ > s-) + P(s+ = s-)/2 exactly.
inline double auc(const std::vector<double>& scores,
                  const std::vector<double>& labels) {
  size_t n = scores.size();
  if (labels.size() != n || n == 0) {
    raise(ErrorCode::usage, "auc needs equal-length nonempty inputs");
  }
  size_t n_pos = 0;
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) raise(ErrorCode::data, "auc labels must be 0/1");
    if (y == 1.0) ++n_pos;
  }
  size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    raise(ErrorCode::undefined_metric, "auc undefined with a single class");
  }
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scores[a] < scores[b];
  });
  double pos_rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // ranks i+1 .. j share the average rank of the tie group
    double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1.0) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  double np = static_cast<double>(n_pos);
  double nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct GainEntry {
  std::string task;
  double auc = 0.0;
  double reference = 0.0;  // mean of the single-task models' AUCs
  double gain = 0.0;       // auc - reference
};

/// Per-task gain of a fused model against the mean of its source models.
inline std::vector<GainEntry> gain_report(
    const std::vector<std::string>& tasks,
    const std::vector<double>& model_aucs,
    const std::vector<std::vector<double>>& single_task_aucs) {
  if (model_aucs.size() != tasks.size() ||
      single_task_aucs.size() != tasks.size()) {
    raise(ErrorCode::config, "gain report task sets do not match");
  }
  std::vector<GainEntry> report;
  for (size_t t = 0; t < tasks.size(); ++t) {
    if (single_task_aucs[t].empty()) {
      raise(ErrorCode::config, "no reference models for task " + tasks[t]);
    }
    GainEntry e;
    e.task = tasks[t];
    e.auc = model_aucs[t];
    double sum = 0.0;
    for (double a : single_task_aucs[t]) sum += a;
    e.reference = sum / static_cast<double>(single_task_aucs[t].size());
    e.gain = e.auc - e.reference;
    report.push_back(std::move(e));
  }
  return report;
}

/// Fixed-width table for terminals and logs.
inline std::string format_gain_table(const std::vector<GainEntry>& report) {
  size_t name_w = 4;
  for (const GainEntry& e : report) name_w = std::max(name_w, e.task.size());
  std::string out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-*s  %9s  %9s  %9s\n",
                static_cast<int>(name_w), "task", "auc", "reference", "gain");
  out += line;
  for (const GainEntry& e : report) {
    std::snprintf(line, sizeof(line), "%-*s  %9.5f  %9.5f  %+9.5f\n",
                  static_cast<int>(name_w), e.task.c_str(), e.auc, e.reference,
                  e.gain);
    out += line;
  }
  return out;
}

}  // namespace emm
