/*
 * Copyright 2026 The kvadapt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/** @file metrics.hpp Classification metrics over generated label strings.
 *
 * Generated text is mapped to a class by exact match after normalization.
 * Anything else lands in an extra "unparseable" column and is wrong under
 * every metric.
 */

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "kvadapt/core/error.hpp"
#include "kvadapt/task_spec.hpp"

namespace kvadapt {

inline constexpr int kUnparseable = -1;

inline int match_label(const std::string& generated, const std::vector<std::string>& labels) {
  const std::string g = normalize_text(generated);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (normalize_text(labels[i]) == g) return static_cast<int>(i);
  return kUnparseable;
}

/// Rows are ground truth, columns predictions; column C counts unparseable outputs.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : c_(classes), counts_(static_cast<std::size_t>(classes) * (classes + 1), 0) {
    require(classes >= 1, ErrorKind::kInvalidInput, "confusion matrix needs at least one class");
  }

  /// From a plain C x C table (no unparseable outputs).
  static ConfusionMatrix from_counts(const std::vector<std::vector<long>>& table) {
    ConfusionMatrix cm(static_cast<int>(table.size()));
    for (std::size_t i = 0; i < table.size(); ++i) {
      require(table[i].size() == table.size(), ErrorKind::kDimension, "confusion table must be square");
      for (std::size_t j = 0; j < table.size(); ++j) {
        require(table[i][j] >= 0, ErrorKind::kInvalidInput, "negative count");
        cm.at(static_cast<int>(i), static_cast<int>(j)) = table[i][j];
      }
    }
    return cm;
  }

  void add(int truth, int predicted) {
    require(truth >= 0 && truth < c_, ErrorKind::kInvalidInput, "ground-truth class out of range");
    require(predicted == kUnparseable || (predicted >= 0 && predicted < c_), ErrorKind::kInvalidInput,
            "predicted class out of range");
    ++at(truth, predicted == kUnparseable ? c_ : predicted);
  }

  int classes() const { return c_; }
  long& at(int truth, int column) { return counts_[static_cast<std::size_t>(truth) * (c_ + 1) + column]; }
  long at(int truth, int column) const { return counts_[static_cast<std::size_t>(truth) * (c_ + 1) + column]; }
  long unparseable(int truth) const { return at(truth, c_); }

  long row_total(int i) const {
    long s = 0;
    for (int j = 0; j <= c_; ++j) s += at(i, j);
    return s;
  }
  long column_total(int j) const {
    long s = 0;
    for (int i = 0; i < c_; ++i) s += at(i, j);
    return s;
  }
  long total() const {
    long s = 0;
    for (long v : counts_) s += v;
    return s;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int c_;
  std::vector<long> counts_;
};

inline double accuracy(const ConfusionMatrix& cm) {
  const long n = cm.total();
  if (n == 0) return 0.0;
  long hit = 0;
  for (int i = 0; i < cm.classes(); ++i) hit += cm.at(i, i);
  return static_cast<double>(hit) / static_cast<double>(n);
}

/// Accuracy over ground-truth rows in `cancer_classes` only. NaN when those rows are empty.
inline double cancer_accuracy(const ConfusionMatrix& cm, const std::vector<int>& cancer_classes) {
  long hit = 0, n = 0;
  for (int c : cancer_classes) {
    require(c >= 0 && c < cm.classes(), ErrorKind::kInvalidInput, "cancer class out of range");
    hit += cm.at(c, c);
    n += cm.row_total(c);
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(hit) / static_cast<double>(n);
}

struct MacroScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Per-class precision (0 with no predictions), recall and F1 (0 when P + R = 0),
/// averaged over the classes that occur in the ground truth.
inline MacroScores macro_precision_recall_f1(const ConfusionMatrix& cm) {
  MacroScores m;
  int included = 0;
  for (int c = 0; c < cm.classes(); ++c) {
    const long truth = cm.row_total(c);
    if (truth == 0) continue;
    const long predicted = cm.column_total(c);
    const double tp = static_cast<double>(cm.at(c, c));
    const double p = predicted == 0 ? 0.0 : tp / static_cast<double>(predicted);
    const double r = tp / static_cast<double>(truth);
    m.precision += p;
    m.recall += r;
    m.f1 += p + r == 0.0 ? 0.0 : 2 * p * r / (p + r);
    ++included;
  }
  if (included > 0) {
    m.precision /= included;
    m.recall /= included;
    m.f1 /= included;
  }
  return m;
}

/// kappa = 1 - sum(w O) / sum(w E), w_ij = (i - j)^2 / (C - 1)^2, E = outer(row, col) / N.
/// Unparseable outputs carry the maximum weight 1.
inline double quadratic_weighted_kappa(const ConfusionMatrix& cm) {
  const int c = cm.classes();
  const double n = static_cast<double>(cm.total());
  if (n == 0 || c == 1) return 1.0;
  const double norm = static_cast<double>(c - 1) * (c - 1);
  double observed = 0.0, expected = 0.0;
  for (int i = 0; i < c; ++i) {
    const double row = static_cast<double>(cm.row_total(i));
    for (int j = 0; j <= c; ++j) {
      const double w = j == c ? 1.0 : static_cast<double>(i - j) * (i - j) / norm;
      observed += w * static_cast<double>(cm.at(i, j));
      expected += w * row * static_cast<double>(cm.column_total(j)) / n;
    }
  }
  if (expected == 0.0) return observed == 0.0 ? 1.0 : 0.0;
  return 1.0 - observed / expected;
}

struct MetricRow {
  std::string task_id;
  long n = 0;
  long unparseable = 0;
  double acc = 0.0;
  double acc_cancer = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double qwk = 0.0;
};

inline MetricRow summarize(const std::string& task_id, const ConfusionMatrix& cm, const std::vector<int>& cancer) {
  MetricRow r;
  r.task_id = task_id;
  r.n = cm.total();
  for (int i = 0; i < cm.classes(); ++i) r.unparseable += cm.unparseable(i);
  r.acc = accuracy(cm);
  r.acc_cancer = cancer_accuracy(cm, cancer);
  const MacroScores m = macro_precision_recall_f1(cm);
  r.macro_precision = m.precision;
  r.macro_recall = m.recall;
  r.macro_f1 = m.f1;
  r.qwk = quadratic_weighted_kappa(cm);
  return r;
}

}  // namespace kvadapt
