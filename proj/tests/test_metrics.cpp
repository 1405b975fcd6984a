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

#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace kvadapt;

namespace {

// Cohen's kappa with quadratic weights, computed from paired label lists.
double brute_force_qwk(const std::vector<int>& truth, const std::vector<int>& pred, int classes) {
  const double n = static_cast<double>(truth.size());
  const double norm = (classes - 1.0) * (classes - 1.0);
  double observed = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) observed += (truth[i] - pred[i]) * (truth[i] - pred[i]) / norm;
  double expected = 0.0;
  for (int a : truth)
    for (int b : pred) expected += (a - b) * (a - b) / norm;
  expected /= n;
  return 1.0 - observed / expected;
}

}  // namespace

TEST(Metrics, QwkMatchesBruteForceOnRandomTables) {
  Rng rng(11);
  int checked = 0;
  while (checked < 100) {
    std::vector<int> truth, pred;
    ConfusionMatrix cm(4);
    const int n = 5 + static_cast<int>(rng.index(60));
    for (int i = 0; i < n; ++i) {
      truth.push_back(static_cast<int>(rng.index(4)));
      pred.push_back(static_cast<int>(rng.index(4)));
      cm.add(truth.back(), pred.back());
    }
    const double oracle = brute_force_qwk(truth, pred, 4);
    if (!std::isfinite(oracle)) continue;
    EXPECT_NEAR(quadratic_weighted_kappa(cm), oracle, 1e-9);
    ++checked;
  }
}

TEST(Metrics, QwkEdgeCases) {
  EXPECT_DOUBLE_EQ(quadratic_weighted_kappa(ConfusionMatrix::from_counts({{3, 0}, {0, 4}})), 1.0);
  EXPECT_DOUBLE_EQ(quadratic_weighted_kappa(ConfusionMatrix::from_counts({{0, 3}, {4, 0}})), 1.0 - 49.0 / 25.0);
  ConfusionMatrix cm(3);
  cm.add(0, 0);
  cm.add(2, kUnparseable);
  cm.add(1, 1);
  // The unparseable output counts with weight 1, same as the worst real disagreement.
  ConfusionMatrix worst = ConfusionMatrix::from_counts({{1, 0, 0}, {0, 1, 0}, {1, 0, 0}});
  EXPECT_LT(quadratic_weighted_kappa(cm), 1.0);
  EXPECT_NEAR(quadratic_weighted_kappa(cm), 1.0 - 1.0 / (4.75 / 3), 1e-12);
  EXPECT_LT(quadratic_weighted_kappa(worst), 1.0);
}

TEST(Metrics, CancerAccuracy) {
  const auto cm = ConfusionMatrix::from_counts({{5, 0}, {5, 0}});
  EXPECT_DOUBLE_EQ(cancer_accuracy(cm, {1}), 0.0);
  EXPECT_DOUBLE_EQ(accuracy(cm), 0.5);
  EXPECT_TRUE(std::isnan(cancer_accuracy(ConfusionMatrix::from_counts({{5, 0}, {0, 0}}), {1})));
  EXPECT_THROW(cancer_accuracy(cm, {2}), Error);
}

TEST(Metrics, MacroScoresHandExample) {
  // Class 0: tp 3, predicted 4, truth 5. Class 1: tp 2, predicted 2, truth 3. Class 2: tp 1, predicted 3, truth 1.
  ConfusionMatrix cm = ConfusionMatrix::from_counts({{3, 0, 2}, {1, 2, 0}, {0, 0, 1}});
  const auto m = macro_precision_recall_f1(cm);
  const double p[] = {3.0 / 4, 1.0, 1.0 / 3}, r[] = {3.0 / 5, 2.0 / 3, 1.0};
  double f1 = 0.0;
  for (int c = 0; c < 3; ++c) f1 += 2 * p[c] * r[c] / (p[c] + r[c]);
  EXPECT_NEAR(m.precision, (p[0] + p[1] + p[2]) / 3, 1e-12);
  EXPECT_NEAR(m.recall, (r[0] + r[1] + r[2]) / 3, 1e-12);
  EXPECT_NEAR(m.f1, f1 / 3, 1e-12);
}

TEST(Metrics, MacroAveragesOnlyClassesInTheTruth) {
  const auto m = macro_precision_recall_f1(ConfusionMatrix::from_counts({{4, 0}, {0, 0}}));
  EXPECT_DOUBLE_EQ(m.f1, 1.0);
  ConfusionMatrix cm(2);
  cm.add(0, kUnparseable);
  cm.add(1, 1);
  const auto u = macro_precision_recall_f1(cm);
  EXPECT_DOUBLE_EQ(u.recall, 0.5);
  EXPECT_DOUBLE_EQ(u.precision, 0.5);
}

TEST(Metrics, LabelMatchingNormalizes) {
  const std::vector<std::string> labels{"low grade", "high grade"};
  EXPECT_EQ(match_label("  High   Grade ", labels), 1);
  EXPECT_EQ(match_label("grade", labels), kUnparseable);
  EXPECT_EQ(match_label("", labels), kUnparseable);
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add(2, 0), Error);
  EXPECT_THROW(cm.add(0, 5), Error);
  EXPECT_THROW(ConfusionMatrix::from_counts({{1, 2}, {3}}), Error);
}

TEST(Metrics, SummaryRow) {
  ConfusionMatrix cm(2);
  cm.add(0, 0);
  cm.add(1, kUnparseable);
  const auto row = summarize("t", cm, {1});
  EXPECT_EQ(row.n, 2);
  EXPECT_EQ(row.unparseable, 1);
  EXPECT_DOUBLE_EQ(row.acc, 0.5);
  EXPECT_DOUBLE_EQ(row.acc_cancer, 0.0);
}
