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

#include <Eigen/SVD>

#include "test_util.hpp"

using namespace kvadapt;

namespace {

template <typename T>
void randomize_b(LoraAdapter<T>& a, Rng& rng) {
  a.B.value = gaussian<T>(a.B.value.rows(), a.B.value.cols(), 0.05, rng);
}

BackboneConfig config() { return kvtest::tiny_config(12); }

}  // namespace

TEST(Lora, RankBoundsAndTargets) {
  EXPECT_THROW(init_adapter<float>(8, 8, 0, 1.0, 1), Error);
  EXPECT_THROW(init_adapter<float>(8, 4, 5, 1.0, 1), Error);
  EXPECT_THROW(init_adapter<float>(8, 8, 2, 1.0, 1, 0.0, {Component::kEncoder, 0, 'o'}), Error);
  auto a = init_adapter<float>(8, 6, 2, 4.0, 1);
  EXPECT_EQ(a.param_count(), 8u * 2 + 2u * 6);
  EXPECT_FLOAT_EQ(a.scaling(), 2.0f);
}

TEST(Lora, ZeroAtInitIsExact) {
  Rng rng(1);
  const Matrix<float> x = gaussian<float>(5, 8, 1.0, rng), w = gaussian<float>(8, 8, 1.0, rng);
  auto a = init_adapter<float>(8, 8, 4, 8.0, 2);
  EXPECT_EQ(effective_delta(a), Matrix<float>::Zero(8, 8));
  EXPECT_EQ(adapted_forward(x, w, a, false), Matrix<float>(x * w));
}

TEST(Lora, MergeRoundTrip) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix<float> w = gaussian<float>(16, 16, 0.02, rng);
    auto a = init_adapter<float>(16, 16, 6, 12.0, rng.next_u64());
    randomize_b(a, rng);
    EXPECT_LE((unmerge(merge(w, a), a) - w).cwiseAbs().maxCoeff(), 1e-6f);
  }
  auto a = init_adapter<float>(16, 16, 6, 12.0, 1);
  EXPECT_THROW(merge(Matrix<float>(16, 8), a), Error);
}

TEST(Lora, EffectiveDeltaHasRankAtMostR) {
  Rng rng(3);
  for (int r : {1, 3, 6}) {
    auto a = init_adapter<double>(16, 12, r, 2.0 * r, rng.next_u64());
    randomize_b(a, rng);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(effective_delta(a));
    const auto s = svd.singularValues();
    EXPECT_GT(s(r - 1) / s(0), 1e-6);
    EXPECT_LE(s(r) / s(0), 1e-8) << "rank " << r;
  }
}

TEST(Lora, MergedEncoderMatchesUnmergedForward) {
  const auto c = config();
  auto b = BackboneBundle<float>::init(c, 4);
  Rng rng(5);
  LoraSet<float> set = make_lora_set<float>(Component::kEncoder, c.n_layers_v, c.d_v, LoraHyper{}, rng);
  for (auto& a : set.adapters) randomize_b(a, rng);
  const Matrix<float> patches = gaussian<float>(2 * c.num_patches(), c.patch_dim(), 0.5, rng);

  Tape<float> t1;
  ForwardContext<float> ctx{&set, false, nullptr};
  const Matrix<float> unmerged = t1.value(b.encoder.forward(t1, patches, 2, ctx));

  auto merged_bundle = b;
  for (const auto& a : set.adapters) {
    auto& blk = merged_bundle.encoder.blocks[static_cast<std::size_t>(a.target.layer)];
    Linear<float>& lin = a.target.matrix == 'q' ? blk.q : a.target.matrix == 'k' ? blk.k : blk.v;
    lin.weight.value = merge(lin.weight.value, a);
  }
  Tape<float> t2;
  ForwardContext<float> plain;
  const Matrix<float> merged = t2.value(merged_bundle.encoder.forward(t2, patches, 2, plain));
  EXPECT_LE((merged - unmerged).cwiseAbs().maxCoeff(), 1e-5f);
  EXPECT_GT((unmerged - t2.value(b.encoder.forward(t2, patches, 2, plain))).cwiseAbs().maxCoeff(), 0.0f);
}

TEST(Lora, DropoutOnlyInTraining) {
  Rng rng(6);
  const Matrix<float> x = gaussian<float>(64, 8, 1.0, rng), w = gaussian<float>(8, 8, 1.0, rng);
  auto a = init_adapter<float>(8, 8, 4, 8.0, 2, 0.5);
  randomize_b(a, rng);
  EXPECT_EQ(adapted_forward(x, w, a, false), adapted_forward(x, w, a, false));
  Rng r1(1);
  EXPECT_NE(adapted_forward(x, w, a, true, &r1), adapted_forward(x, w, a, false));
  EXPECT_THROW(adapted_forward(x, w, a, true, nullptr), Error);
  Rng r2(9);
  const Matrix<float> m = dropout_mask<float>(200, 200, 0.25, r2);
  EXPECT_NEAR(m.mean(), 1.0, 0.02);
}

TEST(Lora, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  for (int point = 0; point < 10; ++point) {
    auto a = init_adapter<double>(6, 5, 2, 4.0, rng.next_u64());
    a.B.value = gaussian<double>(2, 5, 1.0, rng);
    a.A.value = gaussian<double>(6, 2, 1.0, rng);
    const Matrix<double> x = gaussian<double>(4, 6, 1.0, rng), w = gaussian<double>(6, 5, 1.0, rng);
    const Matrix<double> mix = gaussian<double>(4, 5, 1.0, rng);
    const double err = kvtest::gradient_error({&a.A, &a.B}, [&](Tape<double>& t) {
      Var xv = t.constant(x);
      Var y = apply_lora(t, xv, t.matmul(xv, t.constant(w)), a, false, nullptr);
      return t.mean_all(t.mul_const(t.tanh(y), mix));
    });
    EXPECT_LE(err, 1e-4) << "point " << point;
  }
}

TEST(Lora, GradientThroughFrozenTransformer) {
  const auto c = config();
  auto b = freeze(BackboneBundle<double>::init(c, 8));
  Rng rng(9);
  for (int point = 0; point < 10; ++point) {
    LoraSet<double> set = make_lora_set<double>(Component::kDecoder, c.n_layers_t, c.d_t, LoraHyper{2, 4.0, 0.0}, rng);
    for (auto& a : set.adapters) {
      a.A.value = gaussian<double>(a.A.value.rows(), a.A.value.cols(), 0.5, rng);
      a.B.value = gaussian<double>(a.B.value.rows(), a.B.value.cols(), 0.5, rng);
    }
    const Matrix<double> in = gaussian<double>(6, c.d_t, 1.0, rng);
    const std::vector<int> targets{2, 3, 4, 5, 1, 1};
    const double err = kvtest::gradient_error(set.parameters(), [&](Tape<double>& t) {
      ForwardContext<double> ctx{&set, false, nullptr};
      Var logits = b.decoder.logits(t, b.decoder.hidden(t, t.constant(in), 2, 3, ctx));
      return t.cross_entropy(logits, targets, std::vector<double>(6, 1.0 / 6));
    });
    EXPECT_LE(err, 1e-4) << "point " << point;
  }
}
