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

#pragma once

#include <array>
#include <cmath>
#include <concepts>
#include <string>
#include <vector>

#include "kvadapt/backbone.hpp"
#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/tensor.hpp"

namespace kvadapt {

/// Four fully connected layers, GeLU after the first three. Maps image
/// embeddings into the decoder's input space.
template <typename T>
struct Projector {
  std::vector<Linear<T>> layers;

  /// Hidden widths default to (2, 4, 2) x out.
  static Projector init(Eigen::Index in, Eigen::Index out, Rng& rng) {
    return init(in, {2 * out, 4 * out, 2 * out}, out, rng);
  }

  static Projector init(Eigen::Index in, std::array<Eigen::Index, 3> hidden, Eigen::Index out, Rng& rng) {
    Projector p;
    Eigen::Index prev = in;
    for (Eigen::Index width : {hidden[0], hidden[1], hidden[2], out}) {
      p.layers.push_back(Linear<T>::init(prev, width, 1.0 / std::sqrt(static_cast<double>(prev)), rng));
      prev = width;
    }
    return p;
  }

  Eigen::Index in_dim() const { return layers.front().weight.value.rows(); }
  Eigen::Index out_dim() const { return layers.back().weight.value.cols(); }

  Var forward(Tape<T>& tape, Var x) {
    require(layers.size() == 4, ErrorKind::kInvalidInput, "projector must have exactly four layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].forward(tape, x);
      if (i + 1 < layers.size()) x = tape.gelu(x);
    }
    return x;
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".fc" + std::to_string(i), fn);
  }
};

template <typename T>
RowVector<T> project(const RowVector<T>& e_v, Projector<T>& p) {
  require(e_v.cols() == p.in_dim(), ErrorKind::kDimension, "projector input width mismatch");
  Tape<T> tape;
  return tape.value(p.forward(tape, tape.constant(Matrix<T>(e_v)))).row(0);
}

struct AggregateVars {
  Var embedding;  // 1 x d
  Var attention;  // 1 x n
};

/// Any trainable bag pooling usable in place of the attention aggregator.
template <typename A, typename T>
concept BagAggregator = requires(A a, Tape<T>& tape, Var bag, const std::string& prefix, const ParamVisitor<T>& fn) {
  { a.forward(tape, bag) } -> std::same_as<AggregateVars>;
  a.visit(prefix, fn);
};

/// Attention pooling: a_i = softmax_i(w . tanh(V e_i)), embedding = sum_i a_i e_i.
template <typename T>
struct AttentionAggregator {
  Parameter<T> V;  // hidden x d_v
  Parameter<T> w;  // hidden x 1

  static AttentionAggregator init(Eigen::Index d_v, Eigen::Index hidden, Rng& rng) {
    AttentionAggregator a;
    a.V = Parameter<T>(gaussian<T>(hidden, d_v, 1.0 / std::sqrt(static_cast<double>(d_v)), rng));
    a.w = Parameter<T>(gaussian<T>(hidden, 1, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
    return a;
  }

  /// bag: n x d_v.
  AggregateVars forward(Tape<T>& tape, Var bag) {
    require(tape.value(bag).rows() > 0, ErrorKind::kEmptyBag, "bag is empty");
    require(tape.value(bag).cols() == V.value.cols(), ErrorKind::kDimension, "bag width mismatch");
    Var hidden = tape.tanh(tape.matmul_nt(bag, tape.param(V)));  // n x h
    Var scores = tape.matmul(hidden, tape.param(w));               // n x 1
    Var attention = tape.softmax_rows(tape.transpose(scores));     // 1 x n
    return {tape.matmul(attention, bag), attention};
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".V", V);
    fn(prefix + ".w", w);
  }
};

static_assert(BagAggregator<AttentionAggregator<float>, float>);

template <typename T>
struct AggregateResult {
  RowVector<T> embedding;
  std::vector<T> attention;
};

template <typename T>
AggregateResult<T> aggregate_attention(const Matrix<T>& bag, AttentionAggregator<T>& agg) {
  require(bag.rows() > 0, ErrorKind::kEmptyBag, "bag is empty");
  Tape<T> tape;
  const AggregateVars out = agg.forward(tape, tape.constant(bag));
  const auto& a = tape.value(out.attention);
  return {tape.value(out.embedding).row(0), std::vector<T>(a.data(), a.data() + a.size())};
}

/// Elementwise maximum over the bag rows.
template <typename T>
RowVector<T> aggregate_maxpool(const Matrix<T>& bag) {
  require(bag.rows() > 0, ErrorKind::kEmptyBag, "bag is empty");
  return bag.colwise().maxCoeff();
}

}  // namespace kvadapt
