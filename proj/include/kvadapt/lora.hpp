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

/** @file lora.hpp Low-rank additive deltas on attention projections.
 *
 * An adapter holds A (d x r) and B (r x k) and contributes
 * (alpha / r) * A * B to a frozen d x k projection W. B starts at zero, so a
 * fresh adapter leaves the host layer's output unchanged.
 */

#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/tensor.hpp"

namespace kvadapt {

enum class Component { kEncoder, kDecoder };

inline std::string to_string(Component c) { return c == Component::kEncoder ? "encoder" : "decoder"; }

inline Component parse_component(const std::string& s) {
  if (s == "encoder") return Component::kEncoder;
  if (s == "decoder") return Component::kDecoder;
  throw Error(ErrorKind::kSchema, "unknown component '" + s + "'");
}

struct LoraTarget {
  Component component = Component::kEncoder;
  int layer = 0;
  char matrix = 'q';

  std::string name() const { return to_string(component) + ".layer" + std::to_string(layer) + "." + matrix; }
  auto tie() const { return std::tie(component, layer, matrix); }
  bool operator<(const LoraTarget& o) const { return tie() < o.tie(); }
  bool operator==(const LoraTarget& o) const { return tie() == o.tie(); }
};

struct LoraHyper {
  int rank = 6;
  double alpha = 12.0;
  double dropout = 0.1;
};

template <typename T>
struct LoraAdapter {
  Parameter<T> A;
  Parameter<T> B;
  int rank = 6;
  double alpha = 12.0;
  double dropout = 0.1;
  LoraTarget target;

  Eigen::Index in_dim() const { return A.value.rows(); }
  Eigen::Index out_dim() const { return B.value.cols(); }
  T scaling() const { return static_cast<T>(alpha / rank); }
  std::size_t param_count() const { return static_cast<std::size_t>(A.value.size() + B.value.size()); }
};

/// A ~ N(0, 0.02), B = 0.
template <typename T>
LoraAdapter<T> init_adapter(Eigen::Index d, Eigen::Index k, int rank, double alpha, std::uint64_t seed,
                            double dropout = 0.1, LoraTarget target = {}) {
  require(rank >= 1 && rank <= std::min(d, k), ErrorKind::kInvalidRank,
          "rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(d, k)) + "]");
  require(target.matrix == 'q' || target.matrix == 'k' || target.matrix == 'v', ErrorKind::kInvalidInput,
          "LoRA targets must be q, k or v projections");
  Rng rng(seed);
  LoraAdapter<T> a;
  a.A = Parameter<T>(gaussian<T>(d, rank, 0.02, rng));
  a.B = Parameter<T>(Matrix<T>::Zero(rank, k));
  a.rank = rank;
  a.alpha = alpha;
  a.dropout = dropout;
  a.target = target;
  return a;
}

template <typename T>
Matrix<T> effective_delta(const LoraAdapter<T>& a) {
  return a.scaling() * (a.A.value * a.B.value);
}

template <typename T>
Matrix<T> merge(const Matrix<T>& w, const LoraAdapter<T>& a) {
  require(w.rows() == a.in_dim() && w.cols() == a.out_dim(), ErrorKind::kDimension, "merge shape mismatch");
  return w + effective_delta(a);
}

template <typename T>
Matrix<T> unmerge(const Matrix<T>& merged, const LoraAdapter<T>& a) {
  require(merged.rows() == a.in_dim() && merged.cols() == a.out_dim(), ErrorKind::kDimension,
          "unmerge shape mismatch");
  return merged - effective_delta(a);
}

/// Inverted-dropout mask: zero with probability p, else 1/(1-p).
template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Matrix<T> mask(rows, cols);
  const T keep = p >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? T(0) : keep;
  return mask;
}

/// x * W + (alpha / r) * (dropout(x) * A) * B, with dropout only in training mode.
template <typename T>
Matrix<T> adapted_forward(const Matrix<T>& x, const Matrix<T>& w, const LoraAdapter<T>& a, bool training,
                          Rng* rng = nullptr) {
  require(x.cols() == w.rows() && w.rows() == a.in_dim() && w.cols() == a.out_dim(), ErrorKind::kDimension,
          "adapted_forward shape mismatch");
  Matrix<T> base = x * w;
  if (training && a.dropout > 0.0) {
    require(rng != nullptr, ErrorKind::kInvalidInput, "training-mode dropout needs an Rng");
    const Matrix<T> xd = x.cwiseProduct(dropout_mask<T>(x.rows(), x.cols(), a.dropout, *rng));
    return base + a.scaling() * ((xd * a.A.value) * a.B.value);
  }
  return base + a.scaling() * ((x * a.A.value) * a.B.value);
}

/// Adds the LoRA branch to an already computed x * W on the tape.
template <typename T>
Var apply_lora(Tape<T>& tape, Var x, Var xw, LoraAdapter<T>& a, bool training, Rng* rng) {
  Var in = x;
  if (training && a.dropout > 0.0) {
    require(rng != nullptr, ErrorKind::kInvalidInput, "training-mode dropout needs an Rng");
    const auto& xv = tape.value(x);
    in = tape.mul_const(x, dropout_mask<T>(xv.rows(), xv.cols(), a.dropout, *rng));
  }
  Var low = tape.matmul(tape.matmul(in, tape.param(a.A)), tape.param(a.B));
  return tape.add(xw, tape.scale(low, a.scaling()));
}

/// One adapter per (layer, q/k/v) target of a backbone component.
template <typename T>
struct LoraSet {
  std::vector<LoraAdapter<T>> adapters;

  LoraAdapter<T>* find(const LoraTarget& t) {
    for (auto& a : adapters)
      if (a.target == t) return &a;
    return nullptr;
  }

  LoraAdapter<T>* find(Component c, int layer, char m) { return find(LoraTarget{c, layer, m}); }

  void validate() const {
    std::set<LoraTarget> seen;
    for (const auto& a : adapters) {
      require(a.target.matrix == 'q' || a.target.matrix == 'k' || a.target.matrix == 'v', ErrorKind::kInvalidInput,
              "illegal LoRA target " + a.target.name());
      require(seen.insert(a.target).second, ErrorKind::kConflict, "duplicate LoRA target " + a.target.name());
    }
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& a : adapters) {
      out.push_back(&a.A);
      out.push_back(&a.B);
    }
    return out;
  }
};

/// Full set over `layers` layers of a component whose projections are width x width.
template <typename T>
LoraSet<T> make_lora_set(Component component, int layers, Eigen::Index width, const LoraHyper& hyper, Rng& rng) {
  LoraSet<T> set;
  for (int l = 0; l < layers; ++l)
    for (char m : {'q', 'k', 'v'})
      set.adapters.push_back(
          init_adapter<T>(width, width, hyper.rank, hyper.alpha, rng.next_u64(), hyper.dropout, {component, l, m}));
  return set;
}

template <typename T>
std::size_t trainable_param_count(const LoraSet<T>& s) {
  std::size_t n = 0;
  for (const auto& a : s.adapters) n += a.param_count();
  return n;
}

}  // namespace kvadapt
