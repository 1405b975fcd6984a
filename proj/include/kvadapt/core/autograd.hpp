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

/** @file autograd.hpp Reverse-mode differentiation over dense row-major matrices.
 *
 * A Tape records every operation of one forward pass. Parameters enter the
 * tape as leaves; a leaf bound to a non-trainable parameter still carries
 * gradient through the operations that consume it, but its own weight
 * gradient is never formed. Freezing a module therefore costs nothing on the
 * backward pass beyond the input gradients needed upstream.
 */

#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "kvadapt/core/error.hpp"
#include "kvadapt/core/tensor.hpp"

namespace kvadapt {

template <typename T>
struct Parameter {
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Matrix<T> v, bool train = true) : value(std::move(v)), trainable(train) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  std::size_t id = 0;
};

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter<T>& p) {
    Var v = push(p.value, p.trainable, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  T scalar(Var v) const { return nodes_[v.id].value(0, 0); }
  std::size_t size() const { return nodes_.size(); }

  /// Propagates d(loss)/d(node) backwards and accumulates into trainable parameters.
  void backward(Var loss) {
    require(value(loss).size() == 1, ErrorKind::kDimension, "backward needs a scalar loss");
    if (!requires_grad(loss)) return;
    grad_of(loss.id).setOnes();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  // ---- linear algebra ------------------------------------------------------

  Var matmul(Var a, Var b) {
    check(value(a).cols() == value(b).rows(), "matmul inner dimensions differ");
    Mat out = value(a) * value(b);
    return push(std::move(out), any(a, b), [a, b](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      if (t.requires_grad(a)) t.grad_of(a.id).noalias() += g * t.value(b).transpose();
      if (t.requires_grad(b)) t.grad_of(b.id).noalias() += t.value(a).transpose() * g;
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    check(value(a).cols() == value(b).cols(), "matmul_nt inner dimensions differ");
    Mat out = value(a) * value(b).transpose();
    return push(std::move(out), any(a, b), [a, b](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      if (t.requires_grad(a)) t.grad_of(a.id).noalias() += g * t.value(b);
      if (t.requires_grad(b)) t.grad_of(b.id).noalias() += g.transpose() * t.value(a);
    });
  }

  Var transpose(Var a) {
    Mat out = value(a).transpose();
    return push(std::move(out), any(a), [a](Tape& t, std::size_t self) {
      t.grad_of(a.id) += t.nodes_[self].grad.transpose();
    });
  }

  Var add(Var a, Var b) {
    check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add shapes differ");
    Mat out = value(a) + value(b);
    return push(std::move(out), any(a, b), [a, b](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      if (t.requires_grad(a)) t.grad_of(a.id) += g;
      if (t.requires_grad(b)) t.grad_of(b.id) += g;
    });
  }

  /// Adds a 1 x k row to every row of a.
  Var add_row(Var a, Var row) {
    check(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row shape mismatch");
    Mat out = value(a).rowwise() + value(row).row(0);
    return push(std::move(out), any(a, row), [a, row](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      if (t.requires_grad(a)) t.grad_of(a.id) += g;
      if (t.requires_grad(row)) t.grad_of(row.id) += g.colwise().sum();
    });
  }

  Var scale(Var a, T s) {
    Mat out = value(a) * s;
    return push(std::move(out), any(a), [a, s](Tape& t, std::size_t self) {
      t.grad_of(a.id) += t.nodes_[self].grad * s;
    });
  }

  /// Elementwise product with a fixed mask (dropout).
  Var mul_const(Var a, Mat mask) {
    check(mask.rows() == value(a).rows() && mask.cols() == value(a).cols(), "mask shape mismatch");
    Mat out = value(a).cwiseProduct(mask);
    return push(std::move(out), any(a), [a, mask = std::move(mask)](Tape& t, std::size_t self) {
      t.grad_of(a.id) += t.nodes_[self].grad.cwiseProduct(mask);
    });
  }

  // ---- pointwise nonlinearities --------------------------------------------

  /// Exact GeLU, x * Phi(x).
  Var gelu(Var a) {
    const Mat& x = value(a);
    Mat out = x.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); });
    return push(std::move(out), any(a), [a](Tape& t, std::size_t self) {
      const Mat& x = t.value(a);
      const T inv_sqrt_2pi = T(1.0 / std::sqrt(2.0 * std::numbers::pi));
      Mat d = x.unaryExpr([inv_sqrt_2pi](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        return cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
      t.grad_of(a.id) += t.nodes_[self].grad.cwiseProduct(d);
    });
  }

  Var tanh(Var a) {
    Mat out = value(a).array().tanh().matrix();
    return push(std::move(out), any(a), [a](Tape& t, std::size_t self) {
      const Mat& y = t.nodes_[self].value;
      Mat d = (T(1) - y.array().square()).matrix();
      t.grad_of(a.id) += t.nodes_[self].grad.cwiseProduct(d);
    });
  }

  // ---- normalization and attention -----------------------------------------

  /// Row-wise layer normalization with affine gain (1 x k) and bias (1 x k).
  Var layer_norm(Var x, Var gain, Var bias, T eps = T(1e-5)) {
    const Mat& in = value(x);
    const Eigen::Index n = in.rows();
    const Eigen::Index k = in.cols();
    Mat normalized(n, k);
    std::vector<T> inv_std(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
      const T mean = in.row(r).mean();
      const T var = (in.row(r).array() - mean).square().mean();
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(r)] = is;
      normalized.row(r) = (in.row(r).array() - mean) * is;
    }
    Mat out = (normalized.array().rowwise() * value(gain).row(0).array()).matrix();
    out.rowwise() += value(bias).row(0);
    const bool rg = any(x, gain) || requires_grad(bias);
    return push(std::move(out), rg,
                [x, gain, bias, normalized = std::move(normalized), inv_std = std::move(inv_std)](
                    Tape& t, std::size_t self) {
                  const Mat& g = t.nodes_[self].grad;
                  if (t.requires_grad(gain)) t.grad_of(gain.id) += g.cwiseProduct(normalized).colwise().sum();
                  if (t.requires_grad(bias)) t.grad_of(bias.id) += g.colwise().sum();
                  if (!t.requires_grad(x)) return;
                  Mat gx = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
                  Mat& dst = t.grad_of(x.id);
                  for (Eigen::Index r = 0; r < gx.rows(); ++r) {
                    const T m1 = gx.row(r).mean();
                    const T m2 = gx.row(r).cwiseProduct(normalized.row(r)).mean();
                    dst.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                          (gx.row(r).array() - m1 - normalized.row(r).array() * m2);
                  }
                });
  }

  /// Multi-head scaled dot-product attention over `batch` independent
  /// sequences of `length` rows each, stacked vertically.
  Var attention(Var q, Var k, Var v, Eigen::Index batch, Eigen::Index length, Eigen::Index heads, bool causal) {
    const Mat& Q = value(q);
    const Mat& K = value(k);
    const Mat& V = value(v);
    const Eigen::Index width = Q.cols();
    check(Q.rows() == batch * length && K.rows() == Q.rows() && V.rows() == Q.rows(), "attention row count");
    check(width % heads == 0 && K.cols() == width && V.cols() == width, "attention width");
    const Eigen::Index dh = width / heads;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));

    std::vector<Mat> probs(static_cast<std::size_t>(batch * heads));
    Mat out(Q.rows(), width);
    for (Eigen::Index b = 0; b < batch; ++b) {
      for (Eigen::Index h = 0; h < heads; ++h) {
        const auto qh = Q.block(b * length, h * dh, length, dh);
        const auto kh = K.block(b * length, h * dh, length, dh);
        const auto vh = V.block(b * length, h * dh, length, dh);
        Mat scores = (qh * kh.transpose()) * inv_scale;
        for (Eigen::Index i = 0; i < length; ++i) {
          const Eigen::Index visible = causal ? i + 1 : length;
          const T mx = scores.row(i).head(visible).maxCoeff();
          T total = 0;
          for (Eigen::Index j = 0; j < length; ++j) {
            const T e = j < visible ? std::exp(scores(i, j) - mx) : T(0);
            scores(i, j) = e;
            total += e;
          }
          scores.row(i) /= total;
        }
        out.block(b * length, h * dh, length, dh).noalias() = scores * vh;
        probs[static_cast<std::size_t>(b * heads + h)] = std::move(scores);
      }
    }
    const bool rg = any(q, k) || requires_grad(v);
    return push(std::move(out), rg,
                [q, k, v, batch, length, heads, dh, inv_scale, probs = std::move(probs)](Tape& t,
                                                                                         std::size_t self) {
                  const Mat& g = t.nodes_[self].grad;
                  const Mat& Q = t.value(q);
                  const Mat& K = t.value(k);
                  const Mat& V = t.value(v);
                  const bool gq = t.requires_grad(q);
                  const bool gk = t.requires_grad(k);
                  const bool gv = t.requires_grad(v);
                  for (Eigen::Index b = 0; b < batch; ++b) {
                    for (Eigen::Index h = 0; h < heads; ++h) {
                      const Mat& P = probs[static_cast<std::size_t>(b * heads + h)];
                      const auto go = g.block(b * length, h * dh, length, dh);
                      if (gv) t.grad_of(v.id).block(b * length, h * dh, length, dh).noalias() += P.transpose() * go;
                      if (!gq && !gk) continue;
                      Mat gp = go * V.block(b * length, h * dh, length, dh).transpose();
                      Mat gs = P.cwiseProduct(gp);
                      const auto row_dot = gs.rowwise().sum();
                      gs -= (P.array().colwise() * row_dot.array()).matrix();
                      gs *= inv_scale;
                      if (gq)
                        t.grad_of(q.id).block(b * length, h * dh, length, dh).noalias() +=
                            gs * K.block(b * length, h * dh, length, dh);
                      if (gk)
                        t.grad_of(k.id).block(b * length, h * dh, length, dh).noalias() +=
                            gs.transpose() * Q.block(b * length, h * dh, length, dh);
                    }
                  }
                });
  }

  /// Row-wise softmax (no masking).
  Var softmax_rows(Var a) {
    Mat out = value(a);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const T mx = out.row(r).maxCoeff();
      out.row(r) = (out.row(r).array() - mx).exp();
      out.row(r) /= out.row(r).sum();
    }
    return push(std::move(out), any(a), [a](Tape& t, std::size_t self) {
      const Mat& p = t.nodes_[self].value;
      const Mat& g = t.nodes_[self].grad;
      Mat gp = p.cwiseProduct(g);
      const auto row_dot = gp.rowwise().sum();
      gp -= (p.array().colwise() * row_dot.array()).matrix();
      t.grad_of(a.id) += gp;
    });
  }

  // ---- reshaping -----------------------------------------------------------

  /// Mean of each consecutive block of `length` rows: (batch*length) x k -> batch x k.
  Var mean_segments(Var a, Eigen::Index batch, Eigen::Index length) {
    const Mat& in = value(a);
    check(in.rows() == batch * length, "mean_segments row count");
    Mat out(batch, in.cols());
    for (Eigen::Index b = 0; b < batch; ++b) out.row(b) = in.middleRows(b * length, length).colwise().mean();
    return push(std::move(out), any(a), [a, batch, length](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      Mat& dst = t.grad_of(a.id);
      const T inv = T(1) / static_cast<T>(length);
      for (Eigen::Index b = 0; b < batch; ++b)
        dst.middleRows(b * length, length).rowwise() += g.row(b) * inv;
    });
  }

  /// Mean over all entries, producing a 1 x 1 scalar.
  Var mean_all(Var a) {
    Mat out(1, 1);
    out(0, 0) = value(a).mean();
    return push(std::move(out), any(a), [a](Tape& t, std::size_t self) {
      const T g = t.nodes_[self].grad(0, 0);
      t.grad_of(a.id).array() += g / static_cast<T>(t.value(a).size());
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_rows needs at least one input");
    Eigen::Index rows = 0;
    const Eigen::Index cols = value(parts.front()).cols();
    bool rg = false;
    for (Var p : parts) {
      check(value(p).cols() == cols, "concat_rows width mismatch");
      rows += value(p).rows();
      rg = rg || requires_grad(p);
    }
    Mat out(rows, cols);
    Eigen::Index at = 0;
    for (Var p : parts) {
      out.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    return push(std::move(out), rg, [parts](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      Eigen::Index at = 0;
      for (Var p : parts) {
        const Eigen::Index r = t.value(p).rows();
        if (t.requires_grad(p)) t.grad_of(p.id) += g.middleRows(at, r);
        at += r;
      }
    });
  }

  /// Gathers rows of an embedding table.
  Var embedding(Var table, std::vector<int> ids) {
    const Mat& tab = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), tab.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      check(ids[i] >= 0 && ids[i] < tab.rows(), "embedding id out of range");
      out.row(static_cast<Eigen::Index>(i)) = tab.row(ids[i]);
    }
    return push(std::move(out), any(table), [table, ids = std::move(ids)](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      Mat& dst = t.grad_of(table.id);
      for (std::size_t i = 0; i < ids.size(); ++i) dst.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  /// Copy of `base` with rows `rows[i]` replaced by row i of `src`.
  Var overwrite_rows(Var base, Var src, std::vector<Eigen::Index> rows) {
    check(static_cast<Eigen::Index>(rows.size()) == value(src).rows(), "overwrite_rows count");
    check(value(src).cols() == value(base).cols(), "overwrite_rows width");
    Mat out = value(base);
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) = value(src).row(static_cast<Eigen::Index>(i));
    return push(std::move(out), any(base, src), [base, src, rows = std::move(rows)](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      if (t.requires_grad(base)) {
        Mat gb = g;
        for (Eigen::Index r : rows) gb.row(r).setZero();
        t.grad_of(base.id) += gb;
      }
      if (t.requires_grad(src)) {
        Mat& dst = t.grad_of(src.id);
        for (std::size_t i = 0; i < rows.size(); ++i) dst.row(static_cast<Eigen::Index>(i)) += g.row(rows[i]);
      }
    });
  }

  // ---- losses ----------------------------------------------------------------

  /// sum_i weights[i] * CE(logits row i, targets[i]); rows with target < 0 are skipped.
  Var cross_entropy(Var logits, std::vector<int> targets, std::vector<T> weights) {
    const Mat& l = value(logits);
    check(static_cast<Eigen::Index>(targets.size()) == l.rows() && weights.size() == targets.size(),
          "cross_entropy target count");
    Mat probs(l.rows(), l.cols());
    T total = 0;
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      const int tgt = targets[static_cast<std::size_t>(r)];
      if (tgt < 0) {
        probs.row(r).setZero();
        continue;
      }
      check(tgt < l.cols(), "cross_entropy target out of range");
      const T mx = l.row(r).maxCoeff();
      probs.row(r) = (l.row(r).array() - mx).exp();
      const T z = probs.row(r).sum();
      probs.row(r) /= z;
      total += weights[static_cast<std::size_t>(r)] * (mx + std::log(z) - l(r, tgt));
    }
    Mat out(1, 1);
    out(0, 0) = total;
    return push(std::move(out), any(logits),
                [logits, targets = std::move(targets), weights = std::move(weights), probs = std::move(probs)](
                    Tape& t, std::size_t self) {
                  const T g = t.nodes_[self].grad(0, 0);
                  Mat& dst = t.grad_of(logits.id);
                  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
                    const int tgt = targets[static_cast<std::size_t>(r)];
                    if (tgt < 0) continue;
                    const T w = g * weights[static_cast<std::size_t>(r)];
                    dst.row(r) += w * probs.row(r);
                    dst(r, tgt) -= w;
                  }
                });
  }

  /// Cosine similarity of a 1 x D row against each row of an N x D matrix; N x 1.
  Var cosine_rows(Var key, Var rows) {
    const Mat& k = value(key);
    const Mat& x = value(rows);
    check(k.rows() == 1 && k.cols() == x.cols(), "cosine_rows shape mismatch");
    const T kn = k.norm();
    require(kn > T(0), ErrorKind::kDegenerateVector, "zero-norm key in cosine similarity");
    Mat out(x.rows(), 1);
    std::vector<T> xn(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      xn[static_cast<std::size_t>(r)] = x.row(r).norm();
      require(xn[static_cast<std::size_t>(r)] > T(0), ErrorKind::kDegenerateVector,
              "zero-norm vector in cosine similarity");
      out(r, 0) = k.row(0).dot(x.row(r)) / (kn * xn[static_cast<std::size_t>(r)]);
    }
    return push(std::move(out), any(key, rows), [key, rows, kn, xn = std::move(xn)](Tape& t, std::size_t self) {
      const Mat& g = t.nodes_[self].grad;
      const Mat& c = t.nodes_[self].value;
      const Mat& k = t.value(key);
      const Mat& x = t.value(rows);
      for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T n = xn[static_cast<std::size_t>(r)];
        const T gr = g(r, 0);
        const T cr = c(r, 0);
        if (t.requires_grad(key)) t.grad_of(key.id) += gr * (x.row(r) / (kn * n) - cr * k / (kn * kn));
        if (t.requires_grad(rows))
          t.grad_of(rows.id).row(r) += gr * (k.row(0) / (kn * n) - cr * x.row(r) / (n * n));
      }
    });
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void(Tape&, std::size_t)> backward;
  };

  static void check(bool ok, const char* what) { require(ok, ErrorKind::kDimension, what); }

  bool any(Var a) const { return requires_grad(a); }
  bool any(Var a, Var b) const { return requires_grad(a) || requires_grad(b); }

  template <typename Fn>
  Var push(Mat value, bool requires_grad, Fn&& backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if constexpr (!std::is_same_v<std::decay_t<Fn>, std::nullptr_t>) {
      if (requires_grad) n.backward = std::forward<Fn>(backward);
    }
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Mat& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::vector<Node> nodes_;
};

}  // namespace kvadapt
