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

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "kvadapt/core/autograd.hpp"

namespace kvadapt {

enum class OptimizerKind { kAdam, kAdamW };

/// Adam, optionally with decoupled weight decay. Only parameters marked
/// trainable at step time are touched.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, OptimizerKind kind, double weight_decay = 0.01, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), kind_(kind), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    for (Parameter<T>* p : params_) {
      m_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() {
    for (Parameter<T>* p : params_) p->zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      if (!p.trainable || p.grad.size() == 0) continue;
      m_[i] = T(beta1_) * m_[i] + T(1 - beta1_) * p.grad;
      v_[i] = T(beta2_) * v_[i] + T(1 - beta2_) * p.grad.cwiseProduct(p.grad);
      if (kind_ == OptimizerKind::kAdamW) p.value -= T(lr * weight_decay_) * p.value;
      const auto denom = ((v_[i] / T(c2)).array().sqrt() + T(eps_)).matrix();
      p.value.array() -= T(lr) * (m_[i] / T(c1)).array() / denom.array();
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<Parameter<T>*> params_;
  OptimizerKind kind_;
  double weight_decay_;
  double beta1_, beta2_, eps_;
  std::vector<Matrix<T>> m_, v_;
  long t_ = 0;
};

/// Cosine decay from `base` at step 0 to 0 at `total` steps.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace kvadapt
