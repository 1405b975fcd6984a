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

// Shared helpers for the unit tests: finite-difference gradient checks and
// small fixtures.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "kvadapt/kvadapt.hpp"

namespace kvtest {

using kvadapt::Matrix;
using kvadapt::Parameter;
using kvadapt::Tape;
using kvadapt::Var;

/// Max over parameters of ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, 1e-12),
/// central differences with step h. `loss` builds a fresh tape each call.
inline double gradient_error(const std::vector<Parameter<double>*>& params,
                             const std::function<Var(Tape<double>&)>& loss, double h = 1e-6) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var l = loss(tape);
    tape.backward(l);
  }
  auto eval = [&] {
    Tape<double> tape;
    return tape.value(loss(tape))(0, 0);
  };
  double worst = 0.0;
  for (auto* p : params) {
    Matrix<double> fd(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double keep = p->value.data()[i];
      p->value.data()[i] = keep + h;
      const double up = eval();
      p->value.data()[i] = keep - h;
      const double down = eval();
      p->value.data()[i] = keep;
      fd.data()[i] = (up - down) / (2 * h);
    }
    const double denom = std::max({p->grad.norm(), fd.norm(), 1e-12});
    worst = std::max(worst, (p->grad - fd).norm() / denom);
  }
  return worst;
}

inline kvadapt::BackboneConfig tiny_config(int vocab_size) {
  kvadapt::BackboneConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.d_v = 16;
  c.d_t = 16;
  c.n_layers_v = 1;
  c.n_layers_t = 1;
  c.n_heads = 2;
  c.max_seq_len = 24;
  c.vocab_size = vocab_size;
  c.ffn_mult = 2;
  return c;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("kvadapt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace kvtest
