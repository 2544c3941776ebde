// Copyright 2026 The Poseless Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>

#include "poseless/ops.hpp"

namespace poseless::test {

using ad::ParamStore;
using ad::Tape;
using ad::Tensor;

// Central finite differences against the tape's analytic gradients for a
// scalar-valued function of the parameters. Errors are normalized by
// max(1, |analytic|, |fd|), so O(1) gradients are compared absolutely.
inline real max_fd_rel_err(ParamStore& ps,
                           const std::function<Tensor(Tape&, ParamStore&)>& f,
                           real eps = 1e-5) {
  ps.zero_grad();
  Tape tape(ad::Mode::Recording);
  Tensor loss = f(tape, ps);
  tape.backward(loss, ps);

  auto eval = [&]() {
    Tape ng(ad::Mode::NoGrad);
    return f(ng, ps).scalar();
  };

  real worst = 0;
  for (auto& e : ps.entries) {
    for (std::size_t i = 0; i < e.grad.size(); ++i) {
      real saved = e.value->data()[i];
      e.value->data()[i] = saved + eps;
      real lp = eval();
      e.value->data()[i] = saved - eps;
      real lm = eval();
      e.value->data()[i] = saved;
      real fd = (lp - lm) / (2 * eps);
      real ga = e.grad[i];
      real err = std::abs(ga - fd) / std::max({real(1), std::abs(ga), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline std::vector<real> copy_grads(const ParamStore& ps) {
  std::vector<real> out;
  for (const auto& e : ps.entries) out.insert(out.end(), e.grad.begin(), e.grad.end());
  return out;
}

inline real max_rel_diff(const std::vector<real>& a, const std::vector<real>& b) {
  real scale = 0;
  for (real v : b) scale = std::max(scale, std::abs(v));
  scale = std::max(scale, real(1e-30));
  real worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  return worst;
}

}  // namespace poseless::test
