/* ctxmt - a desk-scale laboratory for context-aware neural machine translation.
 * Copyright (C) 2026 The ctxmt authors. All rights reserved.
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

// Test-only oracles, independent of the library's backward rules: central
// finite differences over arbitrary loss closures, and small helpers for
// randomized property checks.

#include <cmath>
#include <functional>
#include <vector>

#include "ctxmt/rng.hpp"
#include "ctxmt/tensor.hpp"

namespace ctxmt::testing {

/// Central finite difference of `loss_value` (a pure function of the
/// current parameter values) with respect to data[i].
inline double central_difference(const std::function<double()>& loss_value,
                                 double* slot, double h = 1e-5) {
  const double saved = *slot;
  *slot = saved + h;
  double up = loss_value();
  *slot = saved - h;
  double down = loss_value();
  *slot = saved;
  return (up - down) / (2.0 * h);
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int checked = 0;
};

/// Compares analytic gradients of `leaves` against central differences of
/// `loss_value`. `build_and_backward` must run a fresh tape and leave
/// gradients on the leaves; `loss_value` must recompute the scalar loss
/// from current leaf values (re-seeding any internal randomness).
/// Relative error uses |analytic - fd| / max(1, |fd|).
inline GradCheckResult check_gradients(
    const std::function<void()>& build_and_backward,
    const std::function<double()>& loss_value,
    const std::vector<Tensor<double>*>& leaves, RngStream& pick,
    int samples_per_leaf = 4, double h = 1e-5) {
  for (Tensor<double>* t : leaves) t->grad().clear();
  build_and_backward();
  GradCheckResult result;
  for (Tensor<double>* t : leaves) {
    if (t->grad().empty()) continue;  // leaf unused by this loss
    const int64_t n = t->size();
    const int64_t samples = std::min<int64_t>(samples_per_leaf, n);
    for (int64_t s = 0; s < samples; ++s) {
      int64_t i = n <= samples ? s : int64_t(pick.next_u64() % uint64_t(n));
      double analytic = t->grad()[size_t(i)];
      double fd = central_difference(loss_value, &t->value()[size_t(i)], h);
      double rel = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
      result.max_rel_err = std::max(result.max_rel_err, rel);
      ++result.checked;
    }
  }
  return result;
}

inline Tensor<double> random_tensor(Shape shape, RngStream& rng,
                                    double scale = 1.0,
                                    bool requires_grad = true) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), requires_grad);
  for (double& v : t.value()) v = (rng.uniform() * 2.0 - 1.0) * scale;
  return t;
}

}  // namespace ctxmt::testing
