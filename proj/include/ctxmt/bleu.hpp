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

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ctxmt {

/// Corpus BLEU as a percentage: geometric mean of modified n-gram
/// precisions (n = 1..4) times the brevity penalty min(1, e^(1-ref/hyp)).
struct BleuReport {
  double bleu = 0.0;  // [0, 100]
  std::array<double, 4> precisions{};  // p1..p4
  double brevity_penalty = 1.0;
  int64_t hyp_len = 0;
  int64_t ref_len = 0;

  std::string summary() const;
};

/// One reference per hypothesis; tokens are compared exactly as given.
/// A zero precision at any order gives BLEU 0 unless `smooth_add_one`
/// adds one to numerator and denominator at orders 2..4.
BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                       const std::vector<std::vector<std::string>>& references,
                       bool smooth_add_one = false);

}  // namespace ctxmt
