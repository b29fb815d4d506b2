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

#include "ctxmt/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace ctxmt {

namespace {

constexpr int kMaxOrder = 4;

using Counts = std::map<std::string, int64_t>;

/// n-gram multiset of one sentence, n-grams keyed by '\x1f'-joined tokens.
Counts ngram_counts(const std::vector<std::string>& tokens, int n) {
  Counts counts;
  if (int(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + j];
    }
    counts[key] += 1;
  }
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                       const std::vector<std::vector<std::string>>& references,
                       bool smooth_add_one) {
  if (hypotheses.empty())
    throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hypotheses.size() != references.size())
    throw std::invalid_argument(
        "corpus_bleu: " + std::to_string(hypotheses.size()) +
        " hypotheses vs " + std::to_string(references.size()) + " references");

  BleuReport report;
  std::array<int64_t, kMaxOrder> matched{};
  std::array<int64_t, kMaxOrder> total{};
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    report.hyp_len += int64_t(hypotheses[i].size());
    report.ref_len += int64_t(references[i].size());
    for (int n = 1; n <= kMaxOrder; ++n) {
      Counts hyp = ngram_counts(hypotheses[i], n);
      Counts ref = ngram_counts(references[i], n);
      for (const auto& [key, count] : hyp) {
        total[size_t(n - 1)] += count;
        auto it = ref.find(key);
        if (it != ref.end())
          matched[size_t(n - 1)] += std::min(count, it->second);
      }
    }
  }

  report.brevity_penalty =
      report.hyp_len >= report.ref_len || report.hyp_len == 0
          ? 1.0
          : std::exp(1.0 - double(report.ref_len) / double(report.hyp_len));

  double log_precision_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= kMaxOrder; ++n) {
    int64_t num = matched[size_t(n - 1)];
    int64_t den = total[size_t(n - 1)];
    if (smooth_add_one && n > 1) {
      num += 1;
      den += 1;
    }
    double p = den > 0 ? double(num) / double(den) : 0.0;
    report.precisions[size_t(n - 1)] = p;
    if (p <= 0.0)
      zero = true;
    else
      log_precision_sum += std::log(p);
  }
  report.bleu = zero ? 0.0
                     : 100.0 * report.brevity_penalty *
                           std::exp(log_precision_sum / kMaxOrder);
  return report;
}

std::string BleuReport::summary() const {
  std::ostringstream os;
  os.precision(2);
  os << std::fixed << "BLEU = " << bleu << " (";
  for (size_t i = 0; i < precisions.size(); ++i)
    os << (i ? "/" : "") << 100.0 * precisions[i];
  os << ", BP = " << brevity_penalty << ", hyp_len = " << hyp_len
     << ", ref_len = " << ref_len << ")";
  return os.str();
}

}  // namespace ctxmt
