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

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "ctxmt/bleu.hpp"
#include "ctxmt/model.hpp"

namespace ctxmt {

/// Aware decoding matches training (context path active); Agnostic
/// structurally bypasses the context encoder, making the output a pure
/// function of the source.
struct DecodeConfig {
  enum class Schema { kAware, kAgnostic };
  Schema schema = Schema::kAware;
  int beam = 4;
  double length_penalty = 0.6;
  int max_len_factor = 2;  // max output length = factor * src_len + extra
  int max_len_extra = 10;

  void validate() const {
    if (beam < 1) throw std::invalid_argument("decode: beam must be >= 1");
    if (length_penalty < 0)
      throw std::invalid_argument("decode: length penalty must be >= 0");
  }
};

/// GNMT-style length normalizer ((5 + len) / 6)^alpha; hypotheses are
/// ranked by log-prob / penalty. len counts generated tokens incl. EOS.
inline double length_penalty_factor(int len, double alpha) {
  return std::pow((5.0 + double(len)) / 6.0, alpha);
}

/// Batched next-token scorer: given hypothesis prefixes (generated ids,
/// no BOS), returns one row of vocabulary logits per prefix.
template <class S>
using StepScorer =
    std::function<std::vector<std::vector<S>>(const std::vector<IdList>&)>;

namespace detail {

template <class S>
std::vector<S> log_softmax_row(const std::vector<S>& logits) {
  S mx = logits[0];
  for (S v : logits) mx = std::max(mx, v);
  double sum = 0;
  for (S v : logits) sum += std::exp(double(v) - double(mx));
  const S log_z = S(double(mx) + std::log(sum));
  std::vector<S> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - log_z;
  return out;
}

}  // namespace detail

/// Beam search with length-penalized scoring. Candidate ordering is score
/// then hypothesis index then token id, so beam = 1 reproduces greedy
/// argmax decoding tie-for-tie.
template <class S>
IdList beam_search(const StepScorer<S>& step, int eos, const DecodeConfig& cfg,
                   int max_len) {
  cfg.validate();
  struct Hyp {
    IdList ids;
    double logp = 0;
  };
  std::vector<Hyp> live{Hyp{}};
  Hyp best_finished;
  double best_finished_score = -std::numeric_limits<double>::infinity();
  bool have_finished = false;

  for (int len = 1; len <= max_len && !live.empty(); ++len) {
    std::vector<IdList> prefixes;
    prefixes.reserve(live.size());
    for (const Hyp& h : live) prefixes.push_back(h.ids);
    std::vector<std::vector<S>> rows = step(prefixes);

    struct Cand {
      double logp;
      size_t hyp;
      int token;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * rows[0].size());
    for (size_t hi = 0; hi < live.size(); ++hi) {
      std::vector<S> lp = detail::log_softmax_row(rows[hi]);
      for (size_t v = 0; v < lp.size(); ++v)
        cands.push_back(Cand{live[hi].logp + double(lp[v]), hi, int(v)});
    }
    size_t keep = std::min(size_t(cfg.beam), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + std::ptrdiff_t(keep),
                      cands.end(), [](const Cand& a, const Cand& b) {
                        if (a.logp != b.logp) return a.logp > b.logp;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });

    std::vector<Hyp> next;
    for (size_t i = 0; i < keep; ++i) {
      const Cand& c = cands[i];
      Hyp h = live[c.hyp];
      h.ids.push_back(c.token);
      h.logp = c.logp;
      if (c.token == eos) {
        double score = h.logp / length_penalty_factor(len, cfg.length_penalty);
        if (!have_finished || score > best_finished_score) {
          best_finished = h;
          best_finished_score = score;
          have_finished = true;
        }
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }

  if (!have_finished) {
    // Ran out of length with open hypotheses: return the best live one.
    if (live.empty()) return {};
    const Hyp* best = &live[0];
    double best_score =
        live[0].logp /
        length_penalty_factor(int(live[0].ids.size()), cfg.length_penalty);
    for (const Hyp& h : live) {
      double score =
          h.logp / length_penalty_factor(int(h.ids.size()), cfg.length_penalty);
      if (score > best_score) {
        best = &h;
        best_score = score;
      }
    }
    return best->ids;
  }
  IdList out = best_finished.ids;
  if (!out.empty() && out.back() == eos) out.pop_back();
  return out;
}

/// Greedy argmax decoding (reference path; equals beam = 1).
template <class S>
IdList greedy_decode(const StepScorer<S>& step, int eos, int max_len) {
  IdList ids;
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<S>> rows = step({ids});
    const std::vector<S>& row = rows[0];
    int arg = 0;
    for (size_t v = 1; v < row.size(); ++v)
      if (row[v] > row[size_t(arg)]) arg = int(v);
    if (arg == eos) break;
    ids.push_back(arg);
  }
  return ids;
}

// ---------------------------------------------------------------------------
// model adapters

namespace detail {

/// Replicates a batch-1 representation to `n` identical rows so a beam of
/// prefixes can run as one decoder batch.
template <class S>
Rep<S> tile_rep(const Rep<S>& rep, int n) {
  if (n == 1) return rep;
  const int len = rep.h.dim(1), d = rep.h.dim(2);
  Tensor<S> h = Tensor<S>::zeros({n, len, d});
  for (int i = 0; i < n; ++i)
    std::copy(rep.h.value().begin(), rep.h.value().end(),
              h.value().begin() + int64_t(i) * len * d);
  Rep<S> out;
  out.h = h;
  out.mask.batch = n;
  out.mask.keys = rep.mask.keys;
  out.mask.causal = rep.mask.causal;
  out.mask.valid.resize(size_t(n) * size_t(rep.mask.keys));
  for (int i = 0; i < n; ++i)
    std::copy(rep.mask.valid.begin(), rep.mask.valid.end(),
              out.mask.valid.begin() + int64_t(i) * rep.mask.keys);
  return out;
}

}  // namespace detail

/// Encodes one triple's memory under the schema, then runs beam search
/// over full decoder re-evaluation per step (fine at desk scale).
template <class S>
IdList decode_triple(const Model<S>& model, const ContextTriple& triple,
                     const DecodeConfig& cfg) {
  cfg.validate();
  Batch batch = batch_from_triples({triple});
  RngStream unused(0);
  const bool agnostic = cfg.schema == DecodeConfig::Schema::kAgnostic;
  MemorySet<S> mem1 =
      model.build_memory(batch, /*training=*/false, unused, agnostic);

  const int max_len =
      cfg.max_len_factor * int(triple.source.size()) + cfg.max_len_extra;

  StepScorer<S> step = [&](const std::vector<IdList>& prefixes) {
    const int n = int(prefixes.size());
    std::vector<IdList> rows;
    rows.reserve(prefixes.size());
    for (const IdList& p : prefixes) {
      IdList r{Vocab::kBos};
      r.insert(r.end(), p.begin(), p.end());
      rows.push_back(std::move(r));
    }
    IdMatrix tgt_in = pad_to_matrix(rows, Vocab::kPad);
    MemorySet<S> mem;
    mem.source = detail::tile_rep(mem1.source, n);
    if (mem1.context) mem.context = detail::tile_rep(*mem1.context, n);
    Tensor<S> logits =
        model.decoder_forward(tgt_in, mem, /*training=*/false, unused);
    const int t = logits.dim(1), v = logits.dim(2);
    std::vector<std::vector<S>> out(size_t(n), std::vector<S>{});
    for (int i = 0; i < n; ++i) {
      const S* row = logits.value().data() + (int64_t(i) * t + (t - 1)) * v;
      out[size_t(i)].assign(row, row + v);
    }
    return out;
  };

  return beam_search<S>(step, Vocab::kEos, cfg, max_len);
}

template <class S>
std::vector<IdList> decode_corpus(const Model<S>& model,
                                  const std::vector<ContextTriple>& triples,
                                  const DecodeConfig& cfg) {
  std::vector<IdList> out;
  out.reserve(triples.size());
  for (const ContextTriple& t : triples)
    out.push_back(decode_triple(model, t, cfg));
  return out;
}

/// Decodes every triple and scores the detokenized hypotheses against the
/// detokenized targets. Deterministic given weights and config.
template <class S>
BleuReport evaluate_model(const Model<S>& model,
                          const std::vector<ContextTriple>& triples,
                          const Vocab& tgt_vocab, const DecodeConfig& cfg,
                          std::vector<std::string>* hypotheses_out = nullptr) {
  if (triples.empty())
    throw std::invalid_argument("evaluate: no test triples");
  std::vector<std::vector<std::string>> hyps, refs;
  hyps.reserve(triples.size());
  refs.reserve(triples.size());
  for (const ContextTriple& t : triples) {
    IdList ids = decode_triple(model, t, cfg);
    hyps.push_back(decode_to_words(tgt_vocab, ids));
    refs.push_back(decode_to_words(tgt_vocab, t.target));
    if (hypotheses_out)
      hypotheses_out->push_back(decode_ids(tgt_vocab, ids));
  }
  return corpus_bleu(hyps, refs);
}

}  // namespace ctxmt
