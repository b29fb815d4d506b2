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

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "ctxmt/checkpoint.hpp"
#include "ctxmt/model.hpp"

namespace ctxmt {

/// Inverse-square-root schedule with linear warmup:
/// scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).
inline double lr_at(int64_t step, int d_model, int64_t warmup,
                    double scale = 1.0) {
  if (step < 1)
    throw std::invalid_argument("lr_at: step must be >= 1, got " +
                                std::to_string(step));
  if (warmup < 1) throw std::invalid_argument("lr_at: warmup must be >= 1");
  double s = double(step);
  return scale * std::pow(double(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

/// Bias-corrected Adam over a parameter store. beta2 = 0.98 / eps = 1e-9
/// follow the usual warmup-schedule convention. Parameters whose names are
/// frozen are skipped entirely (moments included), so they stay bit-stable.
template <class S>
class AdamOptimizer {
 public:
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  std::set<std::string> frozen;

  int64_t step_count() const { return t_; }

  void step(ParamStore<S>& params, double lr) {
    if (slots_.size() != params.size()) slots_.resize(params.size());
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, double(t_));
    const double bc2 = 1.0 - std::pow(beta2, double(t_));
    for (size_t pi = 0; pi < params.items.size(); ++pi) {
      auto& [name, p] = params.items[pi];
      if (p.grad().empty() || frozen.count(name)) continue;
      Slot& slot = slots_[pi];
      if (slot.m.size() != p.value().size()) {
        slot.m.assign(p.value().size(), S(0));
        slot.v.assign(p.value().size(), S(0));
      }
      S* pv = p.value().data();
      const S* g = p.grad().data();
      for (size_t i = 0; i < p.value().size(); ++i) {
        if (!std::isfinite(double(g[i])))
          throw std::runtime_error("non-finite gradient in parameter " + name);
        double m = beta1 * double(slot.m[i]) + (1.0 - beta1) * double(g[i]);
        double v = beta2 * double(slot.v[i]) +
                   (1.0 - beta2) * double(g[i]) * double(g[i]);
        slot.m[i] = S(m);
        slot.v[i] = S(v);
        pv[i] = S(double(pv[i]) - lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
      }
    }
  }

 private:
  struct Slot {
    std::vector<S> m, v;
  };
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

/// Returns the pre-clip global norm; rescales gradients in place when it
/// exceeds max_norm.
template <class S>
double clip_global_norm(ParamStore<S>& params, double max_norm) {
  double sq = 0;
  for (auto& [name, p] : params.items)
    for (S g : p.grad()) sq += double(g) * double(g);
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    double r = max_norm / norm;
    for (auto& [name, p] : params.items)
      for (S& g : p.grad()) g = S(double(g) * r);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// training loop

struct TrainConfig {
  enum class Stage { kSentence, kFinetune };
  enum class Resample { kFrozen, kPerEpoch, kPerStep };

  Stage stage = Stage::kSentence;
  int64_t max_steps = 2000;
  int64_t warmup = 400;
  double lr_scale = 1.0;
  int max_tokens = 1024;
  int64_t valid_every = 200;
  int patience = 5;  // validations without improvement before stopping
  uint64_t seed = 1;
  ContextMode context_mode = ContextMode::kNone;
  RandomContextPolicy random_policy{};
  Resample resample = Resample::kPerEpoch;
  bool freeze_stage1 = false;
  int64_t log_every = 50;
  bool compute_valid_bleu = false;  // the harness evaluates separately
  double clip_norm = 5.0;
};

struct TrainResult {
  Checkpoint best;  // best-validation parameters
  double best_valid_loss = std::numeric_limits<double>::infinity();
  double final_train_loss = 0;
  int64_t steps = 0;
  std::vector<std::string> log;  // `step=.. lr=.. train_loss=..` lines
};

/// One stream per (run, role) for context construction. The Fixed sentence
/// comes from a role-independent stream, so training, validation and test
/// all see the same frozen context; Random contexts are per-role, and the
/// training role optionally advances per epoch (the resample policy).
inline RngStream context_rng(uint64_t run_seed, ContextMode mode,
                             const std::string& role,
                             TrainConfig::Resample resample, int64_t epoch) {
  RngStream root(run_seed);
  if (mode == ContextMode::kFixed) return root.fork("ctx-fixed");
  if (mode == ContextMode::kRandom) {
    if (role == "train" && resample != TrainConfig::Resample::kFrozen)
      return root.fork("ctx-train", uint64_t(epoch));
    return root.fork("ctx-" + role);
  }
  return root.fork("ctx-deterministic");  // kNone/kContext draw nothing
}

namespace detail {

inline std::string format_log_real(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace detail

/// Mean validation loss with dropout and noise off.
template <class S>
double validation_loss(const Model<S>& model,
                       const std::vector<ContextTriple>& triples,
                       int max_tokens) {
  RngStream unused(0);
  RngStream batch_rng(0);
  std::vector<Batch> batches = make_batches(triples, max_tokens, batch_rng);
  double total = 0;
  int64_t count = 0;
  for (const Batch& b : batches) {
    total += double(model.loss_on_batch(b, /*training=*/false, unused).item()) *
             double(b.triples.size());
    count += int64_t(b.triples.size());
  }
  return count ? total / double(count) : 0.0;
}

/// Teacher-forced argmax accuracy over non-PAD target tokens.
template <class S>
double token_accuracy(const Model<S>& model,
                      const std::vector<ContextTriple>& triples,
                      int max_tokens) {
  RngStream unused(0);
  RngStream batch_rng(0);
  std::vector<Batch> batches = make_batches(triples, max_tokens, batch_rng);
  int64_t hit = 0, total = 0;
  for (const Batch& b : batches) {
    MemorySet<S> mem = model.build_memory(b, false, unused);
    Tensor<S> logits = model.decoder_forward(b.target_in, mem, false, unused);
    const int v = logits.dim(-1);
    for (int64_t pos = 0; pos < b.target_out.size(); ++pos) {
      int32_t y = b.target_out.ids[size_t(pos)];
      if (y == Vocab::kPad) continue;
      const S* row = logits.value().data() + pos * v;
      int arg = 0;
      for (int j = 1; j < v; ++j)
        if (row[j] > row[arg]) arg = j;
      hit += arg == y;
      ++total;
    }
  }
  return total ? double(hit) / double(total) : 0.0;
}

/// Core loop shared by both stages: epochs of seeded shuffled batches,
/// Adam with the inverse-square-root schedule, periodic validation with
/// early stopping, best-by-validation-loss parameters retained.
template <class S>
TrainResult train_model(Model<S>& model,
                        const std::vector<EncodedDocument>& train_docs,
                        const std::vector<EncodedDocument>& valid_docs,
                        const Vocab& src_vocab, const Vocab& tgt_vocab,
                        const TrainConfig& tc) {
  RngStream root(tc.seed);
  AdamOptimizer<S> adam;
  if (tc.freeze_stage1)
    for (const auto& [name, p] : model.params.items)
      if (name.rfind("ctx.", 0) != 0) adam.frozen.insert(name);

  // Validation triples are frozen once; their context stream is separate
  // from training so per-epoch resampling cannot move them.
  RngStream valid_rng =
      context_rng(tc.seed, tc.context_mode, "valid", tc.resample, 0);
  std::vector<ContextTriple> valid_triples = make_context_triples(
      valid_docs, tc.context_mode, src_vocab, valid_rng, tc.random_policy);

  RngStream drop_rng = root.fork("dropout");
  TrainResult result;
  auto snapshot_best = model.params.snapshot();
  int64_t best_step = 0;
  int stale = 0;
  int64_t step = 0;
  double train_loss = 0;
  bool stop = false;

  auto log_line = [&](int64_t s, double lr, double loss, bool with_valid,
                      double vloss) {
    std::string line = "step=" + std::to_string(s) +
                       " lr=" + detail::format_log_real(lr) +
                       " train_loss=" + detail::format_log_real(loss);
    if (with_valid)
      line += " valid_loss=" + detail::format_log_real(vloss);
    result.log.push_back(std::move(line));
  };

  if (tc.max_steps < 1) {
    result.best = make_checkpoint(model, src_vocab, tgt_vocab, 0);
    result.best_valid_loss =
        validation_loss(model, valid_triples, tc.max_tokens);
    return result;
  }

  for (int64_t epoch = 0; !stop; ++epoch) {
    RngStream ctx_rng =
        context_rng(tc.seed, tc.context_mode, "train", tc.resample, epoch);
    std::vector<ContextTriple> triples = make_context_triples(
        train_docs, tc.context_mode, src_vocab, ctx_rng, tc.random_policy);
    RngStream batch_rng = root.fork("batch", uint64_t(epoch));
    std::vector<Batch> batches = make_batches(triples, tc.max_tokens, batch_rng);
    RngStream step_ctx_rng = root.fork("stepctx", uint64_t(epoch));

    for (Batch& batch : batches) {
      if (tc.resample == TrainConfig::Resample::kPerStep &&
          (tc.context_mode == ContextMode::kRandom)) {
        for (ContextTriple& t : batch.triples)
          t.context =
              sample_random_context(src_vocab, step_ctx_rng, tc.random_policy);
        batch = batch_from_triples(batch.triples);
      }
      ++step;
      double lr = lr_at(step, model.cfg.d_model, tc.warmup, tc.lr_scale);
      model.params.zero_grads();
      {
        Tape<S> tape;
        Tensor<S> loss = model.loss_on_batch(batch, /*training=*/true, drop_rng);
        train_loss = double(loss.item());
        if (!std::isfinite(train_loss))
          throw std::runtime_error("training diverged at step " +
                                   std::to_string(step) +
                                   " (non-finite loss)");
        backward(loss, tape);
      }
      clip_global_norm(model.params, tc.clip_norm);
      adam.step(model.params, lr);

      bool validate_now = tc.valid_every > 0 && step % tc.valid_every == 0;
      if (step % tc.log_every == 0 && !validate_now)
        log_line(step, lr, train_loss, false, 0);
      if (validate_now) {
        double vloss = validation_loss(model, valid_triples, tc.max_tokens);
        log_line(step, lr, train_loss, true, vloss);
        if (vloss < result.best_valid_loss) {
          result.best_valid_loss = vloss;
          snapshot_best = model.params.snapshot();
          best_step = step;
          stale = 0;
        } else if (++stale >= tc.patience) {
          stop = true;
        }
      }
      if (step >= tc.max_steps) stop = true;
      if (stop) break;
    }
    if (batches.empty()) break;
  }

  result.steps = step;
  result.final_train_loss = train_loss;
  if (result.best_valid_loss == std::numeric_limits<double>::infinity()) {
    // No validation ran (valid_every > max_steps); keep the final weights.
    snapshot_best = model.params.snapshot();
    best_step = step;
  }
  model.params.restore(snapshot_best);
  result.best = make_checkpoint(model, src_vocab, tgt_vocab, best_step);
  return result;
}

/// Stage 1: the sentence-level baseline. Integration mode is forced to
/// none (noise stays as configured: the Gaussian-noise system is a
/// sentence-level model trained with sigma > 0).
template <class S>
TrainResult train_stage1(ModelConfig mc,
                         const std::vector<EncodedDocument>& train_docs,
                         const std::vector<EncodedDocument>& valid_docs,
                         const Vocab& src_vocab, const Vocab& tgt_vocab,
                         TrainConfig tc) {
  mc.mode = IntegrationMode::kNone;
  mc.weight_sharing = false;
  tc.stage = TrainConfig::Stage::kSentence;
  tc.context_mode = ContextMode::kNone;
  RngStream init_rng = RngStream(tc.seed).fork("init");
  Model<S> model(mc, init_rng);
  return train_model(model, train_docs, valid_docs, src_vocab, tgt_vocab, tc);
}

/// Stage-2 initialization: attach the context machinery to a stage-1
/// checkpoint. Sentence-level parameters start exactly at their checkpoint
/// values; context encoder and integration parameters (the ctx.* names)
/// are freshly initialized.
template <class S>
Model<S> build_stage2_model(const Checkpoint& stage1, ModelConfig mc,
                            uint64_t seed) {
  if (!mc.multi_encoder())
    throw std::invalid_argument(
        "train_stage2: integration mode must be outside or inside");
  ModelConfig stage1_cfg = stage1.model_config();
  if (stage1_cfg.d_model != mc.d_model)
    throw std::invalid_argument(
        "train_stage2: checkpoint d_model " +
        std::to_string(stage1_cfg.d_model) + " does not match config " +
        std::to_string(mc.d_model));
  RngStream init_rng = RngStream(seed).fork("init2");
  Model<S> model(mc, init_rng);
  for (auto& [name, p] : model.params.items) {
    if (name.rfind("ctx.", 0) == 0) continue;  // fresh context parameters
    const Checkpoint::ParamRecord* rec = stage1.find(name);
    if (!rec)
      throw std::runtime_error("stage-1 checkpoint missing parameter " + name);
    if (rec->shape != p.shape())
      throw std::invalid_argument("stage-1 parameter " + name +
                                  " shape mismatch");
    for (size_t i = 0; i < rec->values.size(); ++i)
      p.value()[i] = S(rec->values[i]);
  }
  return model;
}

/// Stage 2: fine-tune the document-level model. All parameters train
/// jointly unless freeze_stage1 is set.
template <class S>
TrainResult train_stage2(const Checkpoint& stage1, ModelConfig mc,
                         const std::vector<EncodedDocument>& train_docs,
                         const std::vector<EncodedDocument>& valid_docs,
                         const Vocab& src_vocab, const Vocab& tgt_vocab,
                         TrainConfig tc) {
  Model<S> model = build_stage2_model<S>(stage1, mc, tc.seed);
  tc.stage = TrainConfig::Stage::kFinetune;
  return train_model(model, train_docs, valid_docs, src_vocab, tgt_vocab, tc);
}

}  // namespace ctxmt
