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
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxmt/rng.hpp"
#include "ctxmt/tensor.hpp"
#include "ctxmt/text.hpp"

namespace ctxmt {

// Transformer encoder-decoder (post-layer-norm, sinusoidal positions)
// plus the multi-encoder integration paths: a context encoder whose first
// N-1 blocks can alias the source encoder, Outside integration (source
// attends over context, gated sum before the decoder), Inside integration
// (dual cross-attention fused by a gate in every decoder layer), and a
// Gaussian noise injector on the encoder output.

enum class IntegrationMode { kNone, kSingleEncoder, kOutside, kInside };

const char* to_string(IntegrationMode mode);
IntegrationMode integration_mode_from_string(const std::string& name);

struct ModelConfig {
  int d_model = 64;
  int num_heads = 4;
  int d_ff = 256;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int context_encoder_layers = 1;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  int max_positions = 256;
  int src_vocab = 0;
  int tgt_vocab = 0;
  IntegrationMode mode = IntegrationMode::kNone;
  double sigma = 0.0;
  bool weight_sharing = false;
  bool tied_embeddings = false;  // share the source/target tables

  bool multi_encoder() const {
    return mode == IntegrationMode::kOutside ||
           mode == IntegrationMode::kInside;
  }

  /// Rejects impossible combinations (also the compose-modes check): a
  /// multi-encoder mode without a context encoder, weight sharing without
  /// a context encoder or deeper than the source stack, etc.
  void validate() const;

  /// Desk-scale defaults used by the tests and the harness.
  static ModelConfig toy(int src_vocab, int tgt_vocab);
  /// Transformer-base shape (512/8/2048, 6+6 layers).
  static ModelConfig base(int src_vocab, int tgt_vocab);

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static ModelConfig from_kv(
      const std::vector<std::pair<std::string, std::string>>& kv);
};

// ---------------------------------------------------------------------------
// parameter store

template <class S>
struct ParamStore {
  std::vector<std::pair<std::string, Tensor<S>>> items;
  std::unordered_map<std::string, size_t> index;

  Tensor<S> add(const std::string& name, Tensor<S> t) {
    if (index.count(name))
      throw std::logic_error("duplicate parameter name: " + name);
    index.emplace(name, items.size());
    items.emplace_back(name, t);
    return t;
  }

  Tensor<S>* find(const std::string& name) {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &items[it->second].second;
  }
  const Tensor<S>* find(const std::string& name) const {
    auto it = index.find(name);
    return it == index.end() ? nullptr : &items[it->second].second;
  }

  size_t size() const { return items.size(); }

  void zero_grads() {
    for (auto& [name, t] : items) t.grad().clear();
  }

  /// Named value copies (used for best-checkpoint snapshots).
  std::vector<std::pair<std::string, std::vector<S>>> snapshot() const {
    std::vector<std::pair<std::string, std::vector<S>>> out;
    out.reserve(items.size());
    for (const auto& [name, t] : items) out.emplace_back(name, t.value());
    return out;
  }

  void restore(const std::vector<std::pair<std::string, std::vector<S>>>& snap) {
    for (const auto& [name, vals] : snap) {
      Tensor<S>* t = find(name);
      if (!t || t->value().size() != vals.size())
        throw std::runtime_error("snapshot restore mismatch for " + name);
      t->value() = vals;
    }
  }
};

// ---------------------------------------------------------------------------
// weight bundles

template <class S>
struct LinearW {
  Tensor<S> w;  // [in, out]
  Tensor<S> b;  // [out]
};

template <class S>
struct AttentionW {
  LinearW<S> q, k, v, o;
};

template <class S>
struct LayerNormW {
  Tensor<S> gamma, beta;
};

template <class S>
struct EncoderLayerW {
  AttentionW<S> self_attn;
  LayerNormW<S> ln1, ln2;
  LinearW<S> ff1, ff2;
};

template <class S>
struct DecoderLayerW {
  AttentionW<S> self_attn;
  AttentionW<S> cross_s;
  LinearW<S> ff1, ff2;
  LayerNormW<S> ln1, ln2, ln3;
  // Inside integration only: second cross-attention over the context
  // representation and the fusion gate.
  AttentionW<S> cross_c;
  LinearW<S> gate;
};

template <class S>
struct OutsideW {
  AttentionW<S> attn;  // query H_s, key/value H_c
  LinearW<S> gate;
};

/// Encoder output plus its key-validity mask.
template <class S>
struct Rep {
  Tensor<S> h;  // [batch, len, d_model]
  AttnMask mask;
};

/// What outside_integrate produces: the context attended by the source
/// (H_c'), the gate, and the fused representation that replaces H_s.
template <class S>
struct IntegrationOutput {
  Tensor<S> h_cprime;
  Tensor<S> gate;
  Tensor<S> fused;
};

/// a_s / a_c / gate / fused of one Inside dual cross-attention.
template <class S>
struct InsideAttention {
  Tensor<S> a_s;
  Tensor<S> a_c;
  Tensor<S> gate;
  Tensor<S> fused;
};

/// Decoder memory: the (possibly fused, possibly noised) source
/// representation, plus the context representation when the Inside path
/// is active.
template <class S>
struct MemorySet {
  Rep<S> source;
  std::optional<Rep<S>> context;
};

enum class EncoderKind { kSource, kContext, kConcat };

// ---------------------------------------------------------------------------
// free building blocks

template <class S>
Tensor<S> linear(const Tensor<S>& x, const LinearW<S>& w) {
  return add(matmul(x, w.w), w.b);
}

/// Scaled dot-product multi-head attention: per-head softmax(QK^T/sqrt(dh))V,
/// heads concatenated and projected. `mask` gives key validity (plus the
/// causal constraint for decoder self-attention).
template <class S>
Tensor<S> multi_head_attention(const AttentionW<S>& w, int num_heads,
                               const Tensor<S>& q_in, const Tensor<S>& kv_in,
                               const AttnMask& mask) {
  const int d_model = q_in.dim(-1);
  if (kv_in.dim(-1) != d_model)
    shape_error("attention: query dim " + std::to_string(d_model) +
                " vs key/value dim " + std::to_string(kv_in.dim(-1)));
  if (d_model % num_heads != 0)
    shape_error("attention: d_model " + std::to_string(d_model) +
                " not divisible by " + std::to_string(num_heads) + " heads");
  const int head_dim = d_model / num_heads;

  Tensor<S> q = split_heads(linear(q_in, w.q), num_heads);
  Tensor<S> k = split_heads(linear(kv_in, w.k), num_heads);
  Tensor<S> v = split_heads(linear(kv_in, w.v), num_heads);
  Tensor<S> scores =
      scale(matmul(q, k, /*transpose_b=*/true), 1.0 / std::sqrt(double(head_dim)));
  Tensor<S> weights = masked_softmax(scores, mask);
  Tensor<S> heads = matmul(weights, v);
  return linear(merge_heads(heads, num_heads), w.o);
}

/// Attention weights only (normalization checks in the tests).
template <class S>
Tensor<S> attention_weights(const AttentionW<S>& w, int num_heads,
                            const Tensor<S>& q_in, const Tensor<S>& kv_in,
                            const AttnMask& mask) {
  const int head_dim = q_in.dim(-1) / num_heads;
  Tensor<S> q = split_heads(linear(q_in, w.q), num_heads);
  Tensor<S> k = split_heads(linear(kv_in, w.k), num_heads);
  Tensor<S> scores =
      scale(matmul(q, k, true), 1.0 / std::sqrt(double(head_dim)));
  return masked_softmax(scores, mask);
}

/// g = sigmoid(W [a ; b] + bias); fused = g*a + (1-g)*b. With force_one
/// the gate is the exact constant 1, severing the b path.
template <class S>
std::pair<Tensor<S>, Tensor<S>> gated_sum(const LinearW<S>& gate_w,
                                          const Tensor<S>& a,
                                          const Tensor<S>& b,
                                          bool force_one = false) {
  Tensor<S> g = force_one
                    ? Tensor<S>::full(a.shape(), S(1))
                    : sigmoid(linear(concat_last(a, b), gate_w));
  Tensor<S> one = Tensor<S>::full({1}, S(1));
  Tensor<S> fused = add(mul(g, a), mul(sub(one, g), b));
  return {g, fused};
}

/// Sinusoidal position table [max_positions, d_model].
template <class S>
Tensor<S> sinusoidal_positions(int max_positions, int d_model) {
  Tensor<S> pe = Tensor<S>::zeros({max_positions, d_model});
  S* p = pe.value().data();
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      double angle = pos / std::pow(10000.0, double(i) / double(d_model));
      p[int64_t(pos) * d_model + i] = S(std::sin(angle));
      if (i + 1 < d_model)
        p[int64_t(pos) * d_model + i + 1] = S(std::cos(angle));
    }
  }
  return pe;
}

/// Key-validity mask from padded ids.
inline AttnMask pad_mask(const IdMatrix& ids, bool causal = false) {
  AttnMask m;
  m.batch = ids.rows;
  m.keys = ids.cols;
  m.causal = causal;
  m.valid.resize(size_t(ids.size()));
  for (int64_t i = 0; i < ids.size(); ++i)
    m.valid[size_t(i)] = ids.ids[size_t(i)] != Vocab::kPad;
  return m;
}

// ---------------------------------------------------------------------------
// the model

template <class S>
class Model {
 public:
  Model(ModelConfig config, RngStream& rng) : cfg(std::move(config)) {
    cfg.validate();
    if (cfg.src_vocab <= 0 || cfg.tgt_vocab <= 0)
      throw std::invalid_argument("model config: vocab sizes must be set");
    build(rng);
  }

  ModelConfig cfg;
  ParamStore<S> params;

  Tensor<S> src_embed;  // [src_vocab, d_model]
  Tensor<S> tgt_embed;  // [tgt_vocab, d_model]; also the output projection
  std::vector<EncoderLayerW<S>> enc_layers;
  std::vector<EncoderLayerW<S>> ctx_layers;  // first N-1 may alias enc_layers
  std::vector<DecoderLayerW<S>> dec_layers;
  OutsideW<S> outside;

  /// Test hook: saturate every fusion gate to the exact constant 1.
  bool force_gate_one = false;

  int shared_context_blocks() const {
    return cfg.multi_encoder() && cfg.weight_sharing
               ? cfg.context_encoder_layers - 1
               : 0;
  }

  // -- embedding ------------------------------------------------------------

  Tensor<S> embed(const IdMatrix& ids, EncoderKind side, bool training,
                  RngStream& rng) const {
    if (ids.rows == 0 || ids.cols == 0)
      throw std::invalid_argument("embed: empty batch");
    if (ids.cols > cfg.max_positions)
      throw std::invalid_argument(
          "embed: sequence length " + std::to_string(ids.cols) +
          " exceeds max_positions " + std::to_string(cfg.max_positions));
    const Tensor<S>& table =
        side == EncoderKind::kSource || side == EncoderKind::kContext ||
                side == EncoderKind::kConcat
            ? src_embed
            : tgt_embed;
    return embed_with(table, ids, training, rng);
  }

  Tensor<S> embed_target(const IdMatrix& ids, bool training,
                         RngStream& rng) const {
    if (ids.rows == 0 || ids.cols == 0)
      throw std::invalid_argument("embed: empty batch");
    if (ids.cols > cfg.max_positions)
      throw std::invalid_argument(
          "embed: sequence length " + std::to_string(ids.cols) +
          " exceeds max_positions " + std::to_string(cfg.max_positions));
    return embed_with(tgt_embed, ids, training, rng);
  }

  // -- encoders ---------------------------------------------------------

  /// Source / context / concatenated-input encoder stack. The context
  /// stack requires a multi-encoder mode and at least one layer.
  Rep<S> encode(const IdMatrix& ids, EncoderKind kind, bool training,
                RngStream& rng) const {
    if (ids.rows == 0) throw std::invalid_argument("encode: empty batch");
    const std::vector<EncoderLayerW<S>>* stack = &enc_layers;
    if (kind == EncoderKind::kContext) {
      if (!cfg.multi_encoder())
        throw std::invalid_argument(
            "context encoder called with integration mode " +
            std::string(to_string(cfg.mode)));
      if (cfg.context_encoder_layers < 1)
        throw std::invalid_argument(
            "context encoder requires context_encoder_layers >= 1");
      stack = &ctx_layers;
    }
    Rep<S> rep;
    rep.mask = pad_mask(ids);
    Tensor<S> x = embed(ids, kind, training, rng);
    for (const EncoderLayerW<S>& layer : *stack)
      x = encoder_layer(layer, x, rep.mask, training, rng);
    rep.h = x;
    return rep;
  }

  /// Gaussian noise on the encoder output: training only, non-PAD
  /// positions only; sigma = 0 leaves the representation (and the RNG)
  /// untouched.
  Rep<S> inject_noise(const Rep<S>& rep, bool training, RngStream& rng) const {
    if (!training || cfg.sigma == 0.0) return rep;
    Tensor<S> eps = gaussian_sample<S>(rep.h.shape(), cfg.sigma, rng);
    const int d = rep.h.dim(-1);
    S* pe = eps.value().data();
    for (int b = 0; b < rep.mask.batch; ++b)
      for (int j = 0; j < rep.mask.keys; ++j)
        if (!rep.mask.key_valid(b, j))
          std::fill(pe + (int64_t(b) * rep.mask.keys + j) * d,
                    pe + (int64_t(b) * rep.mask.keys + j + 1) * d, S(0));
    Rep<S> out;
    out.mask = rep.mask;
    out.h = add(rep.h, eps);
    return out;
  }

  // -- context integration ----------------------------------------------

  /// Outside integration: H_c' = Attention(q = H_s, k/v = H_c), then the
  /// gated sum g*H_s + (1-g)*H_c' replaces H_s as decoder memory.
  IntegrationOutput<S> outside_integrate(const Rep<S>& hs,
                                         const Rep<S>& hc) const {
    if (cfg.mode != IntegrationMode::kOutside)
      throw std::invalid_argument("outside_integrate: mode is " +
                                  std::string(to_string(cfg.mode)));
    if (hs.h.dim(-1) != hc.h.dim(-1))
      throw std::invalid_argument("outside_integrate: d_model mismatch");
    if (hs.h.dim(0) != hc.h.dim(0))
      throw std::invalid_argument("outside_integrate: batch mismatch");
    IntegrationOutput<S> out;
    out.h_cprime =
        multi_head_attention(outside.attn, cfg.num_heads, hs.h, hc.h, hc.mask);
    auto [g, fused] = gated_sum(outside.gate, hs.h, out.h_cprime,
                                force_gate_one);
    out.gate = g;
    out.fused = fused;
    return out;
  }

  /// Inside integration inside one decoder layer: the query attends to
  /// H_s and H_c in parallel and a gate fuses the two attention outputs.
  InsideAttention<S> dual_cross_attention(const DecoderLayerW<S>& layer,
                                          const Tensor<S>& query,
                                          const Rep<S>& mem_s,
                                          const Rep<S>& mem_c) const {
    InsideAttention<S> out;
    out.a_s = multi_head_attention(layer.cross_s, cfg.num_heads, query,
                                   mem_s.h, mem_s.mask);
    out.a_c = multi_head_attention(layer.cross_c, cfg.num_heads, query,
                                   mem_c.h, mem_c.mask);
    auto [g, fused] = gated_sum(layer.gate, out.a_s, out.a_c, force_gate_one);
    out.gate = g;
    out.fused = fused;
    return out;
  }

  // -- full pipelines -----------------------------------------------------

  /// Assembles the decoder memory for one batch under the configured
  /// integration mode: encode (source or concatenated input), optional
  /// noise, optional Outside fusion; Inside instead carries H_c through
  /// to the decoder. `agnostic` severs the context path structurally:
  /// the context encoder is never executed.
  MemorySet<S> build_memory(const Batch& batch, bool training, RngStream& rng,
                            bool agnostic = false) const {
    MemorySet<S> mem;
    if (cfg.mode == IntegrationMode::kSingleEncoder) {
      mem.source = inject_noise(
          encode(concat_matrix(batch), EncoderKind::kConcat, training, rng),
          training, rng);
      return mem;
    }
    Rep<S> hs = inject_noise(
        encode(batch.source, EncoderKind::kSource, training, rng), training,
        rng);
    if (cfg.mode == IntegrationMode::kNone || agnostic) {
      mem.source = hs;
      return mem;
    }
    Rep<S> hc = encode(batch.context, EncoderKind::kContext, training, rng);
    if (cfg.mode == IntegrationMode::kOutside) {
      IntegrationOutput<S> io = outside_integrate(hs, hc);
      mem.source.h = io.fused;
      mem.source.mask = hs.mask;
    } else {  // kInside
      mem.source = hs;
      mem.context = hc;
    }
    return mem;
  }

  /// Decoder stack over a padded target prefix; memory count must match
  /// the integration mode (context only valid for Inside).
  Tensor<S> decoder_forward(const IdMatrix& tgt_in, const MemorySet<S>& mem,
                            bool training, RngStream& rng) const {
    if (tgt_in.rows == 0)
      throw std::invalid_argument("decoder_forward: empty batch");
    if (mem.context && cfg.mode != IntegrationMode::kInside)
      throw std::invalid_argument(
          "decoder_forward: context memory supplied but integration mode is " +
          std::string(to_string(cfg.mode)));
    AttnMask self_mask = pad_mask(tgt_in, /*causal=*/true);
    Tensor<S> x = embed_target(tgt_in, training, rng);
    for (const DecoderLayerW<S>& layer : dec_layers) {
      Tensor<S> sa =
          multi_head_attention(layer.self_attn, cfg.num_heads, x, x, self_mask);
      x = layer_norm(add(x, dropout(sa, cfg.dropout, training, rng)),
                     layer.ln1.gamma, layer.ln1.beta);
      Tensor<S> cross;
      if (mem.context) {
        cross = dual_cross_attention(layer, x, mem.source, *mem.context).fused;
      } else {
        cross = multi_head_attention(layer.cross_s, cfg.num_heads, x,
                                     mem.source.h, mem.source.mask);
      }
      x = layer_norm(add(x, dropout(cross, cfg.dropout, training, rng)),
                     layer.ln2.gamma, layer.ln2.beta);
      Tensor<S> ff = linear(relu(linear(x, layer.ff1)), layer.ff2);
      x = layer_norm(add(x, dropout(ff, cfg.dropout, training, rng)),
                     layer.ln3.gamma, layer.ln3.beta);
    }
    // Output projection tied to the target embedding.
    return matmul(x, tgt_embed, /*transpose_b=*/true);
  }

  Tensor<S> loss(const Tensor<S>& logits, const IdMatrix& target_out) const {
    return cross_entropy_label_smoothed(logits, target_out, Vocab::kPad,
                                        cfg.label_smoothing);
  }

  Tensor<S> loss_on_batch(const Batch& batch, bool training, RngStream& rng,
                          bool agnostic = false) const {
    MemorySet<S> mem = build_memory(batch, training, rng, agnostic);
    Tensor<S> logits = decoder_forward(batch.target_in, mem, training, rng);
    return loss(logits, batch.target_out);
  }

  /// Single-encoder input: context ++ BRK ++ source ++ EOS, padded.
  static IdMatrix concat_matrix(const Batch& batch) {
    std::vector<IdList> rows;
    rows.reserve(batch.triples.size());
    for (const ContextTriple& t : batch.triples) {
      IdList row = build_concatenated_input(t);
      row.push_back(Vocab::kEos);
      rows.push_back(std::move(row));
    }
    return pad_to_matrix(rows, Vocab::kPad);
  }

 private:
  Tensor<S> pe_;  // sinusoidal table, not a parameter

  Tensor<S> embed_with(const Tensor<S>& table, const IdMatrix& ids,
                       bool training, RngStream& rng) const {
    Tensor<S> x =
        embedding_lookup(table, ids, std::sqrt(double(cfg.d_model)));
    // Positions [0, cols) of the table, broadcast over the batch.
    Tensor<S> pos = Tensor<S>::from(
        {ids.cols, cfg.d_model},
        std::vector<S>(pe_.value().begin(),
                       pe_.value().begin() + int64_t(ids.cols) * cfg.d_model));
    return dropout(add(x, pos), cfg.dropout, training, rng);
  }

  Tensor<S> encoder_layer(const EncoderLayerW<S>& layer, const Tensor<S>& x_in,
                          const AttnMask& mask, bool training,
                          RngStream& rng) const {
    Tensor<S> sa =
        multi_head_attention(layer.self_attn, cfg.num_heads, x_in, x_in, mask);
    Tensor<S> x =
        layer_norm(add(x_in, dropout(sa, cfg.dropout, training, rng)),
                   layer.ln1.gamma, layer.ln1.beta);
    Tensor<S> ff = linear(relu(linear(x, layer.ff1)), layer.ff2);
    return layer_norm(add(x, dropout(ff, cfg.dropout, training, rng)),
                      layer.ln2.gamma, layer.ln2.beta);
  }

  // -- construction -------------------------------------------------------

  Tensor<S> new_param(const std::string& name, Shape shape, RngStream& rng,
                      const char* init) {
    Tensor<S> t = Tensor<S>::zeros(shape, /*requires_grad=*/true);
    if (std::string(init) == "xavier") {
      double limit = std::sqrt(6.0 / double(shape[0] + shape.back()));
      for (S& v : t.value()) v = S((rng.uniform() * 2.0 - 1.0) * limit);
    } else if (std::string(init) == "embed") {
      // Half the usual d^-0.5 scale: with the output projection tied to
      // the target table this keeps initial logits near-uniform, so an
      // untrained model starts close to the ln V maximum-entropy loss.
      double sd = 0.5 / std::sqrt(double(cfg.d_model));
      for (S& v : t.value()) v = S(rng.gaussian(sd));
    } else if (std::string(init) == "ones") {
      for (S& v : t.value()) v = S(1);
    } else if (std::string(init) == "gate_bias") {
      for (S& v : t.value()) v = S(2);  // g starts near the sentence path
    }  // "zeros" stays zero
    return params.add(name, t);
  }

  LinearW<S> new_linear(const std::string& prefix, int in, int out,
                        RngStream& rng, const char* w_init = "xavier",
                        const char* b_init = "zeros") {
    LinearW<S> l;
    l.w = new_param(prefix + ".w", {in, out}, rng, w_init);
    l.b = new_param(prefix + ".b", {out}, rng, b_init);
    return l;
  }

  AttentionW<S> new_attention(const std::string& prefix, RngStream& rng,
                              bool zero_output_proj = false) {
    AttentionW<S> a;
    a.q = new_linear(prefix + ".q", cfg.d_model, cfg.d_model, rng);
    a.k = new_linear(prefix + ".k", cfg.d_model, cfg.d_model, rng);
    a.v = new_linear(prefix + ".v", cfg.d_model, cfg.d_model, rng);
    a.o = new_linear(prefix + ".o", cfg.d_model, cfg.d_model, rng,
                     zero_output_proj ? "zeros" : "xavier");
    return a;
  }

  LayerNormW<S> new_layer_norm(const std::string& prefix, RngStream& rng) {
    LayerNormW<S> n;
    n.gamma = new_param(prefix + ".g", {cfg.d_model}, rng, "ones");
    n.beta = new_param(prefix + ".b", {cfg.d_model}, rng, "zeros");
    return n;
  }

  EncoderLayerW<S> new_encoder_layer(const std::string& prefix,
                                     RngStream& rng) {
    EncoderLayerW<S> l;
    l.self_attn = new_attention(prefix + ".self", rng);
    l.ln1 = new_layer_norm(prefix + ".ln1", rng);
    l.ff1 = new_linear(prefix + ".ff1", cfg.d_model, cfg.d_ff, rng);
    l.ff2 = new_linear(prefix + ".ff2", cfg.d_ff, cfg.d_model, rng);
    l.ln2 = new_layer_norm(prefix + ".ln2", rng);
    return l;
  }

  /// Gate starts at W = 0, b = +2 (g near 0.88), and the context-path
  /// attention output projections start at zero, so a freshly attached
  /// context path perturbs a stage-1 model as little as possible.
  LinearW<S> new_gate(const std::string& prefix, RngStream& rng) {
    return new_linear(prefix, 2 * cfg.d_model, cfg.d_model, rng, "zeros",
                      "gate_bias");
  }

  void build(RngStream& rng) {
    pe_ = sinusoidal_positions<S>(cfg.max_positions, cfg.d_model);
    src_embed = new_param("src_embed", {cfg.src_vocab, cfg.d_model}, rng,
                          "embed");
    if (cfg.tied_embeddings) {
      if (cfg.tgt_vocab != cfg.src_vocab)
        throw std::invalid_argument(
            "tied embeddings require equal vocab sizes");
      tgt_embed = src_embed;
    } else {
      tgt_embed = new_param("tgt_embed", {cfg.tgt_vocab, cfg.d_model}, rng,
                            "embed");
    }
    for (int i = 0; i < cfg.encoder_layers; ++i)
      enc_layers.push_back(
          new_encoder_layer("enc." + std::to_string(i), rng));
    for (int i = 0; i < cfg.decoder_layers; ++i) {
      std::string prefix = "dec." + std::to_string(i);
      DecoderLayerW<S> l;
      l.self_attn = new_attention(prefix + ".self", rng);
      l.ln1 = new_layer_norm(prefix + ".ln1", rng);
      l.cross_s = new_attention(prefix + ".cross", rng);
      l.ln2 = new_layer_norm(prefix + ".ln2", rng);
      l.ff1 = new_linear(prefix + ".ff1", cfg.d_model, cfg.d_ff, rng);
      l.ff2 = new_linear(prefix + ".ff2", cfg.d_ff, cfg.d_model, rng);
      l.ln3 = new_layer_norm(prefix + ".ln3", rng);
      dec_layers.push_back(std::move(l));
    }
    if (cfg.multi_encoder()) {
      // First N-1 context blocks alias the source encoder blocks (one
      // storage, two views); the final block is private.
      const int shared = shared_context_blocks();
      for (int i = 0; i < cfg.context_encoder_layers; ++i) {
        if (i < shared)
          ctx_layers.push_back(enc_layers[size_t(i)]);
        else
          ctx_layers.push_back(
              new_encoder_layer("ctx.enc." + std::to_string(i), rng));
      }
      if (cfg.mode == IntegrationMode::kOutside) {
        outside.attn =
            new_attention("ctx.out.attn", rng, /*zero_output_proj=*/true);
        outside.gate = new_gate("ctx.out.gate", rng);
      } else {
        for (int i = 0; i < cfg.decoder_layers; ++i) {
          std::string prefix = "ctx.dec." + std::to_string(i);
          dec_layers[size_t(i)].cross_c =
              new_attention(prefix + ".attn", rng, /*zero_output_proj=*/true);
          dec_layers[size_t(i)].gate = new_gate(prefix + ".gate", rng);
        }
      }
    }
  }
};

}  // namespace ctxmt
