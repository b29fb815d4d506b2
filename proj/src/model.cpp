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

#include "ctxmt/model.hpp"

#include <cstdio>
#include <stdexcept>

namespace ctxmt {

const char* to_string(IntegrationMode mode) {
  switch (mode) {
    case IntegrationMode::kNone: return "none";
    case IntegrationMode::kSingleEncoder: return "single";
    case IntegrationMode::kOutside: return "outside";
    case IntegrationMode::kInside: return "inside";
  }
  return "?";
}

IntegrationMode integration_mode_from_string(const std::string& name) {
  if (name == "none") return IntegrationMode::kNone;
  if (name == "single") return IntegrationMode::kSingleEncoder;
  if (name == "outside") return IntegrationMode::kOutside;
  if (name == "inside") return IntegrationMode::kInside;
  throw std::invalid_argument("unknown integration mode: " + name);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) {
    throw std::invalid_argument("model config: " + msg);
  };
  if (d_model < 1 || num_heads < 1 || d_ff < 1) fail("dimensions must be >= 1");
  if (d_model % num_heads != 0)
    fail("d_model " + std::to_string(d_model) + " not divisible by " +
         std::to_string(num_heads) + " heads");
  if (encoder_layers < 1 || decoder_layers < 1)
    fail("encoder/decoder layer counts must be >= 1");
  if (context_encoder_layers < 0) fail("context_encoder_layers must be >= 0");
  if (dropout < 0 || dropout >= 1) fail("dropout must be in [0, 1)");
  if (label_smoothing < 0 || label_smoothing >= 1)
    fail("label_smoothing must be in [0, 1)");
  if (sigma < 0) fail("sigma must be >= 0");
  if (max_positions < 1) fail("max_positions must be >= 1");
  if (multi_encoder() && context_encoder_layers < 1)
    fail(std::string(to_string(mode)) +
         " integration requires a context encoder (context_encoder_layers >= 1)");
  if (weight_sharing && !multi_encoder())
    fail("weight sharing without a context encoder (mode " +
         std::string(to_string(mode)) + ")");
  if (weight_sharing && context_encoder_layers > encoder_layers)
    fail("weight sharing needs context_encoder_layers <= encoder_layers, got " +
         std::to_string(context_encoder_layers) + " > " +
         std::to_string(encoder_layers));
}

ModelConfig ModelConfig::toy(int src_vocab, int tgt_vocab) {
  ModelConfig c;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  return c;
}

ModelConfig ModelConfig::base(int src_vocab, int tgt_vocab) {
  ModelConfig c;
  c.d_model = 512;
  c.num_heads = 8;
  c.d_ff = 2048;
  c.encoder_layers = 6;
  c.decoder_layers = 6;
  c.context_encoder_layers = 1;
  c.max_positions = 1024;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  return c;
}

namespace {

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> ModelConfig::to_kv() const {
  return {
      {"d_model", std::to_string(d_model)},
      {"num_heads", std::to_string(num_heads)},
      {"d_ff", std::to_string(d_ff)},
      {"encoder_layers", std::to_string(encoder_layers)},
      {"decoder_layers", std::to_string(decoder_layers)},
      {"context_encoder_layers", std::to_string(context_encoder_layers)},
      {"dropout", format_real(dropout)},
      {"label_smoothing", format_real(label_smoothing)},
      {"max_positions", std::to_string(max_positions)},
      {"src_vocab", std::to_string(src_vocab)},
      {"tgt_vocab", std::to_string(tgt_vocab)},
      {"mode", to_string(mode)},
      {"sigma", format_real(sigma)},
      {"weight_sharing", weight_sharing ? "1" : "0"},
      {"tied_embeddings", tied_embeddings ? "1" : "0"},
  };
}

ModelConfig ModelConfig::from_kv(
    const std::vector<std::pair<std::string, std::string>>& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "d_model") c.d_model = std::stoi(v);
    else if (k == "num_heads") c.num_heads = std::stoi(v);
    else if (k == "d_ff") c.d_ff = std::stoi(v);
    else if (k == "encoder_layers") c.encoder_layers = std::stoi(v);
    else if (k == "decoder_layers") c.decoder_layers = std::stoi(v);
    else if (k == "context_encoder_layers")
      c.context_encoder_layers = std::stoi(v);
    else if (k == "dropout") c.dropout = std::stod(v);
    else if (k == "label_smoothing") c.label_smoothing = std::stod(v);
    else if (k == "max_positions") c.max_positions = std::stoi(v);
    else if (k == "src_vocab") c.src_vocab = std::stoi(v);
    else if (k == "tgt_vocab") c.tgt_vocab = std::stoi(v);
    else if (k == "mode") c.mode = integration_mode_from_string(v);
    else if (k == "sigma") c.sigma = std::stod(v);
    else if (k == "weight_sharing") c.weight_sharing = v == "1";
    else if (k == "tied_embeddings") c.tied_embeddings = v == "1";
    // unknown keys (vocab token lists, training step) belong to the
    // checkpoint, not the model shape
  }
  return c;
}

}  // namespace ctxmt
