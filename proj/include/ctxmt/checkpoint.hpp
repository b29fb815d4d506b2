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

#include <cstdint>
#include <string>
#include <vector>

#include "ctxmt/model.hpp"
#include "ctxmt/text.hpp"

namespace ctxmt {

// Binary checkpoint. Layout: magic "CTXMT", one version byte, a
// length-prefixed (u32 LE) UTF-8 key=value block (model config, vocab
// token lists, training step), then one record per parameter: name length
// (u32 LE), name bytes, rank (u32 LE), dims (u32 LE each), values (f32 LE).
// Weight-shared parameters are stored once under their source-encoder
// name; the loader re-establishes the aliases from the config's
// weight_sharing entry.

struct Checkpoint {
  static constexpr char kMagic[5] = {'C', 'T', 'X', 'M', 'T'};
  static constexpr uint8_t kVersion = 1;

  struct ParamRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };

  uint8_t version = kVersion;
  std::vector<std::pair<std::string, std::string>> config;  // ordered
  std::vector<ParamRecord> params;

  std::string config_value(const std::string& key,
                           const std::string& fallback = "") const {
    for (const auto& [k, v] : config)
      if (k == key) return v;
    return fallback;
  }

  int64_t step() const {
    std::string v = config_value("step", "0");
    return std::stoll(v);
  }

  ModelConfig model_config() const { return ModelConfig::from_kv(config); }

  Vocab src_vocab() const { return vocab_from_config("src_tokens"); }
  Vocab tgt_vocab() const { return vocab_from_config("tgt_tokens"); }

  const ParamRecord* find(const std::string& name) const {
    for (const ParamRecord& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }

 private:
  Vocab vocab_from_config(const std::string& key) const;
};

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(const std::vector<uint8_t>& bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Space-joined token list (tokens never contain whitespace).
std::vector<std::string> split_tokens(const std::string& joined);
std::string join_tokens(const std::vector<std::string>& tokens);

// ---------------------------------------------------------------------------

template <class S>
Checkpoint make_checkpoint(const Model<S>& model, const Vocab& src_vocab,
                           const Vocab& tgt_vocab, int64_t step) {
  Checkpoint ck;
  ck.config = model.cfg.to_kv();
  ck.config.emplace_back("step", std::to_string(step));
  ck.config.emplace_back("src_tokens", join_tokens(src_vocab.regular_tokens()));
  ck.config.emplace_back("tgt_tokens", join_tokens(tgt_vocab.regular_tokens()));
  ck.params.reserve(model.params.size());
  for (const auto& [name, t] : model.params.items) {
    Checkpoint::ParamRecord rec;
    rec.name = name;
    rec.shape = t.shape();
    rec.values.reserve(t.value().size());
    for (S v : t.value()) rec.values.push_back(float(v));
    ck.params.push_back(std::move(rec));
  }
  return ck;
}

/// Writes checkpoint values into an already-built model; every model
/// parameter must be present with a matching shape.
template <class S>
void load_parameters(Model<S>& model, const Checkpoint& ck) {
  for (auto& [name, t] : model.params.items) {
    const Checkpoint::ParamRecord* rec = ck.find(name);
    if (!rec)
      throw std::runtime_error("checkpoint is missing parameter " + name);
    if (rec->shape != t.shape())
      throw std::invalid_argument("checkpoint parameter " + name +
                                  " has shape " + shape_str(rec->shape) +
                                  ", model expects " + shape_str(t.shape()));
    for (size_t i = 0; i < rec->values.size(); ++i)
      t.value()[i] = S(rec->values[i]);
  }
}

/// Rebuilds the full model (config, aliases, values) from a checkpoint.
template <class S>
Model<S> model_from_checkpoint(const Checkpoint& ck) {
  ModelConfig cfg = ck.model_config();
  RngStream rng(0);  // init values are immediately overwritten
  Model<S> model(cfg, rng);
  load_parameters(model, ck);
  return model;
}

}  // namespace ctxmt
