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

#include "ctxmt/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace ctxmt {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_ws(const TokenList& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

/// Splits a word into UTF-8 code point strings. Bytes that do not form a
/// valid sequence are taken one at a time.
std::vector<std::string> utf8_chars(const std::string& word) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < word.size()) {
    unsigned char c = static_cast<unsigned char>(word[i]);
    size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3
                : (c >> 3) == 0x1E             ? 4
                                               : 1;
    if (i + len > word.size()) len = 1;
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

using SymbolSeq = std::vector<std::string>;

void merge_in_place(SymbolSeq& syms, const std::string& left,
                    const std::string& right) {
  size_t w = 0;
  for (size_t r = 0; r < syms.size();) {
    if (r + 1 < syms.size() && syms[r] == left && syms[r + 1] == right) {
      syms[w] = left + right;
      ++w;
      r += 2;
    } else {
      if (w != r) syms[w] = std::move(syms[r]);
      ++w;
      r += 1;
    }
  }
  syms.resize(w);
}

}  // namespace

// ---------------------------------------------------------------------------
// BpeModel

std::vector<std::string> BpeModel::base_symbols(const std::string& word) {
  SymbolSeq syms = utf8_chars(word);
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

BpeModel BpeModel::learn(const std::vector<std::string>& corpus,
                         int num_merges) {
  if (corpus.empty())
    throw std::invalid_argument("learn_bpe: corpus is empty");
  if (num_merges < 0)
    throw std::invalid_argument("learn_bpe: num_merges must be >= 0");

  // Word frequency table; ordered map keeps pair selection deterministic.
  std::map<std::string, int64_t> word_freq;
  for (const std::string& sent : corpus)
    for (const std::string& w : split_ws(sent)) word_freq[w] += 1;
  if (word_freq.empty())
    throw std::invalid_argument("learn_bpe: corpus contains no tokens");

  std::vector<std::pair<SymbolSeq, int64_t>> words;
  words.reserve(word_freq.size());
  for (const auto& [w, f] : word_freq) words.emplace_back(base_symbols(w), f);

  BpeModel model;
  model.merges.reserve(size_t(num_merges));
  for (int round = 0; round < num_merges; ++round) {
    std::map<std::pair<std::string, std::string>, int64_t> counts;
    for (const auto& [syms, f] : words)
      for (size_t i = 0; i + 1 < syms.size(); ++i)
        counts[{syms[i], syms[i + 1]}] += f;
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = std::next(counts.begin()); it != counts.end(); ++it)
      if (it->second > best->second) best = it;  // ties: first in key order
    const auto [left, right] = best->first;
    for (auto& [syms, f] : words) merge_in_place(syms, left, right);
    model.merges.emplace_back(left, right);
  }
  return model;
}

std::vector<std::string> BpeModel::encode_word(const std::string& word) const {
  SymbolSeq syms = base_symbols(word);
  for (const auto& [left, right] : merges) merge_in_place(syms, left, right);
  return syms;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write BPE model to " + path);
  os << "bpe-merges " << merges.size() << "\n";
  for (const auto& [l, r] : merges) os << l << " " << r << "\n";
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read BPE model from " + path);
  std::string tag;
  size_t count = 0;
  if (!(is >> tag >> count) || tag != "bpe-merges")
    throw std::runtime_error("malformed BPE model header in " + path);
  BpeModel model;
  model.merges.reserve(count);
  std::string l, r;
  for (size_t i = 0; i < count; ++i) {
    if (!(is >> l >> r))
      throw std::runtime_error("truncated BPE model in " + path);
    model.merges.emplace_back(l, r);
  }
  return model;
}

const std::vector<std::string>& BpeEncoder::symbols(const std::string& word) {
  auto it = cache_.find(word);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(word, model_.encode_word(word)).first->second;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  add("<pad>");
  add("<bos>");
  add("<eos>");
  add("<unk>");
  add("<brk>");
}

void Vocab::add(const std::string& token) {
  if (token_to_id_.count(token)) return;
  token_to_id_.emplace(token, int(id_to_token_.size()));
  id_to_token_.push_back(token);
}

Vocab Vocab::build(const BpeModel& bpe, const std::vector<std::string>& corpus) {
  // Closure of what encode can emit over this corpus: encode every distinct
  // word once and collect the resulting symbols, sorted for determinism.
  std::set<std::string> words;
  for (const std::string& sent : corpus)
    for (const std::string& w : split_ws(sent)) words.insert(w);
  std::set<std::string> symbols;
  for (const std::string& w : words)
    for (const std::string& s : bpe.encode_word(w)) symbols.insert(s);
  Vocab v;
  for (const std::string& s : symbols) v.add(s);
  return v;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  for (const std::string& t : tokens) v.add(t);
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocab::contains(const std::string& token) const {
  return token_to_id_.count(token) != 0;
}

std::vector<std::string> Vocab::regular_tokens() const {
  return std::vector<std::string>(id_to_token_.begin() + kNumReserved,
                                  id_to_token_.end());
}

IdList encode_tokens(BpeEncoder& encoder, const Vocab& vocab,
                     const TokenList& tokens) {
  IdList ids;
  for (const std::string& w : tokens)
    for (const std::string& s : encoder.symbols(w)) ids.push_back(vocab.id(s));
  return ids;
}

IdList encode_sentence(const BpeModel& bpe, const Vocab& vocab,
                       const std::string& sentence) {
  BpeEncoder enc(bpe);
  return encode_tokens(enc, vocab, split_ws(sentence));
}

TokenList decode_to_words(const Vocab& vocab, const IdList& ids) {
  TokenList words;
  std::string current;
  const std::string eow = BpeModel::kEndOfWord;
  for (int id : ids) {
    if (id < Vocab::kNumReserved) {
      if (id == Vocab::kUnk) current += vocab.token(id);
      continue;  // PAD/BOS/EOS/BRK never surface in text
    }
    std::string piece = vocab.token(id);
    if (piece.size() >= eow.size() &&
        piece.compare(piece.size() - eow.size(), eow.size(), eow) == 0) {
      current += piece.substr(0, piece.size() - eow.size());
      words.push_back(current);
      current.clear();
    } else {
      current += piece;
    }
  }
  if (!current.empty()) words.push_back(current);
  return words;
}

std::string decode_ids(const Vocab& vocab, const IdList& ids) {
  return join_ws(decode_to_words(vocab, ids));
}

// ---------------------------------------------------------------------------
// corpus files

std::vector<Document> parse_document_corpus(const std::string& text) {
  std::vector<Document> docs;
  Document current;
  int line_no = 0;
  size_t pos = 0;
  auto flush = [&] {
    if (!current.pairs.empty()) {
      current.doc_index = int(docs.size());
      docs.push_back(std::move(current));
      current = Document{};
    }
  };
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = nl == std::string::npos ? text.substr(pos)
                                               : text.substr(pos, nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      flush();
      continue;
    }
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("corpus parse error at line " +
                               std::to_string(line_no) +
                               ": missing <TAB> between source and target");
    TokenList src = split_ws(line.substr(0, tab));
    TokenList tgt = split_ws(line.substr(tab + 1));
    if (src.empty() || tgt.empty())
      throw std::runtime_error("corpus parse error at line " +
                               std::to_string(line_no) +
                               ": empty source or target side");
    current.pairs.emplace_back(std::move(src), std::move(tgt));
  }
  flush();
  return docs;
}

std::vector<Document> load_document_corpus(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open corpus file " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_document_corpus(buf.str());
}

void save_document_corpus(const std::string& path,
                          const std::vector<Document>& docs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write corpus file " + path);
  for (size_t d = 0; d < docs.size(); ++d) {
    if (d) os << "\n";
    for (const auto& [src, tgt] : docs[d].pairs)
      os << join_ws(src) << "\t" << join_ws(tgt) << "\n";
  }
}

std::vector<EncodedDocument> encode_documents(
    const std::vector<Document>& docs, const BpeModel& bpe,
    const Vocab& src_vocab, const Vocab& tgt_vocab) {
  BpeEncoder enc(bpe);
  std::vector<EncodedDocument> out;
  out.reserve(docs.size());
  for (const Document& doc : docs) {
    EncodedDocument e;
    e.doc_index = doc.doc_index;
    e.pairs.reserve(doc.pairs.size());
    for (const auto& [src, tgt] : doc.pairs)
      e.pairs.emplace_back(encode_tokens(enc, src_vocab, src),
                           encode_tokens(enc, tgt_vocab, tgt));
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> corpus_sentences(const std::vector<Document>& docs,
                                          bool source_side, bool target_side) {
  std::vector<std::string> out;
  for (const Document& doc : docs)
    for (const auto& [src, tgt] : doc.pairs) {
      if (source_side) out.push_back(join_ws(src));
      if (target_side) out.push_back(join_ws(tgt));
    }
  return out;
}

// ---------------------------------------------------------------------------
// context triples

const char* to_string(ContextMode mode) {
  switch (mode) {
    case ContextMode::kNone: return "none";
    case ContextMode::kContext: return "context";
    case ContextMode::kRandom: return "random";
    case ContextMode::kFixed: return "fixed";
  }
  return "?";
}

ContextMode context_mode_from_string(const std::string& name) {
  if (name == "none") return ContextMode::kNone;
  if (name == "context") return ContextMode::kContext;
  if (name == "random") return ContextMode::kRandom;
  if (name == "fixed") return ContextMode::kFixed;
  throw std::invalid_argument("unknown context mode: " + name);
}

IdList sample_random_context(const Vocab& src_vocab, RngStream& rng,
                             const RandomContextPolicy& policy) {
  if (src_vocab.size() <= Vocab::kNumReserved)
    throw std::invalid_argument(
        "random context: vocabulary has no non-reserved tokens");
  if (policy.min_len < 1 || policy.max_len < policy.min_len)
    throw std::invalid_argument("random context: bad length range");
  int len = rng.uniform_int(policy.min_len, policy.max_len);
  IdList ids(size_t(len), 0);
  for (int& id : ids)
    id = rng.uniform_int(Vocab::kNumReserved, src_vocab.size() - 1);
  return ids;
}

std::vector<ContextTriple> make_context_triples(
    const std::vector<EncodedDocument>& docs, ContextMode mode,
    const Vocab& src_vocab, RngStream& rng,
    const RandomContextPolicy& policy) {
  IdList fixed;
  if (mode == ContextMode::kFixed)
    fixed = sample_random_context(src_vocab, rng, policy);

  std::vector<ContextTriple> out;
  for (const EncodedDocument& doc : docs) {
    for (size_t i = 0; i < doc.pairs.size(); ++i) {
      ContextTriple t;
      t.mode = mode;
      t.doc_index = doc.doc_index;
      t.sent_index = int(i);
      t.source = doc.pairs[i].first;
      t.target = doc.pairs[i].second;
      switch (mode) {
        case ContextMode::kNone:
          break;
        case ContextMode::kContext:
          t.context = i == 0 ? IdList{Vocab::kBos, Vocab::kEos}
                             : doc.pairs[i - 1].first;
          break;
        case ContextMode::kRandom:
          t.context = sample_random_context(src_vocab, rng, policy);
          break;
        case ContextMode::kFixed:
          t.context = fixed;
          break;
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

IdList build_concatenated_input(const ContextTriple& triple) {
  IdList out;
  out.reserve(triple.context.size() + 1 + triple.source.size());
  out.insert(out.end(), triple.context.begin(), triple.context.end());
  out.push_back(Vocab::kBrk);
  out.insert(out.end(), triple.source.begin(), triple.source.end());
  return out;
}

// ---------------------------------------------------------------------------
// batching

IdMatrix pad_to_matrix(const std::vector<IdList>& rows, int pad_id) {
  size_t max_len = 1;
  for (const IdList& r : rows) max_len = std::max(max_len, r.size());
  IdMatrix m(int(rows.size()), int(max_len), int32_t(pad_id));
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      m.at(int(r), int(c)) = int32_t(rows[r][c]);
  return m;
}

Batch batch_from_triples(const std::vector<ContextTriple>& triples) {
  Batch b;
  b.triples = triples;
  std::vector<IdList> ctx, src, tin, tout;
  for (const ContextTriple& t : triples) {
    ctx.push_back(t.context.empty() ? IdList{Vocab::kBos, Vocab::kEos}
                                    : t.context);
    IdList s = t.source;
    s.push_back(Vocab::kEos);
    src.push_back(std::move(s));
    IdList ti{Vocab::kBos};
    ti.insert(ti.end(), t.target.begin(), t.target.end());
    tin.push_back(std::move(ti));
    IdList to = t.target;
    to.push_back(Vocab::kEos);
    tout.push_back(std::move(to));
  }
  b.context = pad_to_matrix(ctx, Vocab::kPad);
  b.source = pad_to_matrix(src, Vocab::kPad);
  b.target_in = pad_to_matrix(tin, Vocab::kPad);
  b.target_out = pad_to_matrix(tout, Vocab::kPad);
  return b;
}

std::vector<Batch> make_batches(const std::vector<ContextTriple>& triples,
                                int max_tokens, RngStream& rng) {
  for (size_t i = 0; i < triples.size(); ++i)
    if (int(triples[i].source.size()) > max_tokens)
      throw std::invalid_argument(
          "make_batches: sentence " + std::to_string(i) + " (doc " +
          std::to_string(triples[i].doc_index) + ", index " +
          std::to_string(triples[i].sent_index) + ") has " +
          std::to_string(triples[i].source.size()) +
          " source tokens, above the batch budget of " +
          std::to_string(max_tokens));

  std::vector<size_t> order(triples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<Batch> batches;
  std::vector<ContextTriple> pending;
  int pending_tokens = 0;
  auto flush = [&] {
    if (!pending.empty()) {
      batches.push_back(batch_from_triples(pending));
      pending.clear();
      pending_tokens = 0;
    }
  };
  for (size_t idx : order) {
    const ContextTriple& t = triples[idx];
    int n = int(t.source.size());
    if (pending_tokens + n > max_tokens) flush();
    pending.push_back(t);
    pending_tokens += n;
  }
  flush();
  return batches;
}

}  // namespace ctxmt
