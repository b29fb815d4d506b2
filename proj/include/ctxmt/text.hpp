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

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ctxmt/rng.hpp"
#include "ctxmt/tensor.hpp"

namespace ctxmt {

// Subword tokenization, vocabulary management, document-aware corpus
// loading and context-triple construction. Corpora arrive whitespace
// pretokenized; all operations here are pure functions of (inputs, seed).

using TokenList = std::vector<std::string>;
using IdList = std::vector<int>;

// ---------------------------------------------------------------------------
// BPE

/// Learned byte-pair merge table. Words are split into UTF-8 code points
/// with "</w>" appended to the final symbol; merges apply in learned order,
/// so encoding is deterministic.
class BpeModel {
 public:
  static constexpr const char* kEndOfWord = "</w>";

  std::vector<std::pair<std::string, std::string>> merges;

  /// Greedy highest-frequency pair merging over the corpus, `num_merges`
  /// rounds; ties break to the lexicographically smallest pair.
  static BpeModel learn(const std::vector<std::string>& corpus,
                        int num_merges);

  /// Initial segmentation of one word: code points, end-of-word marker
  /// attached to the last symbol.
  static std::vector<std::string> base_symbols(const std::string& word);

  /// Applies the merge list to one word.
  std::vector<std::string> encode_word(const std::string& word) const;

  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);
};

/// Memoizing wrapper around BpeModel::encode_word; one instance per thread.
class BpeEncoder {
 public:
  explicit BpeEncoder(const BpeModel& model) : model_(model) {}
  const std::vector<std::string>& symbols(const std::string& word);

 private:
  const BpeModel& model_;
  std::unordered_map<std::string, std::vector<std::string>> cache_;
};

// ---------------------------------------------------------------------------
// Vocabulary

/// Token <-> id bijection. Reserved tokens occupy the lowest ids in fixed
/// order: PAD=0, BOS=1, EOS=2, UNK=3, BRK=4 (BRK separates context from
/// source in the single-encoder concatenation).
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kBrk = 4;
  static constexpr int kNumReserved = 5;

  Vocab();

  /// Vocabulary over everything `bpe` can emit for text over the corpus
  /// alphabet: per-word base symbols plus all merge products, sorted.
  static Vocab build(const BpeModel& bpe,
                     const std::vector<std::string>& corpus);

  /// Restores a vocabulary from its non-reserved token list (checkpoint
  /// round-trips).
  static Vocab from_tokens(const std::vector<std::string>& tokens);

  int size() const { return int(id_to_token_.size()); }
  int id(const std::string& token) const;  // UNK when absent
  const std::string& token(int id) const { return id_to_token_[size_t(id)]; }
  bool contains(const std::string& token) const;
  std::vector<std::string> regular_tokens() const;  // non-reserved, in order

 private:
  void add(const std::string& token);
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// Subword-encode a whitespace-pretokenized sentence; symbols missing from
/// the vocabulary map to UNK.
IdList encode_sentence(const BpeModel& bpe, const Vocab& vocab,
                       const std::string& sentence);
IdList encode_tokens(BpeEncoder& encoder, const Vocab& vocab,
                     const TokenList& tokens);

/// Inverse of encode_sentence for in-vocabulary text: joins subword pieces
/// on the end-of-word marker and drops reserved ids.
std::string decode_ids(const Vocab& vocab, const IdList& ids);
TokenList decode_to_words(const Vocab& vocab, const IdList& ids);

// ---------------------------------------------------------------------------
// Documents and context triples

/// One document: ordered sentence pairs as whitespace token lists.
struct Document {
  std::vector<std::pair<TokenList, TokenList>> pairs;
  int doc_index = 0;
};

/// Same structure after subword encoding.
struct EncodedDocument {
  std::vector<std::pair<IdList, IdList>> pairs;
  int doc_index = 0;
};

/// Corpus file format: UTF-8, one `source<TAB>target` pair per line,
/// documents separated by one blank line.
std::vector<Document> load_document_corpus(const std::string& path);
std::vector<Document> parse_document_corpus(const std::string& text);
void save_document_corpus(const std::string& path,
                          const std::vector<Document>& docs);

std::vector<EncodedDocument> encode_documents(
    const std::vector<Document>& docs, const BpeModel& bpe,
    const Vocab& src_vocab, const Vocab& tgt_vocab);

/// Flat list of source (or target) sentences, for BPE/vocab learning.
std::vector<std::string> corpus_sentences(const std::vector<Document>& docs,
                                          bool source_side,
                                          bool target_side);

enum class ContextMode { kNone, kContext, kRandom, kFixed };

const char* to_string(ContextMode mode);
ContextMode context_mode_from_string(const std::string& name);

/// One training/eval example: (context, source, target) id lists plus
/// provenance. Under kContext the context is the previous source sentence
/// of the same document; the first sentence of a document falls back to
/// the two-token [BOS, EOS] empty context.
struct ContextTriple {
  IdList context;
  IdList source;
  IdList target;
  ContextMode mode = ContextMode::kNone;
  int doc_index = -1;
  int sent_index = -1;
};

struct RandomContextPolicy {
  int min_len = 5;
  int max_len = 30;
};

std::vector<ContextTriple> make_context_triples(
    const std::vector<EncodedDocument>& docs, ContextMode mode,
    const Vocab& src_vocab, RngStream& rng,
    const RandomContextPolicy& policy = {});

/// Samples one random-policy context sentence; used both for kRandom
/// triples and to freeze the kFixed sentence.
IdList sample_random_context(const Vocab& src_vocab, RngStream& rng,
                             const RandomContextPolicy& policy);

/// context ++ [BRK] ++ source, the single-encoder input.
IdList build_concatenated_input(const ContextTriple& triple);

// ---------------------------------------------------------------------------
// Batching

/// Padded batch. Source rows carry a trailing EOS; target rows are the
/// usual shifted pair (BOS + target / target + EOS). Context rows are the
/// stored context ids unchanged.
struct Batch {
  std::vector<ContextTriple> triples;
  IdMatrix context;
  IdMatrix source;
  IdMatrix target_in;
  IdMatrix target_out;
};

IdMatrix pad_to_matrix(const std::vector<IdList>& rows, int pad_id);

/// Seeded shuffle, then greedy packing so each batch holds at most
/// `max_tokens` source tokens. A source sentence longer than `max_tokens`
/// is an error.
std::vector<Batch> make_batches(const std::vector<ContextTriple>& triples,
                                int max_tokens, RngStream& rng);

Batch batch_from_triples(const std::vector<ContextTriple>& triples);

}  // namespace ctxmt
