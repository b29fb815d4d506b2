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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ctxmt/decode.hpp"
#include "ctxmt/train.hpp"

namespace ctxmt {

// Experiment harness: synthetic corpora, flat key=value configuration,
// grid execution over (integration mode x context mode x dropout x sigma
// x ...) with resumable fingerprinted cells, and report rendering.

/// Training at desk scale runs in 32-bit; the oracle suites instantiate
/// the same templates at 64-bit.
using TrainScalar = float;

// ---------------------------------------------------------------------------
// flat key = value config files (# comments, comma-separated lists)

class KvConfig {
 public:
  static KvConfig parse_text(const std::string& text);
  static KvConfig parse_file(const std::string& path);

  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_real(const std::string& key, double fallback) const;
  std::vector<std::string> get_list(const std::string& key,
                                    const std::string& fallback) const;
  void set(const std::string& key, const std::string& value);

  /// Sorted `key=value` lines; the fingerprint input.
  std::string canonical() const;

 private:
  std::vector<std::pair<std::string, std::string>> items_;
};

uint64_t fnv1a64(const std::string& text);
std::string hex64(uint64_t v);

// ---------------------------------------------------------------------------
// synthetic corpora

/// Desk-scale stand-ins for document corpora. `copy` repeats the source;
/// `lexical` maps each source word to a fixed target word; `disambig`
/// additionally plants a topic token in every sentence that determines
/// the translation of an ambiguous token in the next sentence, so true
/// context is informative by construction.
struct SynthTaskSpec {
  enum class Task { kCopy, kLexical, kDisambiguation };

  Task task = Task::kLexical;
  int vocab_size = 100;
  int documents = 200;  // training documents
  int valid_documents = 12;
  int test_documents = 12;
  int sentences_per_doc = 4;
  int min_len = 4;
  int max_len = 10;
  double ambiguity_rate = 0.0;  // P(sentence i>=1 carries an ambiguous token)
  int senses = 2;
  double zipf = 0.0;  // 0 = uniform word frequencies
  uint64_t seed = 42;

  void validate() const;
  static Task task_from_string(const std::string& name);
  static const char* task_to_string(Task task);
};

/// Target words of ambiguous tokens carry this prefix ("amb<j>~<sense>"),
/// which is how evaluation finds them without a side channel.
inline constexpr const char* kAmbiguousPrefix = "amb";

struct GeneratedCorpus {
  std::vector<Document> train, valid, test;
};

GeneratedCorpus generate_corpus(const SynthTaskSpec& spec);

/// Writes train.tsv / valid.tsv / test.tsv under dir (created if needed).
void write_corpus(const GeneratedCorpus& corpus, const std::string& dir);

/// Accuracy on ambiguous target tokens, matched by reference position.
struct AmbiguousStats {
  int64_t total = 0;
  int64_t correct = 0;
  double accuracy() const {
    return total ? double(correct) / double(total) : 0.0;
  }
};
AmbiguousStats ambiguous_accuracy(
    const std::vector<std::vector<std::string>>& hypotheses,
    const std::vector<std::vector<std::string>>& references);

// ---------------------------------------------------------------------------
// experiment grid

struct GridCell {
  IntegrationMode mode = IntegrationMode::kNone;
  ContextMode context = ContextMode::kNone;
  double dropout = 0.1;
  double sigma = 0.0;
  int ctx_layers = 1;
  bool weight_sharing = false;
  bool two_stage = true;
  int data_docs = 0;  // 0 = full training corpus

  std::string label() const;
};

struct ExperimentConfig {
  SynthTaskSpec task;
  std::string corpus_dir = "runs/corpus";
  std::string out_dir = "runs/exp";
  int bpe_merges = 300;
  ModelConfig model;        // vocab sizes filled after corpus preparation
  int64_t max_steps = 1500;
  int64_t stage2_steps = 800;
  int64_t warmup = 400;
  double lr_scale = 1.0;
  int max_tokens = 1024;
  int64_t valid_every = 200;
  int patience = 5;
  DecodeConfig decode;
  TrainConfig::Resample resample = TrainConfig::Resample::kPerEpoch;
  RandomContextPolicy random_policy{5, 30};

  std::vector<IntegrationMode> modes{IntegrationMode::kNone};
  std::vector<ContextMode> contexts{ContextMode::kContext};
  std::vector<double> dropouts{0.1};
  std::vector<double> sigmas{0.0};
  std::vector<int> ctx_layers{1};
  std::vector<bool> sharing{false};
  std::vector<bool> two_stage{true};
  std::vector<int> data_sizes{0};
  std::vector<uint64_t> seeds{1, 2, 3};

  static ExperimentConfig from_kv(const KvConfig& kv);
  KvConfig base_kv() const;  // non-axis settings, for fingerprints
};

/// Cartesian product of the axes; axes that do not apply to a mode
/// (context for sentence-level, sharing for single-encoder, ...) collapse
/// to canonical values and duplicates are dropped.
std::vector<GridCell> enumerate_cells(const ExperimentConfig& cfg);

/// One line of the machine-readable results file.
struct CellRecord {
  std::string fingerprint;
  uint64_t seed = 0;
  GridCell cell;
  bool ok = false;
  double valid_loss = 0;
  double test_aware = 0;
  double test_agnostic = 0;
  double amb_aware = -1;
  double amb_agnostic = -1;
  int64_t amb_total = 0;
  double final_loss = 0;
  int64_t steps = 0;
  double wall_s = 0;
  std::string error;

  std::string to_line() const;
  static std::optional<CellRecord> from_line(const std::string& line);
};

std::vector<CellRecord> load_records(const std::string& path);

// ---------------------------------------------------------------------------
// corpus preparation and cell execution

struct PreparedCorpus {
  BpeModel bpe;
  Vocab src_vocab, tgt_vocab;
  std::vector<Document> train_docs, valid_docs, test_docs;
  std::vector<EncodedDocument> train, valid, test;
  std::string corpus_hash;  // over the raw train/valid/test bytes
};

/// Loads (generating first if absent) and subword-encodes the corpus.
/// BPE and vocabularies always come from the full training set, so
/// data-volume subsets stay comparable.
PreparedCorpus prepare_corpus(const ExperimentConfig& cfg);

std::string cell_fingerprint(const ExperimentConfig& cfg, const GridCell& cell,
                             uint64_t seed, const std::string& corpus_hash);

/// Trains one cell (two-stage when configured; stage-1 checkpoints are
/// cached by fingerprint under out_dir) and evaluates both schemas.
CellRecord run_cell(const ExperimentConfig& cfg, const GridCell& cell,
                    uint64_t seed, const PreparedCorpus& corpus);

/// Runs every (cell, seed) not yet present in out_dir/results.txt.
/// Failures are recorded and skipped. Returns the number of failed cells.
int run_grid(const ExperimentConfig& cfg, std::ostream& progress);

// ---------------------------------------------------------------------------
// reports

/// Renders records into the named table shape: table2 (training
/// strategies), table3 (context inputs x dropout), table4 (aware vs
/// agnostic), table5 (noise), figure2 (data volume). Missing cells render
/// as "-".
std::string render_report(const std::vector<CellRecord>& records,
                          const std::string& shape);

}  // namespace ctxmt
