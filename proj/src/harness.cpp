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

#include "ctxmt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace ctxmt {

// ---------------------------------------------------------------------------
// KvConfig

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config parse error at line " +
                               std::to_string(line_no) + ": expected key = value");
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config parse error at line " +
                               std::to_string(line_no) + ": empty key");
    cfg.set(key, value);
  }
  return cfg;
}

KvConfig KvConfig::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_text(buf.str());
}

void KvConfig::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : items_)
    if (k == key) {
      v = value;
      return;
    }
  items_.emplace_back(key, value);
}

bool KvConfig::has(const std::string& key) const {
  for (const auto& [k, v] : items_)
    if (k == key) return true;
  return false;
}

std::string KvConfig::get(const std::string& key,
                          const std::string& fallback) const {
  for (const auto& [k, v] : items_)
    if (k == key) return v;
  return fallback;
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? std::stoll(get(key, "")) : fallback;
}

double KvConfig::get_real(const std::string& key, double fallback) const {
  return has(key) ? std::stod(get(key, "")) : fallback;
}

std::vector<std::string> KvConfig::get_list(const std::string& key,
                                            const std::string& fallback) const {
  std::string raw = get(key, fallback);
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(raw);
  while (std::getline(is, item, ',')) {
    size_t a = item.find_first_not_of(" \t");
    size_t b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string KvConfig::canonical() const {
  std::vector<std::pair<std::string, std::string>> sorted = items_;
  std::sort(sorted.begin(), sorted.end());
  std::string out;
  for (const auto& [k, v] : sorted) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

uint64_t fnv1a64(const std::string& text) {
  uint64_t h = 0xCBF29CE484222325ull;
  for (char c : text) {
    h ^= uint64_t(uint8_t(c));
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)v);
  return buf;
}

// ---------------------------------------------------------------------------
// synthetic corpora

void SynthTaskSpec::validate() const {
  if (vocab_size < 1 || documents < 1 || sentences_per_doc < 1 ||
      valid_documents < 1 || test_documents < 1)
    throw std::invalid_argument("corpus spec: counts must be positive");
  if (min_len < 1 || max_len < min_len)
    throw std::invalid_argument("corpus spec: bad sentence length range");
  if (ambiguity_rate < 0 || ambiguity_rate > 1)
    throw std::invalid_argument("corpus spec: ambiguity rate must be in [0,1]");
  if (senses < 2 && task == Task::kDisambiguation)
    throw std::invalid_argument("corpus spec: need at least 2 senses");
}

SynthTaskSpec::Task SynthTaskSpec::task_from_string(const std::string& name) {
  if (name == "copy") return Task::kCopy;
  if (name == "lexical") return Task::kLexical;
  if (name == "disambig") return Task::kDisambiguation;
  throw std::invalid_argument("unknown task kind: " + name);
}

const char* SynthTaskSpec::task_to_string(Task task) {
  switch (task) {
    case Task::kCopy: return "copy";
    case Task::kLexical: return "lexical";
    case Task::kDisambiguation: return "disambig";
  }
  return "?";
}

namespace {

/// Word-index sampler, uniform or Zipf(s) over [0, n).
class WordSampler {
 public:
  WordSampler(int n, double zipf) : cumulative_(size_t(n), 0.0) {
    double total = 0;
    for (int i = 0; i < n; ++i) {
      total += zipf > 0 ? 1.0 / std::pow(double(i + 1), zipf) : 1.0;
      cumulative_[size_t(i)] = total;
    }
  }

  int draw(RngStream& rng) const {
    double u = rng.uniform() * cumulative_.back();
    auto it = std::lower_bound(cumulative_.begin(), cumulative_.end(), u);
    return int(it - cumulative_.begin());
  }

 private:
  std::vector<double> cumulative_;
};

std::string src_word(const SynthTaskSpec& spec, int i) {
  return (spec.task == SynthTaskSpec::Task::kCopy ? "w" : "s") +
         std::to_string(i);
}

/// Lexical targets go through a seeded permutation of the index space, so
/// the source-to-target mapping has no character-level regularity and must
/// be memorized word by word.
std::vector<int> target_permutation(const SynthTaskSpec& spec) {
  std::vector<int> perm(size_t(spec.vocab_size), 0);
  for (int i = 0; i < spec.vocab_size; ++i) perm[size_t(i)] = i;
  if (spec.task != SynthTaskSpec::Task::kCopy) {
    RngStream rng(spec.seed ^ 0x5EEDC0DEull);
    rng.shuffle(perm);
  }
  return perm;
}

std::string tgt_word(const SynthTaskSpec& spec, const std::vector<int>& perm,
                     int i) {
  return (spec.task == SynthTaskSpec::Task::kCopy ? "w" : "t") +
         std::to_string(perm[size_t(i)]);
}

Document generate_document(const SynthTaskSpec& spec, const WordSampler& words,
                           const std::vector<int>& perm, RngStream& rng,
                           int doc_index) {
  const bool disambig = spec.task == SynthTaskSpec::Task::kDisambiguation;
  const int amb_types =
      disambig ? std::max(1, spec.vocab_size / 10) : 0;
  Document doc;
  doc.doc_index = doc_index;
  int prev_topic = 0;
  for (int s = 0; s < spec.sentences_per_doc; ++s) {
    int len = rng.uniform_int(spec.min_len, spec.max_len);
    std::vector<int> content(size_t(len), 0);
    for (int& w : content) w = words.draw(rng);

    TokenList src, tgt;
    for (int w : content) {
      src.push_back(src_word(spec, w));
      tgt.push_back(tgt_word(spec, perm, w));
    }
    int topic = 0;
    if (disambig) {
      topic = rng.uniform_int(0, spec.senses - 1);
      int topic_pos = rng.uniform_int(0, int(src.size()));
      src.insert(src.begin() + topic_pos, "topic" + std::to_string(topic));
      tgt.insert(tgt.begin() + topic_pos, "u" + std::to_string(topic));
      if (s > 0 && rng.uniform() < spec.ambiguity_rate) {
        int type = rng.uniform_int(0, amb_types - 1);
        // replace a content word, never the topic token
        int apos = rng.uniform_int(0, int(src.size()) - 2);
        if (apos >= topic_pos) ++apos;
        src[size_t(apos)] = std::string(kAmbiguousPrefix) + std::to_string(type);
        // The correct sense is the topic planted in the previous sentence.
        tgt[size_t(apos)] = std::string(kAmbiguousPrefix) +
                            std::to_string(type) + "~" +
                            std::to_string(prev_topic);
      }
    }
    prev_topic = topic;
    doc.pairs.emplace_back(std::move(src), std::move(tgt));
  }
  return doc;
}

}  // namespace

GeneratedCorpus generate_corpus(const SynthTaskSpec& spec) {
  spec.validate();
  RngStream rng(spec.seed);
  WordSampler words(spec.vocab_size, spec.zipf);
  std::vector<int> perm = target_permutation(spec);
  GeneratedCorpus corpus;
  for (int d = 0; d < spec.documents; ++d)
    corpus.train.push_back(generate_document(spec, words, perm, rng, d));
  for (int d = 0; d < spec.valid_documents; ++d)
    corpus.valid.push_back(generate_document(spec, words, perm, rng, d));
  for (int d = 0; d < spec.test_documents; ++d)
    corpus.test.push_back(generate_document(spec, words, perm, rng, d));
  return corpus;
}

void write_corpus(const GeneratedCorpus& corpus, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec && !fs::exists(dir))
    throw std::runtime_error("cannot create corpus directory " + dir + ": " +
                             ec.message());
  save_document_corpus(dir + "/train.tsv", corpus.train);
  save_document_corpus(dir + "/valid.tsv", corpus.valid);
  save_document_corpus(dir + "/test.tsv", corpus.test);
}

AmbiguousStats ambiguous_accuracy(
    const std::vector<std::vector<std::string>>& hypotheses,
    const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("ambiguous_accuracy: corpus size mismatch");
  AmbiguousStats stats;
  const std::string prefix = kAmbiguousPrefix;
  for (size_t i = 0; i < references.size(); ++i) {
    const auto& ref = references[i];
    const auto& hyp = hypotheses[i];
    for (size_t j = 0; j < ref.size(); ++j) {
      if (ref[j].compare(0, prefix.size(), prefix) != 0) continue;
      ++stats.total;
      if (j < hyp.size() && hyp[j] == ref[j]) ++stats.correct;
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// experiment configuration

std::string GridCell::label() const {
  std::ostringstream os;
  os << "mode=" << to_string(mode) << " context=" << to_string(context)
     << " dropout=" << dropout << " sigma=" << sigma << " cl=" << ctx_layers
     << " ws=" << (weight_sharing ? 1 : 0) << " ts=" << (two_stage ? 1 : 0)
     << " docs=" << data_docs;
  return os.str();
}

ExperimentConfig ExperimentConfig::from_kv(const KvConfig& kv) {
  ExperimentConfig cfg;
  cfg.task.task = SynthTaskSpec::task_from_string(kv.get("task", "lexical"));
  cfg.task.vocab_size = int(kv.get_int("vocab_size", cfg.task.vocab_size));
  cfg.task.documents = int(kv.get_int("documents", cfg.task.documents));
  cfg.task.valid_documents =
      int(kv.get_int("valid_documents", cfg.task.valid_documents));
  cfg.task.test_documents =
      int(kv.get_int("test_documents", cfg.task.test_documents));
  cfg.task.sentences_per_doc =
      int(kv.get_int("sentences_per_doc", cfg.task.sentences_per_doc));
  cfg.task.min_len = int(kv.get_int("min_len", cfg.task.min_len));
  cfg.task.max_len = int(kv.get_int("max_len", cfg.task.max_len));
  cfg.task.ambiguity_rate =
      kv.get_real("ambiguity_rate", cfg.task.ambiguity_rate);
  cfg.task.senses = int(kv.get_int("senses", cfg.task.senses));
  cfg.task.zipf = kv.get_real("zipf", cfg.task.zipf);
  cfg.task.seed = uint64_t(kv.get_int("corpus_seed", int64_t(cfg.task.seed)));

  cfg.corpus_dir = kv.get("corpus_dir", cfg.corpus_dir);
  cfg.out_dir = kv.get("out_dir", cfg.out_dir);
  cfg.bpe_merges = int(kv.get_int("bpe_merges", cfg.bpe_merges));

  cfg.model.d_model = int(kv.get_int("d_model", cfg.model.d_model));
  cfg.model.num_heads = int(kv.get_int("num_heads", cfg.model.num_heads));
  cfg.model.d_ff = int(kv.get_int("d_ff", cfg.model.d_ff));
  cfg.model.encoder_layers =
      int(kv.get_int("encoder_layers", cfg.model.encoder_layers));
  cfg.model.decoder_layers =
      int(kv.get_int("decoder_layers", cfg.model.decoder_layers));
  cfg.model.max_positions =
      int(kv.get_int("max_positions", cfg.model.max_positions));
  cfg.model.label_smoothing =
      kv.get_real("label_smoothing", cfg.model.label_smoothing);

  cfg.max_steps = kv.get_int("max_steps", cfg.max_steps);
  cfg.stage2_steps = kv.get_int("stage2_steps", cfg.stage2_steps);
  cfg.warmup = kv.get_int("warmup", cfg.warmup);
  cfg.lr_scale = kv.get_real("lr_scale", cfg.lr_scale);
  cfg.max_tokens = int(kv.get_int("max_tokens", cfg.max_tokens));
  cfg.valid_every = kv.get_int("valid_every", cfg.valid_every);
  cfg.patience = int(kv.get_int("patience", cfg.patience));

  cfg.decode.beam = int(kv.get_int("beam", cfg.decode.beam));
  cfg.decode.length_penalty =
      kv.get_real("length_penalty", cfg.decode.length_penalty);

  std::string resample = kv.get("resample", "per-epoch");
  if (resample == "frozen") cfg.resample = TrainConfig::Resample::kFrozen;
  else if (resample == "per-epoch")
    cfg.resample = TrainConfig::Resample::kPerEpoch;
  else if (resample == "per-step")
    cfg.resample = TrainConfig::Resample::kPerStep;
  else
    throw std::invalid_argument("unknown resample policy: " + resample);
  cfg.random_policy.min_len =
      int(kv.get_int("random_min_len", cfg.random_policy.min_len));
  cfg.random_policy.max_len =
      int(kv.get_int("random_max_len", cfg.random_policy.max_len));

  cfg.modes.clear();
  for (const std::string& m : kv.get_list("modes", "none"))
    cfg.modes.push_back(integration_mode_from_string(m));
  cfg.contexts.clear();
  for (const std::string& c : kv.get_list("contexts", "context"))
    cfg.contexts.push_back(context_mode_from_string(c));
  cfg.dropouts.clear();
  for (const std::string& p : kv.get_list("dropouts", "0.1"))
    cfg.dropouts.push_back(std::stod(p));
  cfg.sigmas.clear();
  for (const std::string& s : kv.get_list("sigmas", "0"))
    cfg.sigmas.push_back(std::stod(s));
  cfg.ctx_layers.clear();
  for (const std::string& c : kv.get_list("ctx_layers", "1"))
    cfg.ctx_layers.push_back(std::stoi(c));
  cfg.sharing.clear();
  for (const std::string& w : kv.get_list("sharing", "0"))
    cfg.sharing.push_back(w == "1");
  cfg.two_stage.clear();
  for (const std::string& t : kv.get_list("two_stage", "1"))
    cfg.two_stage.push_back(t == "1");
  cfg.data_sizes.clear();
  for (const std::string& d : kv.get_list("data_sizes", "0"))
    cfg.data_sizes.push_back(std::stoi(d));
  cfg.seeds.clear();
  for (const std::string& s : kv.get_list("seeds", "1,2,3"))
    cfg.seeds.push_back(uint64_t(std::stoll(s)));
  return cfg;
}

KvConfig ExperimentConfig::base_kv() const {
  KvConfig kv;
  kv.set("task", SynthTaskSpec::task_to_string(task.task));
  kv.set("vocab_size", std::to_string(task.vocab_size));
  kv.set("documents", std::to_string(task.documents));
  kv.set("valid_documents", std::to_string(task.valid_documents));
  kv.set("test_documents", std::to_string(task.test_documents));
  kv.set("sentences_per_doc", std::to_string(task.sentences_per_doc));
  kv.set("min_len", std::to_string(task.min_len));
  kv.set("max_len", std::to_string(task.max_len));
  kv.set("ambiguity_rate", std::to_string(task.ambiguity_rate));
  kv.set("senses", std::to_string(task.senses));
  kv.set("zipf", std::to_string(task.zipf));
  kv.set("corpus_seed", std::to_string(task.seed));
  kv.set("bpe_merges", std::to_string(bpe_merges));
  kv.set("d_model", std::to_string(model.d_model));
  kv.set("num_heads", std::to_string(model.num_heads));
  kv.set("d_ff", std::to_string(model.d_ff));
  kv.set("encoder_layers", std::to_string(model.encoder_layers));
  kv.set("decoder_layers", std::to_string(model.decoder_layers));
  kv.set("label_smoothing", std::to_string(model.label_smoothing));
  kv.set("max_steps", std::to_string(max_steps));
  kv.set("stage2_steps", std::to_string(stage2_steps));
  kv.set("warmup", std::to_string(warmup));
  kv.set("lr_scale", std::to_string(lr_scale));
  kv.set("max_tokens", std::to_string(max_tokens));
  kv.set("valid_every", std::to_string(valid_every));
  kv.set("patience", std::to_string(patience));
  kv.set("beam", std::to_string(decode.beam));
  kv.set("length_penalty", std::to_string(decode.length_penalty));
  kv.set("random_min_len", std::to_string(random_policy.min_len));
  kv.set("random_max_len", std::to_string(random_policy.max_len));
  return kv;
}

std::vector<GridCell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  std::vector<std::string> seen;
  auto push = [&](GridCell c) {
    std::string key = c.label();
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) return;
    seen.push_back(key);
    cells.push_back(c);
  };
  for (IntegrationMode mode : cfg.modes) {
    const bool multi = mode == IntegrationMode::kOutside ||
                       mode == IntegrationMode::kInside;
    std::vector<ContextMode> ctxs =
        multi ? cfg.contexts
              : mode == IntegrationMode::kSingleEncoder
                    ? std::vector<ContextMode>{ContextMode::kContext}
                    : std::vector<ContextMode>{ContextMode::kNone};
    std::vector<int> layers = multi ? cfg.ctx_layers : std::vector<int>{0};
    std::vector<bool> ws = multi ? cfg.sharing : std::vector<bool>{false};
    std::vector<bool> ts = multi ? cfg.two_stage : std::vector<bool>{false};
    for (ContextMode context : ctxs)
      for (double p : cfg.dropouts)
        for (double sg : cfg.sigmas)
          for (int cl : layers)
            for (bool w : ws)
              for (bool t : ts)
                for (int docs : cfg.data_sizes)
                  push(GridCell{mode, context, p, sg, cl, w, t, docs});
  }
  return cells;
}

// ---------------------------------------------------------------------------
// records

namespace {

std::string format_real(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::map<std::string, std::string> parse_kv_line(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream is(line);
  std::string item;
  while (is >> item) {
    size_t eq = item.find('=');
    if (eq != std::string::npos)
      kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return kv;
}

}  // namespace

std::string CellRecord::to_line() const {
  std::ostringstream os;
  os << "cell=" << fingerprint << " seed=" << seed
     << " mode=" << to_string(cell.mode)
     << " context=" << to_string(cell.context)
     << " dropout=" << format_real(cell.dropout)
     << " sigma=" << format_real(cell.sigma) << " cl=" << cell.ctx_layers
     << " ws=" << (cell.weight_sharing ? 1 : 0)
     << " ts=" << (cell.two_stage ? 1 : 0) << " docs=" << cell.data_docs
     << " status=" << (ok ? "ok" : "failed");
  if (ok) {
    os << " valid_loss=" << format_real(valid_loss)
       << " test_aware=" << format_real(test_aware)
       << " test_agnostic=" << format_real(test_agnostic);
    if (amb_total > 0)
      os << " amb_aware=" << format_real(amb_aware)
         << " amb_agnostic=" << format_real(amb_agnostic)
         << " amb_n=" << amb_total;
    os << " final_loss=" << format_real(final_loss) << " steps=" << steps;
  } else {
    std::string msg = error;
    for (char& c : msg)
      if (c == ' ' || c == '\n' || c == '\t') c = '_';
    os << " error=" << msg;
  }
  os << " wall_s=" << format_real(wall_s);
  return os.str();
}

std::optional<CellRecord> CellRecord::from_line(const std::string& line) {
  auto kv = parse_kv_line(line);
  if (!kv.count("cell") || !kv.count("seed") || !kv.count("status"))
    return std::nullopt;
  CellRecord r;
  r.fingerprint = kv["cell"];
  r.seed = uint64_t(std::stoll(kv["seed"]));
  r.cell.mode = integration_mode_from_string(kv["mode"]);
  r.cell.context = context_mode_from_string(kv["context"]);
  r.cell.dropout = std::stod(kv["dropout"]);
  r.cell.sigma = std::stod(kv["sigma"]);
  r.cell.ctx_layers = std::stoi(kv["cl"]);
  r.cell.weight_sharing = kv["ws"] == "1";
  r.cell.two_stage = kv["ts"] == "1";
  r.cell.data_docs = std::stoi(kv["docs"]);
  r.ok = kv["status"] == "ok";
  if (r.ok) {
    r.valid_loss = std::stod(kv["valid_loss"]);
    r.test_aware = std::stod(kv["test_aware"]);
    r.test_agnostic = std::stod(kv["test_agnostic"]);
    if (kv.count("amb_n")) {
      r.amb_total = std::stoll(kv["amb_n"]);
      r.amb_aware = std::stod(kv["amb_aware"]);
      r.amb_agnostic = std::stod(kv["amb_agnostic"]);
    }
    r.final_loss = std::stod(kv["final_loss"]);
    r.steps = std::stoll(kv["steps"]);
  } else {
    r.error = kv.count("error") ? kv["error"] : "";
  }
  if (kv.count("wall_s")) r.wall_s = std::stod(kv["wall_s"]);
  return r;
}

std::vector<CellRecord> load_records(const std::string& path) {
  std::vector<CellRecord> out;
  std::ifstream is(path);
  if (!is) return out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (auto r = CellRecord::from_line(line)) out.push_back(std::move(*r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// corpus preparation and cell execution

namespace {

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

}  // namespace

PreparedCorpus prepare_corpus(const ExperimentConfig& cfg) {
  const std::string train_path = cfg.corpus_dir + "/train.tsv";
  if (!fs::exists(train_path))
    write_corpus(generate_corpus(cfg.task), cfg.corpus_dir);

  PreparedCorpus pc;
  pc.train_docs = load_document_corpus(train_path);
  pc.valid_docs = load_document_corpus(cfg.corpus_dir + "/valid.tsv");
  pc.test_docs = load_document_corpus(cfg.corpus_dir + "/test.tsv");
  pc.corpus_hash =
      hex64(fnv1a64(file_bytes(train_path) +
                    file_bytes(cfg.corpus_dir + "/valid.tsv") +
                    file_bytes(cfg.corpus_dir + "/test.tsv")));

  const std::string bpe_path =
      cfg.corpus_dir + "/model-" + std::to_string(cfg.bpe_merges) + ".bpe";
  if (fs::exists(bpe_path)) {
    pc.bpe = BpeModel::load(bpe_path);
  } else {
    pc.bpe = BpeModel::learn(corpus_sentences(pc.train_docs, true, true),
                             cfg.bpe_merges);
    pc.bpe.save(bpe_path);
  }
  pc.src_vocab = Vocab::build(pc.bpe, corpus_sentences(pc.train_docs, true, false));
  pc.tgt_vocab = Vocab::build(pc.bpe, corpus_sentences(pc.train_docs, false, true));
  pc.train = encode_documents(pc.train_docs, pc.bpe, pc.src_vocab, pc.tgt_vocab);
  pc.valid = encode_documents(pc.valid_docs, pc.bpe, pc.src_vocab, pc.tgt_vocab);
  pc.test = encode_documents(pc.test_docs, pc.bpe, pc.src_vocab, pc.tgt_vocab);
  return pc;
}

std::string cell_fingerprint(const ExperimentConfig& cfg, const GridCell& cell,
                             uint64_t seed, const std::string& corpus_hash) {
  KvConfig kv = cfg.base_kv();
  kv.set("cell", cell.label());
  kv.set("seed", std::to_string(seed));
  kv.set("corpus", corpus_hash);
  return hex64(fnv1a64(kv.canonical()));
}

namespace {

std::string stage1_fingerprint(const ExperimentConfig& cfg,
                               const GridCell& cell, uint64_t seed,
                               const std::string& corpus_hash) {
  KvConfig kv = cfg.base_kv();
  kv.set("stage", "sentence");
  kv.set("dropout", std::to_string(cell.dropout));
  kv.set("sigma", std::to_string(cell.sigma));
  kv.set("docs", std::to_string(cell.data_docs));
  kv.set("seed", std::to_string(seed));
  kv.set("corpus", corpus_hash);
  return hex64(fnv1a64(kv.canonical()));
}

std::vector<EncodedDocument> subset_docs(
    const std::vector<EncodedDocument>& docs, int limit) {
  if (limit <= 0 || limit >= int(docs.size())) return docs;
  return std::vector<EncodedDocument>(docs.begin(), docs.begin() + limit);
}

ModelConfig cell_model_config(const ExperimentConfig& cfg,
                              const GridCell& cell,
                              const PreparedCorpus& corpus) {
  ModelConfig mc = cfg.model;
  mc.src_vocab = corpus.src_vocab.size();
  mc.tgt_vocab = corpus.tgt_vocab.size();
  mc.dropout = cell.dropout;
  mc.sigma = cell.sigma;
  mc.mode = cell.mode;
  const bool multi = cell.mode == IntegrationMode::kOutside ||
                     cell.mode == IntegrationMode::kInside;
  mc.context_encoder_layers = multi ? cell.ctx_layers : 0;
  mc.weight_sharing = multi && cell.weight_sharing;
  return mc;
}

TrainConfig cell_train_config(const ExperimentConfig& cfg,
                              const GridCell& cell, uint64_t seed,
                              bool finetune) {
  TrainConfig tc;
  tc.stage = finetune ? TrainConfig::Stage::kFinetune
                      : TrainConfig::Stage::kSentence;
  tc.max_steps = finetune ? cfg.stage2_steps : cfg.max_steps;
  tc.warmup = cfg.warmup;
  tc.lr_scale = cfg.lr_scale;
  tc.max_tokens = cfg.max_tokens;
  tc.valid_every = cfg.valid_every;
  tc.patience = cfg.patience;
  tc.seed = seed;
  tc.context_mode = cell.context;
  tc.random_policy = cfg.random_policy;
  tc.resample = cfg.resample;
  return tc;
}

}  // namespace

CellRecord run_cell(const ExperimentConfig& cfg, const GridCell& cell,
                    uint64_t seed, const PreparedCorpus& corpus) {
  auto t0 = std::chrono::steady_clock::now();
  CellRecord rec;
  rec.cell = cell;
  rec.seed = seed;
  rec.fingerprint = cell_fingerprint(cfg, cell, seed, corpus.corpus_hash);

  std::vector<EncodedDocument> train_docs =
      subset_docs(corpus.train, cell.data_docs);
  ModelConfig mc = cell_model_config(cfg, cell, corpus);
  const bool multi = mc.multi_encoder();

  // The sentence-level model for this (dropout, sigma, docs, seed) slice is
  // shared: it is both the mode-none cell's result and every two-stage
  // cell's starting point, so it is trained once and cached on disk.
  auto stage1_result = [&](ModelConfig s1_cfg) {
    const std::string s1_fp =
        stage1_fingerprint(cfg, cell, seed, corpus.corpus_hash);
    const std::string s1_path = cfg.out_dir + "/stage1-" + s1_fp + ".ckpt";
    TrainResult r1;
    if (fs::exists(s1_path)) {
      r1.best = load_checkpoint(s1_path);
      Model<TrainScalar> m = model_from_checkpoint<TrainScalar>(r1.best);
      RngStream ctx(0);
      std::vector<ContextTriple> valid_triples = make_context_triples(
          corpus.valid, ContextMode::kNone, corpus.src_vocab, ctx);
      r1.best_valid_loss = validation_loss(m, valid_triples, cfg.max_tokens);
      r1.steps = r1.best.step();
      return r1;
    }
    TrainConfig tc1 = cell_train_config(cfg, cell, seed, /*finetune=*/false);
    tc1.context_mode = ContextMode::kNone;
    r1 = train_stage1<TrainScalar>(s1_cfg, train_docs, corpus.valid,
                                   corpus.src_vocab, corpus.tgt_vocab, tc1);
    save_checkpoint(s1_path, r1.best);
    return r1;
  };

  TrainResult result;
  if (cell.mode == IntegrationMode::kNone) {
    result = stage1_result(mc);
  } else if (!multi) {
    // Single-encoder: one stage over the concatenated input.
    TrainConfig tc = cell_train_config(cfg, cell, seed, /*finetune=*/false);
    RngStream init = RngStream(seed).fork("init");
    Model<TrainScalar> model(mc, init);
    result = train_model(model, train_docs, corpus.valid, corpus.src_vocab,
                         corpus.tgt_vocab, tc);
  } else if (cell.two_stage) {
    ModelConfig stage1_cfg = mc;
    stage1_cfg.mode = IntegrationMode::kNone;
    stage1_cfg.context_encoder_layers = 0;
    stage1_cfg.weight_sharing = false;
    Checkpoint stage1 = stage1_result(stage1_cfg).best;
    TrainConfig tc2 = cell_train_config(cfg, cell, seed, /*finetune=*/true);
    result = train_stage2<TrainScalar>(stage1, mc, train_docs, corpus.valid,
                                       corpus.src_vocab, corpus.tgt_vocab, tc2);
  } else {
    // Joint training from scratch (no TS).
    TrainConfig tc = cell_train_config(cfg, cell, seed, /*finetune=*/false);
    RngStream init = RngStream(seed).fork("init");
    Model<TrainScalar> model(mc, init);
    result = train_model(model, train_docs, corpus.valid, corpus.src_vocab,
                         corpus.tgt_vocab, tc);
  }

  // Evaluation under both schemas on the shared test set.
  Model<TrainScalar> model = model_from_checkpoint<TrainScalar>(result.best);
  ContextMode test_mode =
      cell.mode == IntegrationMode::kNone ? ContextMode::kNone : cell.context;
  RngStream test_rng = context_rng(seed, test_mode, "test",
                                   TrainConfig::Resample::kFrozen, 0);
  std::vector<ContextTriple> test_triples = make_context_triples(
      corpus.test, test_mode, corpus.src_vocab, test_rng, cfg.random_policy);

  DecodeConfig aware = cfg.decode;
  aware.schema = DecodeConfig::Schema::kAware;
  DecodeConfig agnostic = cfg.decode;
  agnostic.schema = DecodeConfig::Schema::kAgnostic;

  std::vector<std::vector<std::string>> refs;
  refs.reserve(test_triples.size());
  for (const ContextTriple& t : test_triples)
    refs.push_back(decode_to_words(corpus.tgt_vocab, t.target));

  auto run_eval = [&](const DecodeConfig& dc, double& bleu_out,
                      double& amb_out) {
    std::vector<IdList> hyp_ids = decode_corpus(model, test_triples, dc);
    std::vector<std::vector<std::string>> hyps;
    hyps.reserve(hyp_ids.size());
    for (const IdList& ids : hyp_ids)
      hyps.push_back(decode_to_words(corpus.tgt_vocab, ids));
    bleu_out = corpus_bleu(hyps, refs).bleu;
    if (cfg.task.task == SynthTaskSpec::Task::kDisambiguation) {
      AmbiguousStats st = ambiguous_accuracy(hyps, refs);
      rec.amb_total = st.total;
      amb_out = st.accuracy();
    }
  };
  run_eval(aware, rec.test_aware, rec.amb_aware);
  run_eval(agnostic, rec.test_agnostic, rec.amb_agnostic);

  rec.valid_loss = result.best_valid_loss;
  rec.final_loss = result.final_train_loss;
  rec.steps = result.best.step();  // step of the retained best checkpoint
  rec.ok = true;
  rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                             t0)
                   .count();
  return rec;
}

int run_grid(const ExperimentConfig& cfg, std::ostream& progress) {
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  PreparedCorpus corpus = prepare_corpus(cfg);
  std::vector<GridCell> cells = enumerate_cells(cfg);
  const std::string records_path = cfg.out_dir + "/results.txt";

  std::vector<std::string> done;
  for (const CellRecord& r : load_records(records_path))
    if (r.ok) done.push_back(r.fingerprint);

  int failed = 0;
  int ran = 0, skipped = 0;
  for (const GridCell& cell : cells) {
    for (uint64_t seed : cfg.seeds) {
      std::string fp = cell_fingerprint(cfg, cell, seed, corpus.corpus_hash);
      if (std::find(done.begin(), done.end(), fp) != done.end()) {
        ++skipped;
        continue;
      }
      progress << "[grid] " << cell.label() << " seed=" << seed << " ..."
               << std::flush;
      CellRecord rec;
      try {
        rec = run_cell(cfg, cell, seed, corpus);
      } catch (const std::exception& e) {
        rec.cell = cell;
        rec.seed = seed;
        rec.fingerprint = fp;
        rec.ok = false;
        rec.error = e.what();
        ++failed;
      }
      std::ofstream os(records_path, std::ios::app);
      if (!os)
        throw std::runtime_error("cannot append to " + records_path);
      os << rec.to_line() << "\n";
      os.flush();
      ++ran;
      if (rec.ok)
        progress << " aware=" << format_real(rec.test_aware)
                 << " agnostic=" << format_real(rec.test_agnostic) << " ("
                 << format_real(rec.wall_s) << "s)\n";
      else
        progress << " FAILED: " << rec.error << "\n";
    }
  }
  progress << "[grid] " << ran << " run, " << skipped << " skipped, " << failed
           << " failed\n";
  return failed;
}

// ---------------------------------------------------------------------------
// reports

namespace {

struct GroupStats {
  std::vector<double> aware, agnostic;
  double mean(const std::vector<double>& v) const {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0 : s / double(v.size());
  }
  double stdev(const std::vector<double>& v) const {
    if (v.size() < 2) return 0;
    double m = mean(v), s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size() - 1));
  }
};

struct Matcher {
  std::optional<IntegrationMode> mode;
  std::optional<ContextMode> context;
  std::optional<double> dropout;
  bool sigma_positive = false;
  bool sigma_zero = false;
  std::optional<int> ctx_layers;
  std::optional<bool> ws, ts;
  std::optional<int> docs;

  bool matches(const CellRecord& r) const {
    if (mode && r.cell.mode != *mode) return false;
    if (context && r.cell.context != *context) return false;
    if (dropout && std::abs(r.cell.dropout - *dropout) > 1e-9) return false;
    if (sigma_positive && r.cell.sigma <= 0) return false;
    if (sigma_zero && r.cell.sigma != 0) return false;
    if (ctx_layers && r.cell.ctx_layers != *ctx_layers) return false;
    if (ws && r.cell.weight_sharing != *ws) return false;
    if (ts && r.cell.two_stage != *ts) return false;
    if (docs && r.cell.data_docs != *docs) return false;
    return true;
  }
};

GroupStats collect(const std::vector<CellRecord>& records, const Matcher& m) {
  GroupStats g;
  for (const CellRecord& r : records) {
    if (!r.ok || !m.matches(r)) continue;
    g.aware.push_back(r.test_aware);
    g.agnostic.push_back(r.test_agnostic);
  }
  return g;
}

std::string cell_text(const GroupStats& g, bool agnostic = false) {
  const std::vector<double>& v = agnostic ? g.agnostic : g.aware;
  if (v.empty()) return "-";
  char buf[64];
  if (v.size() == 1)
    std::snprintf(buf, sizeof(buf), "%.2f", g.mean(v));
  else
    std::snprintf(buf, sizeof(buf), "%.2f+-%.2f", g.mean(v), g.stdev(v));
  return buf;
}

std::vector<double> distinct_dropouts(const std::vector<CellRecord>& records) {
  std::vector<double> ds;
  for (const CellRecord& r : records)
    if (r.ok && std::find(ds.begin(), ds.end(), r.cell.dropout) == ds.end())
      ds.push_back(r.cell.dropout);
  std::sort(ds.begin(), ds.end());
  return ds;
}

std::string pad(const std::string& s, size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string render_table3(const std::vector<CellRecord>& records) {
  std::vector<double> drops = distinct_dropouts(records);
  if (drops.empty()) drops = {0.1};
  std::ostringstream os;
  os << pad("System", 28);
  for (double p : drops) {
    char h[32];
    std::snprintf(h, sizeof(h), "p=%.1f", p);
    os << pad(h, 16);
  }
  os << "\n";
  auto row = [&](const std::string& name, IntegrationMode mode,
                 std::optional<ContextMode> context) {
    os << pad(name, 28);
    for (double p : drops) {
      Matcher m;
      m.mode = mode;
      m.context = context;
      m.dropout = p;
      m.sigma_zero = true;
      os << pad(cell_text(collect(records, m)), 16);
    }
    os << "\n";
  };
  row("Sentence-level", IntegrationMode::kNone, ContextMode::kNone);
  row("Single-encoder", IntegrationMode::kSingleEncoder, ContextMode::kContext);
  for (IntegrationMode mode :
       {IntegrationMode::kInside, IntegrationMode::kOutside})
    for (ContextMode c : {ContextMode::kContext, ContextMode::kRandom,
                          ContextMode::kFixed})
      row(std::string(to_string(mode)) + " " + to_string(c), mode, c);
  return os.str();
}

std::string render_table2(const std::vector<CellRecord>& records) {
  std::ostringstream os;
  os << pad("System", 24) << pad("Layers", 8) << pad("WS", 5) << pad("TS", 5)
     << "BLEU\n";
  Matcher base;
  base.mode = IntegrationMode::kNone;
  base.sigma_zero = true;
  os << pad("Sentence-level", 24) << pad("-", 8) << pad("-", 5) << pad("-", 5)
     << cell_text(collect(records, base)) << "\n";
  // Every (layers, ws, ts) combination present for Outside Context.
  std::vector<std::tuple<int, bool, bool>> combos;
  for (const CellRecord& r : records) {
    if (!r.ok || r.cell.mode != IntegrationMode::kOutside ||
        r.cell.context != ContextMode::kContext || r.cell.sigma != 0)
      continue;
    auto key = std::make_tuple(r.cell.ctx_layers, r.cell.weight_sharing,
                               r.cell.two_stage);
    if (std::find(combos.begin(), combos.end(), key) == combos.end())
      combos.push_back(key);
  }
  std::sort(combos.begin(), combos.end());
  for (auto [cl, ws, ts] : combos) {
    Matcher m;
    m.mode = IntegrationMode::kOutside;
    m.context = ContextMode::kContext;
    m.sigma_zero = true;
    m.ctx_layers = cl;
    m.ws = ws;
    m.ts = ts;
    os << pad("Outside Context", 24) << pad(std::to_string(cl), 8)
       << pad(ws ? "y" : "x", 5) << pad(ts ? "y" : "x", 5)
       << cell_text(collect(records, m)) << "\n";
  }
  return os.str();
}

std::string render_table4(const std::vector<CellRecord>& records) {
  std::ostringstream os;
  os << pad("Context input", 16) << pad("Inside/Aware", 16)
     << pad("Inside/Agnostic", 17) << pad("Outside/Aware", 16)
     << "Outside/Agnostic\n";
  for (ContextMode c :
       {ContextMode::kContext, ContextMode::kRandom, ContextMode::kFixed}) {
    os << pad(to_string(c), 16);
    for (IntegrationMode mode :
         {IntegrationMode::kInside, IntegrationMode::kOutside}) {
      Matcher m;
      m.mode = mode;
      m.context = c;
      m.sigma_zero = true;
      GroupStats g = collect(records, m);
      os << pad(cell_text(g, false), 16)
         << pad(cell_text(g, true), mode == IntegrationMode::kInside ? 17 : 0);
    }
    os << "\n";
  }
  return os.str();
}

std::string render_table5(const std::vector<CellRecord>& records) {
  std::ostringstream os;
  os << pad("System", 20) << "BLEU\n";
  auto row = [&](const std::string& name, Matcher m) {
    os << pad(name, 20) << cell_text(collect(records, m)) << "\n";
  };
  Matcher baseline;
  baseline.mode = IntegrationMode::kNone;
  baseline.sigma_zero = true;
  row("Baseline", baseline);
  Matcher context;
  context.mode = IntegrationMode::kOutside;
  context.context = ContextMode::kContext;
  context.sigma_zero = true;
  row("Context", context);
  Matcher noise;
  noise.mode = IntegrationMode::kNone;
  noise.sigma_positive = true;
  row("Noise", noise);
  Matcher both;
  both.mode = IntegrationMode::kOutside;
  both.context = ContextMode::kContext;
  both.sigma_positive = true;
  row("Context+Noise", both);
  return os.str();
}

std::string render_figure2(const std::vector<CellRecord>& records) {
  std::vector<int> sizes;
  for (const CellRecord& r : records)
    if (r.ok && std::find(sizes.begin(), sizes.end(), r.cell.data_docs) ==
                    sizes.end())
      sizes.push_back(r.cell.data_docs);
  std::sort(sizes.begin(), sizes.end());
  std::ostringstream os;
  os << pad("Documents", 12) << pad("Base", 16) << pad("Inside", 16)
     << "Gaussian\n";
  for (int n : sizes) {
    os << pad(n == 0 ? "all" : std::to_string(n), 12);
    Matcher base;
    base.mode = IntegrationMode::kNone;
    base.sigma_zero = true;
    base.docs = n;
    os << pad(cell_text(collect(records, base)), 16);
    Matcher inside;
    inside.mode = IntegrationMode::kInside;
    inside.context = ContextMode::kRandom;
    inside.sigma_zero = true;
    inside.docs = n;
    os << pad(cell_text(collect(records, inside)), 16);
    Matcher gauss;
    gauss.mode = IntegrationMode::kNone;
    gauss.sigma_positive = true;
    gauss.docs = n;
    os << cell_text(collect(records, gauss)) << "\n";
  }
  return os.str();
}

}  // namespace

std::string render_report(const std::vector<CellRecord>& records,
                          const std::string& shape) {
  if (shape == "table2") return render_table2(records);
  if (shape == "table3") return render_table3(records);
  if (shape == "table4") return render_table4(records);
  if (shape == "table5") return render_table5(records);
  if (shape == "figure2") return render_figure2(records);
  throw std::invalid_argument("unknown report shape: " + shape);
}

}  // namespace ctxmt
