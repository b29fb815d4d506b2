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

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "ctxmt/harness.hpp"

using namespace ctxmt;

namespace {

ExperimentConfig config_from_path(const std::string& path) {
  return ExperimentConfig::from_kv(path.empty() ? KvConfig{}
                                                : KvConfig::parse_file(path));
}

/// Single-run setup shared by train/translate/evaluate: config file first,
/// then flag overrides.
struct RunFlags {
  std::string config_path;
  uint64_t seed = 1;
  std::string mode = "none";
  std::string context = "context";
  double sigma = -1;    // <0: keep config value
  double dropout = -1;  // <0: keep config value
  std::string schema = "aware";
  int beam = -1;
  std::string out;

  GridCell cell(const ExperimentConfig& cfg) const {
    GridCell c;
    c.mode = integration_mode_from_string(mode);
    c.context = c.mode == IntegrationMode::kNone
                    ? ContextMode::kNone
                    : context_mode_from_string(context);
    c.dropout = dropout >= 0 ? dropout : cfg.model.dropout;
    c.sigma = sigma >= 0 ? sigma : 0.0;
    c.ctx_layers = cfg.ctx_layers.empty() ? 1 : cfg.ctx_layers.front();
    c.weight_sharing = !cfg.sharing.empty() && cfg.sharing.front();
    c.two_stage = true;
    return c;
  }
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config_path, "key = value config file");
  cmd->add_option("--seed", f.seed, "run seed");
  cmd->add_option("--mode", f.mode, "integration mode")
      ->check(CLI::IsMember({"none", "single", "outside", "inside"}));
  cmd->add_option("--context", f.context, "context input mode")
      ->check(CLI::IsMember({"context", "random", "fixed"}));
  cmd->add_option("--sigma", f.sigma, "encoder-output noise scale");
  cmd->add_option("--dropout", f.dropout, "dropout probability");
  cmd->add_option("--beam", f.beam, "beam size");
}

std::vector<ContextTriple> test_triples_for(const ExperimentConfig& cfg,
                                            const PreparedCorpus& corpus,
                                            ContextMode mode, uint64_t seed) {
  RngStream rng =
      context_rng(seed, mode, "test", TrainConfig::Resample::kFrozen, 0);
  return make_context_triples(corpus.test, mode, corpus.src_vocab, rng,
                              cfg.random_policy);
}

int cmd_gen_corpus(const RunFlags& f, const std::string& out_dir) {
  ExperimentConfig cfg = config_from_path(f.config_path);
  if (!out_dir.empty()) cfg.corpus_dir = out_dir;
  GeneratedCorpus corpus = generate_corpus(cfg.task);
  write_corpus(corpus, cfg.corpus_dir);
  int sentences = 0;
  for (const Document& d : corpus.train) sentences += int(d.pairs.size());
  std::cout << "wrote " << cfg.corpus_dir << ": " << corpus.train.size()
            << " train documents (" << sentences << " pairs), "
            << corpus.valid.size() << " valid, " << corpus.test.size()
            << " test\n";
  return 0;
}

int cmd_learn_bpe(const std::string& corpus_path, int merges,
                  const std::string& out) {
  std::vector<Document> docs = load_document_corpus(corpus_path);
  BpeModel bpe = BpeModel::learn(corpus_sentences(docs, true, true), merges);
  bpe.save(out);
  std::cout << "learned " << bpe.merges.size() << " merges -> " << out << "\n";
  return 0;
}

int cmd_train(const RunFlags& f, const std::string& stage,
              const std::string& init_path) {
  ExperimentConfig cfg = config_from_path(f.config_path);
  PreparedCorpus corpus = prepare_corpus(cfg);
  GridCell cell = f.cell(cfg);
  ModelConfig mc = cfg.model;
  mc.src_vocab = corpus.src_vocab.size();
  mc.tgt_vocab = corpus.tgt_vocab.size();
  mc.dropout = cell.dropout;
  mc.sigma = cell.sigma;
  mc.mode = cell.mode;
  const bool multi = mc.multi_encoder();
  mc.context_encoder_layers = multi ? cell.ctx_layers : 0;
  mc.weight_sharing = multi && cell.weight_sharing;

  TrainConfig tc;
  tc.seed = f.seed;
  tc.warmup = cfg.warmup;
  tc.lr_scale = cfg.lr_scale;
  tc.max_tokens = cfg.max_tokens;
  tc.valid_every = cfg.valid_every;
  tc.patience = cfg.patience;
  tc.random_policy = cfg.random_policy;
  tc.resample = cfg.resample;

  TrainResult result;
  if (stage == "sentence") {
    tc.max_steps = cfg.max_steps;
    result = train_stage1<TrainScalar>(mc, corpus.train, corpus.valid,
                                       corpus.src_vocab, corpus.tgt_vocab, tc);
  } else {
    if (init_path.empty())
      throw std::runtime_error("--stage finetune requires --init <stage-1 checkpoint>");
    if (!multi)
      throw std::runtime_error("--stage finetune requires --mode outside|inside");
    tc.max_steps = cfg.stage2_steps;
    tc.context_mode = cell.context;
    result = train_stage2<TrainScalar>(load_checkpoint(init_path), mc,
                                       corpus.train, corpus.valid,
                                       corpus.src_vocab, corpus.tgt_vocab, tc);
  }

  std::string out = f.out.empty() ? "model.ckpt" : f.out;
  save_checkpoint(out, result.best);
  std::ofstream log(out + ".log");
  for (const std::string& line : result.log) log << line << "\n";
  std::cout << "trained " << result.steps << " steps, best valid loss "
            << result.best_valid_loss << "; checkpoint -> " << out << "\n";
  return 0;
}

int cmd_translate(const RunFlags& f, const std::string& ckpt_path,
                  const std::string& input_path,
                  const std::string& context_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Model<TrainScalar> model = model_from_checkpoint<TrainScalar>(ck);
  Vocab src_vocab = ck.src_vocab();
  Vocab tgt_vocab = ck.tgt_vocab();
  ExperimentConfig cfg = config_from_path(f.config_path);

  BpeModel bpe;
  std::string bpe_path =
      cfg.corpus_dir + "/model-" + std::to_string(cfg.bpe_merges) + ".bpe";
  bpe = BpeModel::load(bpe_path);

  std::vector<Document> docs = load_document_corpus(input_path);
  std::vector<EncodedDocument> enc =
      encode_documents(docs, bpe, src_vocab, tgt_vocab);
  ContextMode mode = model.cfg.mode == IntegrationMode::kNone
                         ? ContextMode::kNone
                         : context_mode_from_string(f.context);
  RngStream rng =
      context_rng(f.seed, mode, "test", TrainConfig::Resample::kFrozen, 0);
  std::vector<ContextTriple> triples =
      make_context_triples(enc, mode, src_vocab, rng, cfg.random_policy);

  // An explicit context file overrides the derived contexts line-by-line.
  if (!context_path.empty()) {
    std::ifstream is(context_path);
    if (!is) throw std::runtime_error("cannot open " + context_path);
    std::string line;
    size_t i = 0;
    while (std::getline(is, line) && i < triples.size())
      triples[i++].context = encode_sentence(bpe, src_vocab, line);
  }

  DecodeConfig dc = cfg.decode;
  if (f.beam > 0) dc.beam = f.beam;
  dc.schema = f.schema == "agnostic" ? DecodeConfig::Schema::kAgnostic
                                     : DecodeConfig::Schema::kAware;
  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!f.out.empty()) {
    file.open(f.out);
    if (!file) throw std::runtime_error("cannot write " + f.out);
    os = &file;
  }
  for (const ContextTriple& t : triples)
    *os << decode_ids(tgt_vocab, decode_triple(model, t, dc)) << "\n";
  return 0;
}

int cmd_evaluate(const RunFlags& f, const std::string& ckpt_path,
                 const std::string& input_path) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  Model<TrainScalar> model = model_from_checkpoint<TrainScalar>(ck);
  Vocab src_vocab = ck.src_vocab();
  Vocab tgt_vocab = ck.tgt_vocab();
  ExperimentConfig cfg = config_from_path(f.config_path);
  BpeModel bpe = BpeModel::load(cfg.corpus_dir + "/model-" +
                                std::to_string(cfg.bpe_merges) + ".bpe");
  std::vector<Document> docs = load_document_corpus(input_path);
  std::vector<EncodedDocument> enc =
      encode_documents(docs, bpe, src_vocab, tgt_vocab);
  ContextMode mode = model.cfg.mode == IntegrationMode::kNone
                         ? ContextMode::kNone
                         : context_mode_from_string(f.context);
  RngStream rng =
      context_rng(f.seed, mode, "test", TrainConfig::Resample::kFrozen, 0);
  std::vector<ContextTriple> triples =
      make_context_triples(enc, mode, src_vocab, rng, cfg.random_policy);
  DecodeConfig dc = cfg.decode;
  if (f.beam > 0) dc.beam = f.beam;
  dc.schema = f.schema == "agnostic" ? DecodeConfig::Schema::kAgnostic
                                     : DecodeConfig::Schema::kAware;
  std::vector<std::string> hyps;
  BleuReport report = evaluate_model(model, triples, tgt_vocab, dc,
                                     f.out.empty() ? nullptr : &hyps);
  if (!f.out.empty()) {
    std::ofstream os(f.out);
    for (const std::string& h : hyps) os << h << "\n";
  }
  std::cout << report.summary() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctxmt: context-aware NMT laboratory"};
  app.require_subcommand(1);

  RunFlags flags;
  std::string out_dir, corpus_path, ckpt_path, input_path, context_path;
  std::string stage = "sentence", init_path, shape = "table3", records_path;
  int merges = 300;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
  add_run_flags(gen, flags);
  gen->add_option("--out", out_dir, "corpus directory");

  auto* bpe = app.add_subcommand("learn-bpe", "learn a BPE merge table");
  bpe->add_option("--corpus", corpus_path, "corpus file")->required();
  bpe->add_option("--merges", merges, "number of merges");
  bpe->add_option("--out", flags.out, "output model file")->required();

  auto* train = app.add_subcommand("train", "train one model");
  add_run_flags(train, flags);
  train->add_option("--stage", stage, "training stage")
      ->check(CLI::IsMember({"sentence", "finetune"}));
  train->add_option("--init", init_path, "stage-1 checkpoint for finetune");
  train->add_option("--out", flags.out, "checkpoint output path");

  auto* translate = app.add_subcommand("translate", "decode a corpus file");
  add_run_flags(translate, flags);
  translate->add_option("--schema", flags.schema, "inference schema")
      ->check(CLI::IsMember({"aware", "agnostic"}));
  translate->add_option("--checkpoint", ckpt_path, "model checkpoint")
      ->required();
  translate->add_option("--input", input_path, "corpus file to translate")
      ->required();
  translate->add_option("--context-file", context_path,
                        "plain-text context sentences (one per line)");
  translate->add_option("--out", flags.out, "hypothesis output file");

  auto* evaluate = app.add_subcommand("evaluate", "decode and score BLEU");
  add_run_flags(evaluate, flags);
  evaluate->add_option("--schema", flags.schema, "inference schema")
      ->check(CLI::IsMember({"aware", "agnostic"}));
  evaluate->add_option("--checkpoint", ckpt_path, "model checkpoint")
      ->required();
  evaluate->add_option("--input", input_path, "test corpus file")->required();
  evaluate->add_option("--out", flags.out, "hypothesis output file");

  auto* grid = app.add_subcommand("run-grid", "run an experiment grid");
  grid->add_option("--config", flags.config_path, "experiment config file")
      ->required();
  grid->add_option("--seed", flags.seed, "unused; seeds come from the config");

  auto* report = app.add_subcommand("report", "render a results table");
  report->add_option("--config", flags.config_path, "experiment config file");
  report->add_option("--records", records_path, "results file");
  report->add_option("--shape", shape, "table2|table3|table4|table5|figure2");
  report->add_option("--out", flags.out, "output file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(flags, out_dir);
    if (bpe->parsed()) return cmd_learn_bpe(corpus_path, merges, flags.out);
    if (train->parsed()) return cmd_train(flags, stage, init_path);
    if (translate->parsed())
      return cmd_translate(flags, ckpt_path, input_path, context_path);
    if (evaluate->parsed()) return cmd_evaluate(flags, ckpt_path, input_path);
    if (grid->parsed()) {
      ExperimentConfig cfg = config_from_path(flags.config_path);
      int failed = run_grid(cfg, std::cout);
      return failed == 0 ? 0 : 1;
    }
    if (report->parsed()) {
      ExperimentConfig cfg = config_from_path(flags.config_path);
      std::string path =
          records_path.empty() ? cfg.out_dir + "/results.txt" : records_path;
      std::string table = render_report(load_records(path), shape);
      if (!flags.out.empty()) {
        std::ofstream os(flags.out);
        if (!os) throw std::runtime_error("cannot write " + flags.out);
        os << table;
      }
      std::cout << table;
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
