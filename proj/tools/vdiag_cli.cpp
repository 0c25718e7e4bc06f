// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

// Command line front end: generate -> fit-tokenizer -> pretrain -> finetune
// -> evaluate, plus attn-dump and grad-check. Each command writes into a
// staging directory under --out and moves the results into place only on
// success, together with run_manifest.json.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "vdiag/gradcheck.hpp"
#include "vdiag/pipeline.hpp"

namespace {

using namespace vdiag;

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out = ".";
};

struct Options {
  Common common;
  std::string corpus, vocab, backbone, head;
  std::string split = "test";
  std::string predictor = "model";
  std::string aggregate = "per_token";
  std::string direction;
  std::optional<int> n_train, steps, theta;
  std::optional<double> threshold;
  bool unimodal = false;
  int layer = -1, head_index = -1, index = 0;
};

// Effective configuration and where each overridden field came from.
struct Resolved {
  PipelineConfig cfg;
  std::map<std::string, std::string> sources;
};

Resolved resolve(const Options& o) {
  Resolved r;
  if (!o.common.config.empty()) {
    r.cfg = load_pipeline_config(o.common.config);
    // the file already parsed above, so this cannot fail
    const Json file = Json::parse(read_text(o.common.config));
    for (const auto& [section, fields] : file.items())
      for (const auto& [field, value] : fields.items()) r.sources[section + "." + field] = "config file";
  }
  auto flag = [&](const char* field) { r.sources[field] = "flag"; };
  if (o.common.seed) {
    r.cfg.generator.seed = r.cfg.pretrain.seed = r.cfg.finetune.seed = *o.common.seed;
    flag("generator.seed");
    flag("pretrain.seed");
    flag("finetune.seed");
  }
  if (o.n_train) r.cfg.generator.n_train = *o.n_train, flag("generator.n_train");
  if (o.steps) r.cfg.pretrain.total_steps = *o.steps, flag("pretrain.total_steps");
  if (o.theta) r.cfg.tokenizer.theta = *o.theta, flag("tokenizer.theta");
  if (o.threshold) r.cfg.finetune.threshold = *o.threshold, flag("finetune.threshold");
  if (o.unimodal) r.cfg.model.kind = BackboneKind::unimodal, flag("model.kind");
  return r;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(std::string("missing required flag ") + flag);
}

Json checksums(const fs::path& path, const fs::path& relative_to) {
  Json list = Json::array();
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) files.push_back(e.path());
  } else {
    files.push_back(path);
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    list.push_back({{"path", relative_to.empty() ? f.string() : fs::relative(f, relative_to).string()},
                    {"sha1", git_blob_sha1_file(f)}});
  return list;
}

// Collects outputs in <out>/.partial-<command>; commit() moves them into
// <out>, otherwise the destructor deletes the staging directory.
class OutputGuard {
 public:
  OutputGuard(const fs::path& out, const std::string& command)
      : out_(out), staging_(out / (".partial-" + command)), created_out_(!fs::exists(out)) {
    fs::create_directories(out_);
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~OutputGuard() {
    std::error_code ec;
    if (committed_) return;
    fs::remove_all(staging_, ec);
    if (created_out_ && fs::is_empty(out_, ec)) fs::remove(out_, ec);
  }
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;

  const fs::path& dir() const { return staging_; }

  void commit() {
    for (const auto& e : fs::directory_iterator(staging_)) {
      const fs::path target = out_ / e.path().filename();
      fs::remove_all(target);
      fs::rename(e.path(), target);
    }
    fs::remove_all(staging_);
    committed_ = true;
  }

 private:
  fs::path out_, staging_;
  bool created_out_;
  bool committed_ = false;
};

class Run {
 public:
  Run(std::string command, const Options& o, int argc, char** argv)
      : command_(std::move(command)), options_(o), resolved_(resolve(o)),
        guard_(o.common.out, command_), start_(std::chrono::steady_clock::now()) {
    for (int i = 0; i < argc; ++i) argv_.emplace_back(argv[i]);
  }

  const PipelineConfig& cfg() const { return resolved_.cfg; }
  fs::path out(const char* name) const { return guard_.dir() / name; }
  void input(const fs::path& p) { inputs_.push_back(p); }

  void finish(Json extra = Json::object()) {
    Json m;
    m["command"] = command_;
    m["argv"] = argv_;
    m["seed"] = options_.common.seed ? Json(*options_.common.seed) : Json(nullptr);
    m["config_file"] = options_.common.config.empty() ? Json(nullptr) : Json(options_.common.config);
    m["precedence"] = "flag > config file > default";
    m["overrides"] = resolved_.sources;
    const Json effective = to_json(resolved_.cfg);
    m["config_hash"] = git_blob_sha1(effective.dump());
    m["config"] = effective;
    Json inputs = Json::array();
    for (const auto& p : inputs_)
      for (auto& c : checksums(p, {})) inputs.push_back(c);
    m["inputs"] = inputs;
    m["output_dir"] = options_.common.out;
    m["outputs"] = checksums(guard_.dir(), guard_.dir());
    m["seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = *it;
    write_text(out(kManifestFile), m.dump(2) + "\n");
    guard_.commit();
  }

 private:
  std::string command_;
  Options options_;
  Resolved resolved_;
  OutputGuard guard_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::string> argv_;
  std::vector<fs::path> inputs_;
};

int cmd_generate(Run& run) {
  const auto corpus = generate(run.cfg().generator);
  write_corpus(run.out(""), corpus);
  std::printf("generated %zu/%zu/%zu train/val/test sequences, %zu labels\n", corpus.train.size(),
              corpus.val.size(), corpus.test.size(), corpus.rules.size());
  run.finish();
  return kExitOk;
}

int cmd_fit_tokenizer(Run& run, const Options& o) {
  require(o.corpus, "--corpus");
  const fs::path train = fs::path(o.corpus) / kTrainFile;
  run.input(train);
  const auto vocab = fit_tokenizer(sequences_of(read_jsonl(train)), run.cfg().tokenizer);
  write_text(run.out(kVocabFile), vocab.to_json());
  std::printf("vocabulary: %zu ecus, %zu base codes, %zu descriptions, %zu units, %d value tokens\n",
              vocab.ecus.size(), vocab.bases.size(), vocab.descriptions.size(), vocab.units.size(),
              vocab.values.total_tokens());
  run.finish();
  return kExitOk;
}

int cmd_pretrain(Run& run, const Options& o) {
  require(o.corpus, "--corpus");
  require(o.vocab, "--vocab");
  const fs::path train_path = fs::path(o.corpus) / kTrainFile;
  run.input(train_path);
  run.input(o.vocab);
  const auto vocab = read_vocab(o.vocab);
  const auto& cfg = run.cfg();
  const auto model_cfg = resolve_model(cfg.model, vocab);
  const auto train = tokenize_all(read_jsonl(train_path), vocab, model_cfg.positional);
  auto model = Backbone::create(model_cfg, cfg.pretrain.seed);
  const auto result = pretrain(model, train, cfg.pretrain, [](const PretrainLogRow& r) {
    if (r.step % 100 == 0)
      std::fprintf(stderr, "step %d loss %.4f l_dtc %.4f\n", r.step, r.l_total, r.l_dtc);
  });
  if (result.diverged)
    throw NumericalError("pretrain: loss became non-finite at step " +
                         std::to_string(result.log.empty() ? 0 : result.log.back().step));
  write_pretrain_log(run.out(kPretrainLog), result.log);
  save_backbone(run.out(kBackboneDir), model, vocab);
  const int steps = static_cast<int>(result.log.size());
  const double final_dtc = result.log.empty() ? 0.0 : result.log.back().l_dtc;
  std::printf("%s pretraining: %d steps, final l_dtc %.4f\n",
              model.multimodal() ? "multimodal" : "unimodal", steps, final_dtc);
  run.finish({{"final_l_dtc", final_dtc}});
  return kExitOk;
}

int cmd_finetune(Run& run, const Options& o) {
  require(o.corpus, "--corpus");
  require(o.backbone, "--backbone");
  run.input(fs::path(o.corpus) / kTrainFile);
  run.input(fs::path(o.corpus) / kValFile);
  run.input(fs::path(o.corpus) / kRulesFile);
  run.input(o.backbone);
  const auto corpus = read_corpus(o.corpus);
  const auto bb = load_backbone(o.backbone);
  const auto& pos = bb.model.config().positional;
  const auto train_x = extract_features(bb.model, tokenize_all(corpus.train, bb.vocab, pos));
  const auto val_x = extract_features(bb.model, tokenize_all(corpus.val, bb.vocab, pos));
  const auto ft = resolve_finetune(run.cfg().finetune, bb.model);
  const auto result = finetune_head(train_x, labels_of(corpus.train, corpus.label_count()), val_x,
                                    labels_of(corpus.val, corpus.label_count()), ft);
  std::string log = "epoch,train_loss,val_sample_f1\n";
  char line[128];
  for (const auto& r : result.log) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_sample_f1);
    log += line;
  }
  write_text(run.out(kFinetuneLog), log);
  save_head(run.out(kHeadDir), result.head, ft);
  std::printf("head trained for %d epochs, best epoch %d, validation sample F1 %.4f\n",
              result.epochs_run, result.best_epoch, result.best_val_sample_f1);
  run.finish({{"best_epoch", result.best_epoch}});
  return kExitOk;
}

int cmd_evaluate(Run& run, const Options& o) {
  require(o.corpus, "--corpus");
  const auto corpus = read_corpus(o.corpus);
  const auto& records = corpus.split(o.split);
  run.input(fs::path(o.corpus) / (o.split + ".jsonl"));
  run.input(fs::path(o.corpus) / kRulesFile);
  const auto labels = labels_of(records, corpus.label_count());
  ScoreMatrix scores;
  if (o.predictor == "oracle") {
    for (const auto& row : labels) scores.emplace_back(row.begin(), row.end());
  } else if (o.predictor == "model") {
    require(o.backbone, "--backbone");
    require(o.head, "--head");
    run.input(o.backbone);
    run.input(o.head);
    const auto bb = load_backbone(o.backbone);
    const auto head = load_head(o.head);
    scores = predict(head, extract_features(bb.model, tokenize_all(records, bb.vocab,
                                                                   bb.model.config().positional)));
  } else {
    throw ValidationError("--predictor must be model or oracle, got '" + o.predictor + "'");
  }
  const auto report = compute_metrics(scores, labels, run.cfg().finetune.threshold);
  if (!report.complete())
    throw ValidationError("evaluate: AUROC (Micro) is undefined on split '" + o.split +
                          "' (it needs both positive and negative labels)");
  write_text(run.out(kMetricsFile), report.to_json());
  write_text(run.out(kScoresFile), scores_csv(records, scores));
  std::fputs(report.to_json().c_str(), stdout);
  run.finish();
  return kExitOk;
}

int cmd_attn_dump(Run& run, const Options& o) {
  require(o.corpus, "--corpus");
  require(o.backbone, "--backbone");
  const auto corpus = read_corpus(o.corpus);
  const auto& records = corpus.split(o.split);
  if (o.index < 0 || static_cast<std::size_t>(o.index) >= records.size())
    throw ValidationError("--index " + std::to_string(o.index) + " is outside split '" + o.split +
                          "' of " + std::to_string(records.size()) + " sequences");
  run.input(fs::path(o.corpus) / (o.split + ".jsonl"));
  run.input(o.backbone);
  const auto bb = load_backbone(o.backbone);
  const auto pair = tokenize(records[static_cast<std::size_t>(o.index)].sequence, bb.vocab,
                             bb.model.config().positional);
  const auto out = bb.model.forward(pair, true);
  AttentionFilter filter{o.layer, o.head_index, o.direction};
  if (!o.direction.empty()) direction_from_string(o.direction);  // rejects unknown names
  if (o.aggregate == "per_token") {
    write_text(run.out("attention.csv"), attention_csv(out.records, filter));
  } else if (o.aggregate == "per_unit") {
    if (!bb.model.multimodal())
      throw ValidationError("attn-dump: per_unit aggregation needs a multimodal backbone");
    write_text(run.out("attention_units.csv"), attention_units_csv(out.records, pair.raw_units, filter));
  } else {
    throw ValidationError("--aggregate must be per_token or per_unit, got '" + o.aggregate + "'");
  }
  run.finish({{"vehicle_id", records[static_cast<std::size_t>(o.index)].sequence.vehicle_id}});
  return kExitOk;
}

int cmd_grad_check(Run& run, const Options& o) {
  const auto report = run_grad_check_suite(o.common.seed.value_or(0));
  write_text(run.out("grad_check.json"), report.to_json());
  for (const auto& c : report.cases)
    std::printf("%-34s max rel err %.3e  tol %.0e  %s\n", c.name.c_str(), c.max_rel_error,
                c.tolerance, c.passed() ? "ok" : "FAIL");
  std::printf("grad-check %s in %.2f s\n", report.passed() ? "passed" : "FAILED", report.seconds);
  if (!report.passed()) throw NumericalError("grad-check: gradient mismatch above tolerance");
  run.finish();
  return kExitOk;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--seed", o.common.seed, "Seed for every random stream of the command");
  sub->add_option("--config", o.common.config, "Pipeline config JSON")->check(CLI::ExistingFile);
  sub->add_option("--out", o.common.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vdiag: multimodal error-pattern prediction from DTC and environment streams"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus and its rule manifest");
  gen->add_option("--n-train", o.n_train, "Train sequences to generate");

  auto* fit = app.add_subcommand("fit-tokenizer", "Fit the vocabulary on the train split");
  fit->add_option("--corpus", o.corpus, "Corpus directory");
  fit->add_option("--theta", o.theta, "Quantile bins per unit");

  auto* pre = app.add_subcommand("pretrain", "Masked-token pretraining of a backbone");
  pre->add_option("--corpus", o.corpus, "Corpus directory");
  pre->add_option("--vocab", o.vocab, "vocab.json from fit-tokenizer");
  pre->add_flag("--unimodal", o.unimodal, "Train the DTC-only self-attention baseline");
  pre->add_option("--steps", o.steps, "Optimizer steps");

  auto* fine = app.add_subcommand("finetune", "Train the classifier head on frozen features");
  fine->add_option("--corpus", o.corpus, "Corpus directory");
  fine->add_option("--backbone", o.backbone, "Backbone checkpoint directory");

  auto* eval = app.add_subcommand("evaluate", "Write the metrics report of one split");
  eval->add_option("--corpus", o.corpus, "Corpus directory");
  eval->add_option("--backbone", o.backbone, "Backbone checkpoint directory");
  eval->add_option("--head", o.head, "Classifier head checkpoint directory");
  eval->add_option("--split", o.split, "train, val or test");
  eval->add_option("--predictor", o.predictor, "model, or oracle for the true labels");
  eval->add_option("--threshold", o.threshold, "Decision threshold");

  auto* attn = app.add_subcommand("attn-dump", "Export attention scores of one sequence as CSV");
  attn->add_option("--corpus", o.corpus, "Corpus directory");
  attn->add_option("--backbone", o.backbone, "Backbone checkpoint directory");
  attn->add_option("--split", o.split, "train, val or test");
  attn->add_option("--index", o.index, "Sequence index within the split");
  attn->add_option("--layer", o.layer, "Layer to export (default all)");
  attn->add_option("--head", o.head_index, "Head to export (default all)");
  attn->add_option("--direction", o.direction, "dtc_to_env, env_to_dtc, self_dtc or self_env");
  attn->add_option("--aggregate", o.aggregate, "per_token or per_unit");

  auto* grad = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");

  for (auto* sub : {gen, fit, pre, fine, eval, attn, grad}) add_common(sub, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  auto* sub = app.get_subcommands().front();
  try {
    Run run(sub->get_name(), o, argc, argv);
    if (sub == gen) return cmd_generate(run);
    if (sub == fit) return cmd_fit_tokenizer(run, o);
    if (sub == pre) return cmd_pretrain(run, o);
    if (sub == fine) return cmd_finetune(run, o);
    if (sub == eval) return cmd_evaluate(run, o);
    if (sub == attn) return cmd_attn_dump(run, o);
    return cmd_grad_check(run, o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
