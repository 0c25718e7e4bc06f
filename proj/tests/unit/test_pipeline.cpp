// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "vdiag/config.hpp"
#include "vdiag/pipeline.hpp"

using namespace vdiag;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vdiag-test-" + name);
  fs::remove_all(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(VDIAG_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

GeneratorConfig tiny_generator() {
  GeneratorConfig g;
  g.seed = 2;
  g.n_train = 12;
  g.dtc_length_mean = 8;
  g.dtc_length_sd = 2;
  g.env_ratio_mean = 3;
  g.env_ratio_sd = 1;
  return g;
}

}  // namespace

TEST_CASE("git blob ids match git hash-object") {
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  const auto dir = scratch("sha");
  fs::create_directories(dir);
  write_text(dir / "f.txt", "hello\n");
  CHECK(git_blob_sha1_file(dir / "f.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
  fs::remove_all(dir);
}

TEST_CASE("config: defaults, partial sections, round trip") {
  const auto cfg = pipeline_config_from_json(R"({"pretrain": {"lr": 0.01}, "model": {"d": 16}})");
  CHECK(cfg.pretrain.lr == 0.01);
  CHECK(cfg.pretrain.total_steps == PretrainConfig{}.total_steps);
  CHECK(cfg.model.encoder.d == 16);
  CHECK(cfg.generator.n_train == GeneratorConfig{}.n_train);
  const auto text = to_json(cfg).dump();
  CHECK(to_json(pipeline_config_from_json(text)).dump() == text);
  CHECK(to_json(pipeline_config_from_json("{}")).dump() == to_json(PipelineConfig{}).dump());
}

TEST_CASE("config: unknown or mistyped entries are rejected by name") {
  auto message = [](const std::string& text) {
    try {
      pipeline_config_from_json(text);
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  CHECK(message(R"({"pretrain": {"learning_rate": 1}})").find("pretrain.learning_rate") != std::string::npos);
  CHECK(message(R"({"optimizer": {}})").find("optimizer") != std::string::npos);
  CHECK(message(R"({"pretrain": {"lr": "fast"}})").find("pretrain.lr") != std::string::npos);
  CHECK(message("[1, 2]") != "accepted");
  CHECK(message("{not json") != "accepted");
}

TEST_CASE("corpus files round-trip") {
  const auto dir = scratch("corpus");
  const auto corpus = generate(tiny_generator());
  write_corpus(dir, corpus);
  const auto back = read_corpus(dir);
  CHECK(back.train == corpus.train);
  CHECK(back.val == corpus.val);
  CHECK(back.test == corpus.test);
  CHECK(back.label_count() == static_cast<int>(corpus.rules.size()));
  CHECK(&back.split("val") == &back.val);
  CHECK_THROWS_AS(back.split("holdout"), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("backbone and head checkpoints round-trip exactly") {
  const auto dir = scratch("ckpt");
  const auto corpus = generate(tiny_generator());
  TokenizerConfig tc;
  tc.theta = 8;
  const auto vocab = fit_tokenizer(sequences_of(corpus.train), tc);
  ModelConfig mc;
  mc.encoder.d = 8;
  mc.encoder.heads = 2;
  const auto model = Backbone::create(resolve_model(mc, vocab), 3);
  save_backbone(dir / "backbone", model, vocab);
  const auto loaded = load_backbone(dir / "backbone");
  CHECK(loaded.vocab == vocab);
  const auto pair = tokenize(corpus.train[0].sequence, vocab);
  NoGradGuard guard;
  const auto a = model.cls_features(model.forward(pair));
  const auto b = loaded.model.cls_features(loaded.model.forward(pair));
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  FinetuneConfig fc = resolve_finetune(FinetuneConfig{}, model);
  CHECK(fc.hidden_width == 16);
  Rng rng(4);
  const auto head = ClassifierHead::create(model.feature_width(), fc.hidden_width, 24, fc.hidden_blocks, rng);
  save_head(dir / "head", head, fc);
  const auto head2 = load_head(dir / "head");
  CHECK(predict(head, a) == predict(head2, a));

  // a checkpoint of the wrong kind is refused
  CHECK_THROWS_AS(load_head(dir / "backbone"), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("csv exports") {
  CorpusRecord r;
  r.sequence.vehicle_id = "v9";
  const auto csv = scores_csv({r}, {{0.25, 1.0}});
  CHECK(csv.rfind("vehicle_id,label_0,label_1\nv9,", 0) == 0);

  AttentionRecord rec;
  rec.layer = 1;
  rec.head = 0;
  rec.direction = Direction::dtc_to_env;
  rec.rows = 2;
  rec.cols = 3;
  rec.scores = {0.5, 0.5, 0.0, 0.2, 0.3, 0.5};
  const auto all = attention_csv({rec}, AttentionFilter{});
  CHECK(all.rfind("layer,head,direction,query_index,key_index,score\n", 0) == 0);
  CHECK(std::count(all.begin(), all.end(), '\n') == 6);  // header + 5 non-zero scores
  AttentionFilter other;
  other.layer = 0;
  const auto none = attention_csv({rec}, other);
  CHECK(std::count(none.begin(), none.end(), '\n') == 1);
  const std::vector<int> units{4, 4};
  const auto per_unit = attention_units_csv({rec}, units, AttentionFilter{});
  // row 0 is the [CLS] slot (unit -1); the two status rows share unit 4
  std::istringstream lines(per_unit);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "layer,head,unit,mass");
  std::vector<std::pair<std::string, double>> rows;
  while (std::getline(lines, line)) {
    const auto cut = line.rfind(',');
    rows.emplace_back(line.substr(0, cut), std::stod(line.substr(cut + 1)));
  }
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].first == "1,0,-1");
  CHECK(rows[0].second == Catch::Approx(0.2).margin(1e-15));
  CHECK(rows[1].first == "1,0,4");
  CHECK(rows[1].second == Catch::Approx(0.8).margin(1e-15));
}

TEST_CASE("cli: flag beats config file beats default; manifest checksums hold") {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  write_text(dir / "cfg.json", R"({"generator": {"n_train": 9, "seed": 4, "dtc_length_mean": 8}})");
  const auto out = dir / "corpus";
  REQUIRE(run_cli("generate --config " + (dir / "cfg.json").string() + " --n-train 7 --out " + out.string()) == 0);
  const auto manifest = nlohmann::json::parse(read_text(out / kManifestFile));
  CHECK(manifest["config"]["generator"]["n_train"] == 7);
  CHECK(manifest["config"]["generator"]["seed"] == 4);
  CHECK(manifest["config"]["generator"]["dtc_length_sd"] == GeneratorConfig{}.dtc_length_sd);
  CHECK(manifest["overrides"]["generator.n_train"] == "flag");
  CHECK(manifest["overrides"]["generator.seed"] == "config file");
  CHECK(read_corpus(out).train.size() == 7);
  for (const auto& o : manifest["outputs"])
    CHECK(git_blob_sha1_file(out / o["path"].get<std::string>()) == o["sha1"].get<std::string>());
  CHECK(manifest["config_hash"].get<std::string>().size() == 40);
  CHECK_FALSE(fs::exists(out / ".partial-generate"));
  fs::remove_all(dir);
}

TEST_CASE("cli: bad input exits 2 and leaves no partial output") {
  const auto dir = scratch("cli-bad");
  fs::create_directories(dir);
  write_text(dir / "bad.json", R"({"generator": {"n_ecu": 1}})");
  const auto out = dir / "never";
  CHECK(run_cli("generate --config " + (dir / "bad.json").string() + " --out " + out.string()) == 2);
  CHECK_FALSE(fs::exists(out));
  CHECK(run_cli("evaluate --corpus " + (dir / "missing").string() + " --out " + out.string()) == 2);
  CHECK_FALSE(fs::exists(out));
  CHECK(run_cli("no-such-command") == 2);
  fs::remove_all(dir);
}
