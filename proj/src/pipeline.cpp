// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/pipeline.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

namespace vdiag {

const std::vector<CorpusRecord>& CorpusSplits::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ValidationError("split must be train, val or test, got '" + name + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
  if (!out) throw ValidationError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_corpus(const fs::path& dir, const GeneratedCorpus& corpus) {
  fs::create_directories(dir);
  write_jsonl(dir / kTrainFile, corpus.train);
  write_jsonl(dir / kValFile, corpus.val);
  write_jsonl(dir / kTestFile, corpus.test);
  write_text(dir / kRulesFile, manifest_json(corpus.rules));
}

CorpusSplits read_corpus(const fs::path& dir) {
  CorpusSplits c;
  c.train = read_jsonl(dir / kTrainFile);
  c.val = read_jsonl(dir / kValFile);
  c.test = read_jsonl(dir / kTestFile);
  c.rules = rules_from_manifest(read_text(dir / kRulesFile));
  return c;
}

std::vector<RawSequence> sequences_of(const std::vector<CorpusRecord>& records) {
  std::vector<RawSequence> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.sequence);
  return out;
}

LabelMatrix labels_of(const std::vector<CorpusRecord>& records, int k) {
  std::vector<std::vector<int>> sets;
  sets.reserve(records.size());
  for (const auto& r : records) sets.push_back(r.labels);
  return to_label_matrix(sets, k);
}

std::vector<TokenizedPair> tokenize_all(const std::vector<CorpusRecord>& records,
                                        const TokenizerVocab& vocab, const PositionalConfig& pos) {
  std::vector<TokenizedPair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(tokenize(r.sequence, vocab, pos));
  return out;
}

ModelConfig resolve_model(const ModelConfig& cfg, const TokenizerVocab& vocab) {
  ModelConfig out = cfg;
  const auto sizes = vocab.embedding_config(cfg.encoder.d);
  out.embedding.d = cfg.encoder.d;
  out.embedding.n_ecu = sizes.n_ecu;
  out.embedding.n_base = sizes.n_base;
  out.embedding.n_desc = sizes.n_desc;
  out.embedding.n_value = sizes.n_value;
  out.embedding.n_units = sizes.n_units;
  return out;
}

FinetuneConfig resolve_finetune(const FinetuneConfig& cfg, const Backbone& backbone) {
  FinetuneConfig out = cfg;
  if (out.hidden_width == 0) out.hidden_width = 2 * backbone.config().encoder.d;
  return out;
}

TokenizerVocab read_vocab(const fs::path& path) { return TokenizerVocab::from_json(read_text(path)); }

void write_pretrain_log(const fs::path& path, const std::vector<PretrainLogRow>& log) {
  std::ostringstream out;
  out << "step,l_total,l_dtc,l_value,l_desc,lr,grad_norm\n";
  char line[256];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.l_total,
                  r.l_dtc, r.l_value, r.l_desc, r.lr, r.grad_norm);
    out << line;
  }
  write_text(path, out.str());
}

void save_backbone(const fs::path& dir, const Backbone& model, const TokenizerVocab& vocab) {
  save_checkpoint(dir, "backbone", model_to_json(model.config()), model.parameters());
  write_text(dir / kVocabFile, vocab.to_json());
}

LoadedBackbone load_backbone(const fs::path& dir) {
  const Json manifest = read_checkpoint_manifest(dir, "backbone");
  const ModelConfig cfg = model_from_json(manifest.at("config"));
  LoadedBackbone out{Backbone::create(cfg, 0), read_vocab(dir / kVocabFile)};
  auto params = out.model.parameters();
  load_parameters(dir, params);
  const auto sizes = out.vocab.embedding_config(cfg.encoder.d);
  if (sizes.n_base != cfg.embedding.n_base || sizes.n_value != cfg.embedding.n_value ||
      sizes.n_desc != cfg.embedding.n_desc)
    throw ValidationError("checkpoint: vocabulary in " + dir.string() + " does not match the model");
  return out;
}

void save_head(const fs::path& dir, const ClassifierHead& head, const FinetuneConfig& cfg) {
  Json config = to_json(cfg);
  config["in_width"] = head.in_width();
  config["hidden"] = static_cast<int>(head.input.weight.cols());
  config["labels"] = head.labels();
  config["blocks"] = static_cast<int>(head.blocks.size());
  save_checkpoint(dir, "classifier", config, head.parameters());
}

ClassifierHead load_head(const fs::path& dir) {
  const Json manifest = read_checkpoint_manifest(dir, "classifier");
  const Json& c = manifest.at("config");
  auto get = [&](const char* key) {
    if (!c.contains(key) || !c.at(key).is_number_integer())
      throw ValidationError("checkpoint: classifier config lacks '" + std::string(key) + "'");
    return c.at(key).get<int>();
  };
  Rng rng(0);
  auto head = ClassifierHead::create(get("in_width"), get("hidden"), get("labels"), get("blocks"), rng);
  auto params = head.parameters();
  load_parameters(dir, params);
  return head;
}

std::string scores_csv(const std::vector<CorpusRecord>& records, const ScoreMatrix& scores) {
  if (records.size() != scores.size())
    throw DimensionError("scores: " + std::to_string(scores.size()) + " rows for " +
                         std::to_string(records.size()) + " records");
  std::ostringstream out;
  out << "vehicle_id";
  const std::size_t k = scores.empty() ? 0 : scores.front().size();
  for (std::size_t c = 0; c < k; ++c) out << ",label_" << c;
  out << '\n';
  char buf[32];
  for (std::size_t b = 0; b < records.size(); ++b) {
    out << records[b].sequence.vehicle_id;
    for (double s : scores[b]) {
      std::snprintf(buf, sizeof buf, ",%.17g", s);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

bool AttentionFilter::keeps(const AttentionRecord& r) const {
  if (layer >= 0 && r.layer != layer) return false;
  if (head >= 0 && r.head != head) return false;
  return direction.empty() || to_string(r.direction) == direction;
}

std::string attention_csv(const std::vector<AttentionRecord>& records, const AttentionFilter& filter) {
  std::ostringstream out;
  out << "layer,head,direction,query_index,key_index,score\n";
  char buf[64];
  for (const auto& r : records) {
    if (!filter.keeps(r)) continue;
    const std::string dir = to_string(r.direction);
    for (std::size_t q = 0; q < r.rows; ++q)
      for (std::size_t k = 0; k < r.cols; ++k) {
        const double s = r.at(q, k);
        if (s < kAttentionDumpFloor) continue;
        std::snprintf(buf, sizeof buf, "%.17g", s);
        out << r.layer << ',' << r.head << ',' << dir << ',' << q << ',' << k << ',' << buf << '\n';
      }
  }
  return out.str();
}

std::string attention_units_csv(const std::vector<AttentionRecord>& records,
                                std::span<const int> env_units, const AttentionFilter& filter) {
  std::ostringstream out;
  out << "layer,head,unit,mass\n";
  char buf[64];
  for (const auto& r : records) {
    if (r.direction != Direction::dtc_to_env || !filter.keeps(r)) continue;
    for (const auto& [unit, mass] : attn_aggregate(r, env_units, AggregateMode::per_unit)) {
      std::snprintf(buf, sizeof buf, "%.17g", mass);
      out << r.layer << ',' << r.head << ',' << unit << ',' << buf << '\n';
    }
  }
  return out.str();
}

std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx.get(), content.data(), content.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
    throw std::runtime_error("sha1: digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string git_blob_sha1_file(const fs::path& path) { return git_blob_sha1(read_text(path)); }

}  // namespace vdiag
