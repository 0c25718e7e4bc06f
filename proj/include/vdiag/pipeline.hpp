// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vdiag/checkpoint.hpp"
#include "vdiag/config.hpp"

namespace vdiag {

namespace fs = std::filesystem;

// Artifact file names inside the --out directory of each stage.
inline constexpr const char* kTrainFile = "train.jsonl";
inline constexpr const char* kValFile = "val.jsonl";
inline constexpr const char* kTestFile = "test.jsonl";
inline constexpr const char* kRulesFile = "rules.json";
inline constexpr const char* kVocabFile = "vocab.json";
inline constexpr const char* kBackboneDir = "backbone";
inline constexpr const char* kHeadDir = "head";
inline constexpr const char* kPretrainLog = "pretrain_log.csv";
inline constexpr const char* kFinetuneLog = "finetune_log.csv";
inline constexpr const char* kMetricsFile = "metrics.json";
inline constexpr const char* kScoresFile = "scores.csv";
inline constexpr const char* kManifestFile = "run_manifest.json";

struct CorpusSplits {
  std::vector<CorpusRecord> train, val, test;
  std::vector<PlantedRule> rules;

  const std::vector<CorpusRecord>& split(const std::string& name) const;
  int label_count() const { return static_cast<int>(rules.size()); }
};

void write_corpus(const fs::path& dir, const GeneratedCorpus& corpus);
CorpusSplits read_corpus(const fs::path& dir);

std::vector<RawSequence> sequences_of(const std::vector<CorpusRecord>& records);
LabelMatrix labels_of(const std::vector<CorpusRecord>& records, int k);
std::vector<TokenizedPair> tokenize_all(const std::vector<CorpusRecord>& records,
                                        const TokenizerVocab& vocab, const PositionalConfig& pos);

/// The configured model with vocabulary sizes taken from `vocab`.
ModelConfig resolve_model(const ModelConfig& cfg, const TokenizerVocab& vocab);

/// Head settings for a backbone: hidden_width 0 becomes twice the encoder
/// width, so multimodal and unimodal heads have the same size.
FinetuneConfig resolve_finetune(const FinetuneConfig& cfg, const Backbone& backbone);

TokenizerVocab read_vocab(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

void write_pretrain_log(const fs::path& path, const std::vector<PretrainLogRow>& log);

/// Backbone checkpoint plus a copy of its vocabulary in the same directory.
void save_backbone(const fs::path& dir, const Backbone& model, const TokenizerVocab& vocab);

struct LoadedBackbone {
  Backbone model;
  TokenizerVocab vocab;
};
LoadedBackbone load_backbone(const fs::path& dir);

void save_head(const fs::path& dir, const ClassifierHead& head, const FinetuneConfig& cfg);
ClassifierHead load_head(const fs::path& dir);

/// Scores as CSV: vehicle_id followed by one column per label.
std::string scores_csv(const std::vector<CorpusRecord>& records, const ScoreMatrix& scores);

/// Which attention records an export keeps; -1 and an empty direction
/// select everything.
struct AttentionFilter {
  int layer = -1;
  int head = -1;
  std::string direction;

  bool keeps(const AttentionRecord& r) const;
};

inline constexpr double kAttentionDumpFloor = 1e-6;

/// layer,head,direction,query_index,key_index,score with scores below
/// kAttentionDumpFloor omitted.
std::string attention_csv(const std::vector<AttentionRecord>& records, const AttentionFilter& filter);

/// layer,head,unit,mass of every kept dtc_to_env record; unit -1 is the env
/// [CLS] column.
std::string attention_units_csv(const std::vector<AttentionRecord>& records,
                                std::span<const int> env_units, const AttentionFilter& filter);

/// SHA-1 of "blob <size>\0<content>", the object id git gives a file.
std::string git_blob_sha1(const std::string& content);
std::string git_blob_sha1_file(const fs::path& path);

}  // namespace vdiag
