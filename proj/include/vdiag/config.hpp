// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "vdiag/classifier.hpp"
#include "vdiag/pretrain.hpp"
#include "vdiag/synth.hpp"

namespace vdiag {

using Json = nlohmann::ordered_json;

/// Every tunable of the pipeline, grouped as in the config file:
/// {"generator": {...}, "tokenizer": {...}, "model": {...},
///  "pretrain": {...}, "finetune": {...}}. Missing sections and fields keep
/// their defaults; unknown ones are rejected.
struct PipelineConfig {
  GeneratorConfig generator;
  TokenizerConfig tokenizer;
  ModelConfig model;  ///< vocabulary sizes are filled from the fitted vocab
  PretrainConfig pretrain;
  FinetuneConfig finetune;
};

/// Throws ValidationError naming the offending "section.field".
PipelineConfig pipeline_config_from_json(const std::string& text);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
Json to_json(const PipelineConfig& cfg);

Json to_json(const GeneratorConfig& cfg);
Json to_json(const TokenizerConfig& cfg);
Json to_json(const PretrainConfig& cfg);
Json to_json(const FinetuneConfig& cfg);

/// Model section plus the vocabulary sizes, as stored in checkpoints.
Json model_to_json(const ModelConfig& cfg);
ModelConfig model_from_json(const Json& j);

void apply_section(const Json& j, GeneratorConfig& cfg);
void apply_section(const Json& j, TokenizerConfig& cfg);
void apply_section(const Json& j, PretrainConfig& cfg);
void apply_section(const Json& j, FinetuneConfig& cfg);
void apply_model_section(const Json& j, ModelConfig& cfg);

}  // namespace vdiag
