// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vdiag/embedding.hpp"
#include "vdiag/encoder.hpp"
#include "vdiag/event_model.hpp"
#include "vdiag/quantile.hpp"

namespace vdiag {

struct TokenizerConfig {
  std::size_t top_units = 18;
  double epsilon = 1e-4;
  int theta = 4000;
  std::int64_t window_seconds = kDefaultWindowSeconds;
  std::int64_t window_km = kDefaultWindowKm;
};

/// Everything needed to turn a raw sequence into model ids. Raw ECU, base
/// and description ids are mapped to dense indices in ascending order; ids
/// not seen during fitting map to the reserved unknown index.
struct TokenizerVocab {
  std::vector<int> ecus;
  std::vector<int> bases;
  std::vector<int> descriptions;
  std::vector<int> units;  ///< retained units, ascending
  ValueVocab values;
  std::int64_t window_seconds = kDefaultWindowSeconds;
  std::int64_t window_km = kDefaultWindowKm;

  int ecu_index(int raw) const;
  int base_index(int raw) const;
  int desc_index(int raw) const;
  int unit_index(int raw) const;
  UnitSet unit_set() const { return UnitSet(units.begin(), units.end()); }

  /// Vocabulary sizes for the embedding tables at width `d`.
  EmbeddingConfig embedding_config(int d) const;

  std::string to_json() const;
  static TokenizerVocab from_json(const std::string& text);

  bool operator==(const TokenizerVocab&) const = default;
};

/// Fits the unit filter, id maps and per-unit value bins on training sequences.
TokenizerVocab fit_tokenizer(const std::vector<RawSequence>& train, const TokenizerConfig& cfg);

/// Model-ready ids of one preprocessed sequence. Times (hours) and mileages
/// (km) are measured from the first event of the window.
struct TokenizedPair {
  std::vector<int> ecu, base, fault;
  std::vector<double> times, mileages;
  std::vector<int> desc, value, unit;
  std::vector<int> env_origin;
  std::vector<int> raw_units;  ///< original unit id of every env triplet

  std::size_t dtc_length() const { return base.size(); }
  std::size_t env_length() const { return desc.size(); }
};

TokenizedPair tokenize(const ModalityPair& pair, const TokenizerVocab& vocab,
                       const PositionalConfig& pos = {});
TokenizedPair tokenize(const RawSequence& raw, const TokenizerVocab& vocab,
                       const PositionalConfig& pos = {});

enum class BackboneKind { multimodal, unimodal };

struct ModelConfig {
  BackboneKind kind = BackboneKind::multimodal;
  EncoderConfig encoder;
  EmbeddingConfig embedding;
  PositionalConfig positional;
};

/// Right padding appended to the streams of one item, used to emulate
/// batching. Padded keys are masked and padded rows are never read back.
struct Padding {
  std::size_t dtc = 0;
  std::size_t env = 0;
};

struct BackboneOutput {
  Tensor h_dtc;  ///< [(L + 1) x d] real rows only, row 0 is [CLS]
  Tensor h_env;  ///< [(Le + 1) x d]; undefined for the unimodal backbone
  std::vector<AttentionRecord> records;
};

/// Embedding tables, encoder stack and the three masked-token prediction
/// heads. The unimodal variant has no env tables and no value/description heads.
class Backbone {
 public:
  static Backbone create(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  bool multimodal() const noexcept { return cfg_.kind == BackboneKind::multimodal; }

  /// Encodes one item. `base`, `desc` and `value` override the ids of `pair`
  /// when given (masked inputs).
  BackboneOutput forward(const TokenizedPair& pair, bool trace = false,
                         const std::vector<int>* base = nullptr,
                         const std::vector<int>* desc = nullptr,
                         const std::vector<int>* value = nullptr,
                         Padding padding = {}) const;

  /// Classifier features: concat([CLS]_dtc, [CLS]_env) or [CLS] alone.
  Tensor cls_features(const BackboneOutput& out) const;
  int feature_width() const { return multimodal() ? 2 * cfg_.encoder.d : cfg_.encoder.d; }

  const Linear& base_head() const { return base_head_; }
  const Linear& value_head() const { return value_head_; }
  const Linear& desc_head() const { return desc_head_; }

  /// Backbone parameters in a fixed order (checkpoint order).
  ParameterList parameters() const;

 private:
  ModelConfig cfg_;
  DtcEmbeddingTables dtc_;
  EnvEmbeddingTables env_;
  CoAttentionStack coattn_;
  UnimodalStack uni_;
  Linear base_head_, value_head_, desc_head_;
};

}  // namespace vdiag
