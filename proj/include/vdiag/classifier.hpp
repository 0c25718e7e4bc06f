// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vdiag/model.hpp"

namespace vdiag {

using ScoreMatrix = std::vector<std::vector<double>>;  ///< B x K
using LabelMatrix = std::vector<std::vector<int>>;     ///< B x K, entries 0/1

/// Binary indicator rows from label id sets.
LabelMatrix to_label_matrix(const std::vector<std::vector<int>>& label_sets, int k);

// ---- head -----------------------------------------------------------------

/// Input projection to `hidden`, residual blocks h + gelu(LN(h) W + b), a
/// final LayerNorm and a K-way output layer. Scores are sigmoid(logits).
struct ClassifierHead {
  struct Block {
    Tensor ln_gain, ln_bias;
    Linear lin;
  };
  Linear input;
  std::vector<Block> blocks;
  Tensor ln_gain, ln_bias;
  Linear output;

  static ClassifierHead create(int in_width, int hidden, int k, int n_blocks, Rng& rng,
                               bool zero_output = false);
  int in_width() const { return static_cast<int>(input.weight.rows()); }
  int labels() const { return static_cast<int>(output.weight.cols()); }

  Tensor logits(const Tensor& features) const;  ///< [B x F] -> [B x K]
  ParameterList parameters() const;
};

/// Frozen-backbone [CLS] features of each item, stacked into [B x F].
Tensor extract_features(const Backbone& backbone, const std::vector<TokenizedPair>& items);

ScoreMatrix predict(const ClassifierHead& head, const Tensor& features);

/// Sigmoid scores of one item.
std::vector<double> classify(const TokenizedPair& pair, const Backbone& backbone,
                             const ClassifierHead& head);

struct FinetuneConfig {
  int hidden_blocks = 2;
  int hidden_width = 0;  ///< 0 selects the feature width
  double lr = 3e-3;
  double weight_decay = 0.01;
  int max_epochs = 150;
  int batch_size = 32;
  int min_epochs = 40;  ///< early stopping is not considered before this epoch
  int patience = 30;    ///< epochs without a better selection key before stopping
  double threshold = 0.8;
  std::uint64_t seed = 0;
  bool zero_init_output = false;

  void validate() const;
};

struct FinetuneLogRow {
  int epoch = 0;
  double train_loss = 0.0;  ///< mean BCE over the epoch's batches
  double val_sample_f1 = 0.0;
};

struct FinetuneResult {
  ClassifierHead head;
  std::vector<FinetuneLogRow> log;
  int best_epoch = 0;
  double best_val_sample_f1 = 0.0;
  int epochs_run = 0;
};

/// Trains a head on fixed features with BCE and AdamW, keeping the weights
/// of the epoch with the best validation sample-F1 (equal F1 goes to the
/// lower validation BCE). The untrained head is returned only when
/// max_epochs is 0.
FinetuneResult finetune_head(const Tensor& train_x, const LabelMatrix& train_y,
                             const Tensor& val_x, const LabelMatrix& val_y,
                             const FinetuneConfig& cfg);

// ---- metrics --------------------------------------------------------------

/// Rank-statistic AUROC over all pooled (score, label) pairs with midranks
/// for ties; empty when the pool lacks positives or negatives.
std::optional<double> auroc_micro(const ScoreMatrix& scores, const LabelMatrix& labels);

enum class Averaging { micro, macro, sample };

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Predictions are scores >= threshold. A ratio with an empty denominator is
/// 1 when nothing was predicted and nothing is true, else 0.
Prf prf1(const ScoreMatrix& scores, const LabelMatrix& labels, double threshold,
         Averaging averaging);

struct MetricsReport {
  std::optional<double> auroc_micro;
  Prf micro, macro, sample;
  double threshold = 0.8;

  bool complete() const { return auroc_micro.has_value(); }
  std::string to_json() const;
};

MetricsReport compute_metrics(const ScoreMatrix& scores, const LabelMatrix& labels,
                              double threshold);

/// Keeps the listed label columns.
ScoreMatrix select_columns(const ScoreMatrix& m, const std::vector<int>& columns);
LabelMatrix select_columns(const LabelMatrix& m, const std::vector<int>& columns);

}  // namespace vdiag
