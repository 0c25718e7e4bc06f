// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "vdiag/model.hpp"

namespace vdiag {

struct PretrainConfig {
  double mask_rate = 0.15;
  double alpha = 0.5;  ///< base-DTC term
  double beta = 0.3;   ///< value term
  double gamma = 0.2;  ///< description term
  double lr = 1e-3;
  int warmup_steps = 100;
  int total_steps = 2000;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip = 5.0;
  int batch_size = 16;
  std::uint64_t seed = 0;
  /// BERT-style 80/10/10 replacement instead of always inserting [MASK].
  bool random_replacement = false;

  /// Settings for large corpora: lr 1e-4, warmup 2000, batch 32.
  static PretrainConfig full_scale_preset();
  void validate() const;
};

/// Masked positions (row indices into H, so event i is row i + 1) and the
/// ids the model sees after masking.
struct MaskPlan {
  std::vector<std::size_t> dtc_rows;
  std::vector<int> base_targets;  ///< one per dtc_rows entry
  std::vector<std::size_t> env_rows;
  std::vector<int> desc_targets;
  std::vector<int> value_targets;
  std::vector<int> masked_base;   ///< full id lists fed to the model
  std::vector<int> masked_desc;
  std::vector<int> masked_value;
};

/// Selects every DTC event and every env triplet independently with
/// probability mask_rate. A selected event has its base id replaced; a
/// selected triplet has both description and value replaced; units, ECU ids
/// and fault bytes are never touched.
MaskPlan make_mask_plan(const TokenizedPair& pair, const EmbeddingConfig& vocab,
                        const PretrainConfig& cfg, Rng& rng);

struct LossTerms {
  Tensor total;
  double l_dtc = 0.0;
  double l_value = 0.0;
  double l_desc = 0.0;
};

/// Denominators of the per-stream means. Zero selects the item's own count,
/// so a single item gets plain means; a batch passes its pooled counts.
struct LossNormalizers {
  double dtc = 0.0;
  double env = 0.0;
};

/// alpha * L_dtc + beta * L_value + gamma * L_desc, each a masked cross
/// entropy. The unimodal backbone is trained on L_dtc alone.
LossTerms joint_loss(const Backbone& model, const BackboneOutput& out, const MaskPlan& plan,
                     const PretrainConfig& cfg, LossNormalizers norm = {});

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias correction at rate `lr`.
/// Rows of sparse embedding tables with an all-zero gradient are left alone.
/// Returns false, and changes nothing, if any gradient is non-finite.
bool optimizer_step(ParameterList& params, AdamState& state, const PretrainConfig& cfg, double lr);

/// Linear warmup from 0 to cfg.lr, then cosine decay to 0 at total_steps.
double lr_schedule(int step, const PretrainConfig& cfg);

/// Global 2-norm clipping; returns the norm before clipping.
double clip_gradients(ParameterList& params, double threshold);

struct PretrainLogRow {
  int step = 0;
  double l_total = 0.0, l_dtc = 0.0, l_value = 0.0, l_desc = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  ///< NaN when the update was aborted
};

struct PretrainResult {
  std::vector<PretrainLogRow> log;
  bool diverged = false;
};

/// Runs cfg.total_steps updates over shuffled mini-batches. Stops early,
/// with the parameters of the last good step, if a loss becomes non-finite.
PretrainResult pretrain(Backbone& model, const std::vector<TokenizedPair>& train,
                        const PretrainConfig& cfg,
                        const std::function<void(const PretrainLogRow&)>& on_step = {});

/// Mean masked losses over `data` with masks drawn from `mask_seed`, so two
/// models can be compared on identical masked inputs.
LossTerms evaluate_mlm(const Backbone& model, const std::vector<TokenizedPair>& data,
                       const PretrainConfig& cfg, std::uint64_t mask_seed);

}  // namespace vdiag
