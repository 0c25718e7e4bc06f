// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "vdiag/nn.hpp"

namespace vdiag {

enum class Alignment { softmax, entmax15 };

struct EncoderConfig {
  int d = 64;
  int heads = 4;
  int layers = 2;
  int ffn_mult = 4;
  double theta0_dtc = 5000.0;
  double theta0_env = 80000.0;
  Alignment alignment = Alignment::softmax;
  bool self_attn_sublayer = false;
  bool use_rope = true;

  int head_dim() const { return d / heads; }
  /// Throws ValidationError when d is not divisible by heads, the head
  /// width is odd, or a RoPE base is not > 1.
  void validate() const;
};

enum class Direction { dtc_to_env, env_to_dtc, self_dtc, self_env };

std::string to_string(Direction dir);
Direction direction_from_string(const std::string& s);

/// Alignment scores of one head: rows are query positions, cols key positions.
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  Direction direction = Direction::dtc_to_env;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> scores;

  double at(std::size_t r, std::size_t c) const { return scores[r * cols + c]; }
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  ///< [d x d] each

  static AttentionWeights create(int d, Rng& rng);
  void collect(ParameterList& params, const std::string& prefix) const;
};

struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward create(int d, int mult, Rng& rng);
  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }
  void collect(ParameterList& params, const std::string& prefix) const;
};

/// One encoder stream: its rows, their RoPE positions, and how many leading
/// rows are real (the rest is right padding).
struct StreamInput {
  Tensor x;
  std::vector<int> positions;
  std::size_t valid = 0;
  double rope_base = 0.0;

  static StreamInput of(Tensor x, double rope_base);
};

struct AttentionResult {
  Tensor context;  ///< [L_q x d], after the output projection
  std::vector<AttentionRecord> records;
};

/// Multi-head attention of `query` rows over `key_value` rows. Per head:
/// q = rope(query W_q), k = rope(key_value W_k) with each stream's own base,
/// scores = alignment(q k^T / sqrt(d_h)) over valid keys, context = scores v.
/// Heads are concatenated and projected by W_o.
AttentionResult attention(const StreamInput& query, const StreamInput& key_value,
                          const AttentionWeights& w, const EncoderConfig& cfg, bool trace,
                          int layer, Direction direction);

/// Cross attention from one modality to the other.
inline AttentionResult cross_attention(const StreamInput& query, const StreamInput& key_value,
                                       const AttentionWeights& w, const EncoderConfig& cfg,
                                       bool trace = false, int layer = 0,
                                       Direction direction = Direction::dtc_to_env) {
  return attention(query, key_value, w, cfg, trace, layer, direction);
}

/// Per-stream weights of one co-attention layer.
struct StreamBlock {
  AttentionWeights self_attn;  ///< used only with self_attn_sublayer
  Tensor self_gain;
  AttentionWeights cross;
  Tensor gain1;
  FeedForward ffn;
  Tensor gain2;

  static StreamBlock create(const EncoderConfig& cfg, Rng& rng);
  void collect(ParameterList& params, const std::string& prefix, const EncoderConfig& cfg) const;
};

struct CoAttentionLayer {
  StreamBlock dtc;  ///< queries from the DTC stream attend to env keys/values
  StreamBlock env;  ///< queries from the env stream attend to DTC keys/values
};

struct CoAttentionStack {
  EncoderConfig cfg;
  std::vector<CoAttentionLayer> layers;

  static CoAttentionStack create(const EncoderConfig& cfg, Rng& rng);
  void collect(ParameterList& params) const;
};

struct CoAttentionOutput {
  Tensor h_dtc;
  Tensor h_env;
  std::vector<AttentionRecord> records;
};

/// Both cross attentions read the layer's input states; each stream then
/// applies residual + RMS norm, FFN, residual + RMS norm.
CoAttentionOutput coattention_layer(const StreamInput& dtc, const StreamInput& env,
                                    const CoAttentionLayer& layer, const EncoderConfig& cfg,
                                    bool trace, int layer_index);

/// Applies every layer of the stack; records are kept only when tracing.
CoAttentionOutput encode(const StreamInput& dtc, const StreamInput& env,
                         const CoAttentionStack& stack, bool trace = false);

// ---- unimodal baseline ----------------------------------------------------

struct SelfAttentionLayer {
  AttentionWeights attn;
  Tensor ln1_gain, ln1_bias;
  FeedForward ffn;
  Tensor ln2_gain, ln2_bias;
};

struct UnimodalStack {
  EncoderConfig cfg;
  std::vector<SelfAttentionLayer> layers;

  static UnimodalStack create(const EncoderConfig& cfg, Rng& rng);
  void collect(ParameterList& params) const;
};

struct UnimodalOutput {
  Tensor h;
  std::vector<AttentionRecord> records;
};

/// Self-attention encoder: C' = LayerNorm(C + U), H = LayerNorm(C' + FFN(C')).
/// Positions enter through the input embedding only.
UnimodalOutput encode_unimodal(const StreamInput& dtc, const UnimodalStack& stack,
                               bool trace = false);

// ---- attention analysis ---------------------------------------------------

enum class AggregateMode { per_token, per_unit };

/// Attention mass received by keys of a dtc->env record, summed over the DTC
/// event query rows (row 0, the [CLS] query, is excluded). per_token keys are
/// key column indices; per_unit keys are the unit of each env triplet, with
/// the env [CLS] column reported under key -1. `env_units[n]` is the unit of
/// env triplet n (column n + 1).
std::map<int, double> attn_aggregate(const AttentionRecord& record,
                                     std::span<const int> env_units, AggregateMode mode);

}  // namespace vdiag
