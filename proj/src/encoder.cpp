// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/encoder.hpp"

#include <cmath>

namespace vdiag {

void EncoderConfig::validate() const {
  if (d <= 0 || heads <= 0 || d % heads != 0)
    throw ValidationError("encoder: d=" + std::to_string(d) + " is not divisible by heads=" +
                          std::to_string(heads));
  if (head_dim() % 2 != 0)
    throw ValidationError("encoder: per-head width " + std::to_string(head_dim()) +
                          " must be even for rotary pairs");
  if (layers < 0) throw ValidationError("encoder: layers must be >= 0");
  if (ffn_mult < 1) throw ValidationError("encoder: ffn_mult must be >= 1");
  if (!(theta0_dtc > 1.0) || !(theta0_env > 1.0))
    throw ValidationError("encoder: RoPE bases must be > 1");
}

std::string to_string(Direction dir) {
  switch (dir) {
    case Direction::dtc_to_env: return "dtc_to_env";
    case Direction::env_to_dtc: return "env_to_dtc";
    case Direction::self_dtc: return "self_dtc";
    case Direction::self_env: return "self_env";
  }
  return "?";
}

Direction direction_from_string(const std::string& s) {
  if (s == "dtc_to_env") return Direction::dtc_to_env;
  if (s == "env_to_dtc") return Direction::env_to_dtc;
  if (s == "self_dtc") return Direction::self_dtc;
  if (s == "self_env") return Direction::self_env;
  throw ValidationError("unknown attention direction '" + s + "'");
}

AttentionWeights AttentionWeights::create(int d, Rng& rng) {
  const auto n = static_cast<std::size_t>(d);
  const double std_ = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionWeights w;
  w.wq = init_normal({n, n}, rng, std_);
  w.wk = init_normal({n, n}, rng, std_);
  w.wv = init_normal({n, n}, rng, std_);
  w.wo = init_normal({n, n}, rng, std_);
  return w;
}

void AttentionWeights::collect(ParameterList& params, const std::string& prefix) const {
  params.add(prefix + ".wq", wq);
  params.add(prefix + ".wk", wk);
  params.add(prefix + ".wv", wv);
  params.add(prefix + ".wo", wo);
}

FeedForward FeedForward::create(int d, int mult, Rng& rng) {
  const auto n = static_cast<std::size_t>(d);
  return {Linear::create(n, n * static_cast<std::size_t>(mult), rng),
          Linear::create(n * static_cast<std::size_t>(mult), n, rng)};
}

void FeedForward::collect(ParameterList& params, const std::string& prefix) const {
  up.collect(params, prefix + ".up");
  down.collect(params, prefix + ".down");
}

StreamInput StreamInput::of(Tensor x, double rope_base) {
  StreamInput s;
  s.valid = x.rows();
  s.positions.resize(x.rows());
  for (std::size_t i = 0; i < s.positions.size(); ++i) s.positions[i] = static_cast<int>(i);
  s.x = std::move(x);
  s.rope_base = rope_base;
  return s;
}

AttentionResult attention(const StreamInput& query, const StreamInput& key_value,
                          const AttentionWeights& w, const EncoderConfig& cfg, bool trace,
                          int layer, Direction direction) {
  const auto d = static_cast<std::size_t>(cfg.d);
  if (query.x.cols() != d || key_value.x.cols() != d)
    throw DimensionError("attention: inputs " + query.x.shape_string() + " and " +
                         key_value.x.shape_string() + " must have width " + std::to_string(d));
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor q = matmul(query.x, w.wq);
  const Tensor k = matmul(key_value.x, w.wk);
  const Tensor v = matmul(key_value.x, w.wv);

  AttentionResult out;
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  for (int h = 0; h < cfg.heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    Tensor qh = slice_cols(q, off, dh);
    Tensor kh = slice_cols(k, off, dh);
    if (cfg.use_rope) {
      qh = rope(qh, query.positions, query.rope_base);
      kh = rope(kh, key_value.positions, key_value.rope_base);
    }
    const Tensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt);
    const Tensor scores = cfg.alignment == Alignment::softmax
                              ? softmax_rows(logits, key_value.valid)
                              : entmax15_rows(logits, key_value.valid);
    if (trace) {
      AttentionRecord rec;
      rec.layer = layer;
      rec.head = h;
      rec.direction = direction;
      rec.rows = scores.rows();
      rec.cols = scores.cols();
      rec.scores.assign(scores.data().begin(), scores.data().end());
      out.records.push_back(std::move(rec));
    }
    heads.push_back(matmul(scores, slice_cols(v, off, dh)));
  }
  out.context = matmul(heads.size() == 1 ? heads.front() : concat_cols(heads), w.wo);
  return out;
}

StreamBlock StreamBlock::create(const EncoderConfig& cfg, Rng& rng) {
  const auto d = static_cast<std::size_t>(cfg.d);
  StreamBlock b;
  if (cfg.self_attn_sublayer) {
    b.self_attn = AttentionWeights::create(cfg.d, rng);
    b.self_gain = init_constant({d}, 1.0);
  }
  b.cross = AttentionWeights::create(cfg.d, rng);
  b.gain1 = init_constant({d}, 1.0);
  b.ffn = FeedForward::create(cfg.d, cfg.ffn_mult, rng);
  b.gain2 = init_constant({d}, 1.0);
  return b;
}

void StreamBlock::collect(ParameterList& params, const std::string& prefix,
                          const EncoderConfig& cfg) const {
  if (cfg.self_attn_sublayer) {
    self_attn.collect(params, prefix + ".self");
    params.add(prefix + ".self_gain", self_gain, false);
  }
  cross.collect(params, prefix + ".cross");
  params.add(prefix + ".gain1", gain1, false);
  ffn.collect(params, prefix + ".ffn");
  params.add(prefix + ".gain2", gain2, false);
}

CoAttentionStack CoAttentionStack::create(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  CoAttentionStack s;
  s.cfg = cfg;
  for (int l = 0; l < cfg.layers; ++l) {
    CoAttentionLayer layer;
    layer.dtc = StreamBlock::create(cfg, rng);
    layer.env = StreamBlock::create(cfg, rng);
    s.layers.push_back(std::move(layer));
  }
  return s;
}

void CoAttentionStack::collect(ParameterList& params) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "coattn." + std::to_string(l);
    layers[l].dtc.collect(params, p + ".dtc", cfg);
    layers[l].env.collect(params, p + ".env", cfg);
  }
}

namespace {

StreamInput with_rows(const StreamInput& s, Tensor x) {
  StreamInput out = s;
  out.x = std::move(x);
  return out;
}

Tensor norm_residual(const Tensor& residual, const Tensor& update, const Tensor& gain) {
  return rms_norm(add(residual, update), gain);
}

}  // namespace

CoAttentionOutput coattention_layer(const StreamInput& dtc_in, const StreamInput& env_in,
                                    const CoAttentionLayer& layer, const EncoderConfig& cfg,
                                    bool trace, int layer_index) {
  StreamInput dtc = dtc_in;
  StreamInput env = env_in;
  CoAttentionOutput out;
  if (cfg.self_attn_sublayer) {
    auto sd = attention(dtc, dtc, layer.dtc.self_attn, cfg, trace, layer_index, Direction::self_dtc);
    auto se = attention(env, env, layer.env.self_attn, cfg, trace, layer_index, Direction::self_env);
    dtc = with_rows(dtc, norm_residual(dtc.x, sd.context, layer.dtc.self_gain));
    env = with_rows(env, norm_residual(env.x, se.context, layer.env.self_gain));
    for (auto* r : {&sd.records, &se.records})
      out.records.insert(out.records.end(), r->begin(), r->end());
  }
  // both directions read the same input states
  auto to_env = attention(dtc, env, layer.dtc.cross, cfg, trace, layer_index, Direction::dtc_to_env);
  auto to_dtc = attention(env, dtc, layer.env.cross, cfg, trace, layer_index, Direction::env_to_dtc);

  const Tensor xd = norm_residual(dtc.x, to_env.context, layer.dtc.gain1);
  const Tensor xe = norm_residual(env.x, to_dtc.context, layer.env.gain1);
  out.h_dtc = norm_residual(xd, layer.dtc.ffn(xd), layer.dtc.gain2);
  out.h_env = norm_residual(xe, layer.env.ffn(xe), layer.env.gain2);
  for (auto* r : {&to_env.records, &to_dtc.records})
    out.records.insert(out.records.end(), r->begin(), r->end());
  return out;
}

CoAttentionOutput encode(const StreamInput& dtc, const StreamInput& env,
                         const CoAttentionStack& stack, bool trace) {
  CoAttentionOutput out{dtc.x, env.x, {}};
  StreamInput d = dtc, e = env;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    auto step = coattention_layer(d, e, stack.layers[l], stack.cfg, trace, static_cast<int>(l));
    d.x = step.h_dtc;
    e.x = step.h_env;
    if (trace) out.records.insert(out.records.end(), step.records.begin(), step.records.end());
  }
  out.h_dtc = d.x;
  out.h_env = e.x;
  return out;
}

UnimodalStack UnimodalStack::create(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d);
  UnimodalStack s;
  s.cfg = cfg;
  for (int l = 0; l < cfg.layers; ++l) {
    SelfAttentionLayer layer;
    layer.attn = AttentionWeights::create(cfg.d, rng);
    layer.ln1_gain = init_constant({d}, 1.0);
    layer.ln1_bias = init_constant({d}, 0.0);
    layer.ffn = FeedForward::create(cfg.d, cfg.ffn_mult, rng);
    layer.ln2_gain = init_constant({d}, 1.0);
    layer.ln2_bias = init_constant({d}, 0.0);
    s.layers.push_back(std::move(layer));
  }
  return s;
}

void UnimodalStack::collect(ParameterList& params) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "selfattn." + std::to_string(l);
    layers[l].attn.collect(params, p + ".attn");
    params.add(p + ".ln1_gain", layers[l].ln1_gain, false);
    params.add(p + ".ln1_bias", layers[l].ln1_bias, false);
    layers[l].ffn.collect(params, p + ".ffn");
    params.add(p + ".ln2_gain", layers[l].ln2_gain, false);
    params.add(p + ".ln2_bias", layers[l].ln2_bias, false);
  }
}

UnimodalOutput encode_unimodal(const StreamInput& dtc, const UnimodalStack& stack, bool trace) {
  EncoderConfig cfg = stack.cfg;
  cfg.use_rope = false;
  UnimodalOutput out{dtc.x, {}};
  StreamInput s = dtc;
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    const auto& layer = stack.layers[l];
    auto att = attention(s, s, layer.attn, cfg, trace, static_cast<int>(l), Direction::self_dtc);
    const Tensor c1 = layer_norm(add(att.context, s.x), layer.ln1_gain, layer.ln1_bias);
    s.x = layer_norm(add(c1, layer.ffn(c1)), layer.ln2_gain, layer.ln2_bias);
    if (trace) out.records.insert(out.records.end(), att.records.begin(), att.records.end());
  }
  out.h = s.x;
  return out;
}

std::map<int, double> attn_aggregate(const AttentionRecord& record, std::span<const int> env_units,
                                     AggregateMode mode) {
  std::map<int, double> mass;
  for (std::size_t c = 0; c < record.cols; ++c) {
    int key = static_cast<int>(c);
    if (mode == AggregateMode::per_unit) {
      if (c == 0)
        key = -1;
      else if (c - 1 < env_units.size())
        key = env_units[c - 1];
      else
        continue;  // padding column
    }
    double s = 0.0;
    for (std::size_t r = 1; r < record.rows; ++r) s += record.at(r, c);
    mass[key] += s;
  }
  return mass;
}

}  // namespace vdiag
