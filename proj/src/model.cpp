// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/model.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"

namespace vdiag {

namespace {

int dense_index(const std::vector<int>& sorted, int raw) {
  auto it = std::lower_bound(sorted.begin(), sorted.end(), raw);
  if (it == sorted.end() || *it != raw) return static_cast<int>(sorted.size());
  return static_cast<int>(it - sorted.begin());
}

template <class T>
T field(const nlohmann::json& j, const char* name) {
  if (!j.contains(name)) throw ValidationError(std::string("vocab: missing field '") + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("vocab: field '") + name + "' has the wrong type");
  }
}

}  // namespace

int TokenizerVocab::ecu_index(int raw) const { return dense_index(ecus, raw); }
int TokenizerVocab::base_index(int raw) const { return dense_index(bases, raw); }
int TokenizerVocab::desc_index(int raw) const { return dense_index(descriptions, raw); }
int TokenizerVocab::unit_index(int raw) const { return dense_index(units, raw); }

EmbeddingConfig TokenizerVocab::embedding_config(int d) const {
  EmbeddingConfig cfg;
  cfg.d = d;
  cfg.n_ecu = std::max<int>(1, static_cast<int>(ecus.size()));
  cfg.n_base = std::max<int>(1, static_cast<int>(bases.size()));
  cfg.n_desc = std::max<int>(1, static_cast<int>(descriptions.size()));
  cfg.n_value = std::max(1, values.total_tokens());
  cfg.n_units = std::max<int>(1, static_cast<int>(units.size()));
  return cfg;
}

std::string TokenizerVocab::to_json() const {
  nlohmann::ordered_json j;
  j["ecus"] = ecus;
  j["bases"] = bases;
  j["descriptions"] = descriptions;
  j["units"] = units;
  j["window_seconds"] = window_seconds;
  j["window_km"] = window_km;
  j["values"] = nlohmann::ordered_json::parse(values.to_json());
  return j.dump(1);
}

TokenizerVocab TokenizerVocab::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("vocab: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("vocab: top level must be an object");
  static const std::set<std::string> known = {"ecus",  "bases",          "descriptions", "units",
                                              "values", "window_seconds", "window_km"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ValidationError("vocab: unknown field '" + it.key() + "'");
  TokenizerVocab v;
  v.ecus = field<std::vector<int>>(j, "ecus");
  v.bases = field<std::vector<int>>(j, "bases");
  v.descriptions = field<std::vector<int>>(j, "descriptions");
  v.units = field<std::vector<int>>(j, "units");
  v.window_seconds = field<std::int64_t>(j, "window_seconds");
  v.window_km = field<std::int64_t>(j, "window_km");
  if (!j.contains("values")) throw ValidationError("vocab: missing field 'values'");
  v.values = ValueVocab::from_json(j["values"].dump());
  for (const auto* list : {&v.ecus, &v.bases, &v.descriptions, &v.units})
    if (!std::is_sorted(list->begin(), list->end()) ||
        std::adjacent_find(list->begin(), list->end()) != list->end())
      throw ValidationError("vocab: id lists must be strictly increasing");
  if (v.values.retained_units() != v.unit_set())
    throw ValidationError("vocab: 'values' units differ from 'units'");
  return v;
}

TokenizerVocab fit_tokenizer(const std::vector<RawSequence>& train, const TokenizerConfig& cfg) {
  if (cfg.top_units == 0) throw ValidationError("tokenizer: top_units must be >= 1");
  std::vector<RawSequence> sorted = train;
  for (auto& s : sorted) sort_events(s);
  const UnitSet units = top_units(sorted, cfg.top_units);

  std::set<int> ecus, bases, descs;
  std::vector<ModalityPair> pairs;
  pairs.reserve(sorted.size());
  for (const auto& s : sorted) {
    pairs.push_back(preprocess(s, units, cfg.window_seconds, cfg.window_km));
    for (const auto& e : pairs.back().dtc) {
      ecus.insert(e.ecu);
      bases.insert(e.base);
    }
    for (const auto& t : pairs.back().env) descs.insert(t.description);
  }

  TokenizerVocab v;
  v.ecus.assign(ecus.begin(), ecus.end());
  v.bases.assign(bases.begin(), bases.end());
  v.descriptions.assign(descs.begin(), descs.end());
  v.units.assign(units.begin(), units.end());
  v.window_seconds = cfg.window_seconds;
  v.window_km = cfg.window_km;
  v.values = fit_bins(collect_unit_streams(pairs, units), cfg.epsilon, cfg.theta);
  return v;
}

TokenizedPair tokenize(const ModalityPair& pair, const TokenizerVocab& vocab,
                       const PositionalConfig& pos) {
  TokenizedPair out;
  const std::size_t n = pair.dtc.size();
  out.ecu.reserve(n);
  out.base.reserve(n);
  out.fault.reserve(n);
  const std::int64_t t0 = n ? pair.dtc.front().timestamp : 0;
  const std::int64_t m0 = n ? pair.dtc.front().mileage : 0;
  for (const auto& e : pair.dtc) {
    out.ecu.push_back(vocab.ecu_index(e.ecu));
    out.base.push_back(vocab.base_index(e.base));
    out.fault.push_back(e.fault != 0 ? 1 : 0);
    out.times.push_back(static_cast<double>(e.timestamp - t0) / pos.time_unit_seconds);
    out.mileages.push_back(static_cast<double>(e.mileage - m0) / pos.mileage_unit_km);
  }
  for (std::size_t k = 0; k < pair.env.size(); ++k) {
    const auto& t = pair.env[k];
    out.desc.push_back(vocab.desc_index(t.description));
    out.value.push_back(vocab.values.token(t.unit, t.value));
    out.unit.push_back(vocab.unit_index(t.unit));
    out.env_origin.push_back(pair.env_origin[k]);
    out.raw_units.push_back(t.unit);
  }
  return out;
}

TokenizedPair tokenize(const RawSequence& raw, const TokenizerVocab& vocab,
                       const PositionalConfig& pos) {
  RawSequence sorted = raw;
  sort_events(sorted);
  return tokenize(preprocess(sorted, vocab.unit_set(), vocab.window_seconds, vocab.window_km),
                  vocab, pos);
}

Backbone Backbone::create(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.embedding.d != cfg.encoder.d)
    throw ValidationError("model: embedding width " + std::to_string(cfg.embedding.d) +
                          " differs from encoder width " + std::to_string(cfg.encoder.d));
  cfg.encoder.validate();
  cfg.embedding.validate();
  Rng rng(seed);
  Backbone b;
  b.cfg_ = cfg;
  const auto d = static_cast<std::size_t>(cfg.encoder.d);
  const auto& e = cfg.embedding;
  b.dtc_ = DtcEmbeddingTables::create(e, rng);
  if (b.multimodal()) {
    b.env_ = EnvEmbeddingTables::create(e, rng);
    b.coattn_ = CoAttentionStack::create(cfg.encoder, rng);
  } else {
    b.uni_ = UnimodalStack::create(cfg.encoder, rng);
  }
  b.base_head_ = Linear::create(d, static_cast<std::size_t>(e.n_base + 1), rng);
  if (b.multimodal()) {
    b.value_head_ = Linear::create(d, static_cast<std::size_t>(e.n_value + 1), rng);
    b.desc_head_ = Linear::create(d, static_cast<std::size_t>(e.n_desc + 1), rng);
  }
  return b;
}

namespace {

StreamInput padded_stream(Tensor x, std::size_t pad, double base) {
  const std::size_t real = x.rows();
  if (pad > 0) x = concat_rows({x, Tensor({pad, x.cols()})});
  StreamInput s = StreamInput::of(std::move(x), base);
  s.valid = real;
  return s;
}

}  // namespace

BackboneOutput Backbone::forward(const TokenizedPair& pair, bool trace,
                                 const std::vector<int>* base, const std::vector<int>* desc,
                                 const std::vector<int>* value, Padding padding) const {
  const auto& b = base ? *base : pair.base;
  const std::size_t ld = pair.dtc_length() + 1;
  StreamInput sd = padded_stream(
      fuse_dtc_input(pair.ecu, b, pair.fault, pair.times, pair.mileages, dtc_, cfg_.positional),
      padding.dtc, cfg_.encoder.theta0_dtc);

  BackboneOutput out;
  if (!multimodal()) {
    auto enc = encode_unimodal(sd, uni_, trace);
    out.h_dtc = padding.dtc ? slice_rows(enc.h, 0, ld) : enc.h;
    out.records = std::move(enc.records);
    return out;
  }
  const std::size_t le = pair.env_length() + 1;
  StreamInput se = padded_stream(embed_env(desc ? *desc : pair.desc, value ? *value : pair.value,
                                           pair.unit, env_),
                                 padding.env, cfg_.encoder.theta0_env);
  auto enc = encode(sd, se, coattn_, trace);
  out.h_dtc = padding.dtc ? slice_rows(enc.h_dtc, 0, ld) : enc.h_dtc;
  out.h_env = padding.env ? slice_rows(enc.h_env, 0, le) : enc.h_env;
  out.records = std::move(enc.records);
  return out;
}

Tensor Backbone::cls_features(const BackboneOutput& out) const {
  if (!multimodal()) return slice_rows(out.h_dtc, 0, 1);
  return concat_cols({slice_rows(out.h_dtc, 0, 1), slice_rows(out.h_env, 0, 1)});
}

ParameterList Backbone::parameters() const {
  ParameterList params;
  dtc_.collect(params);
  if (multimodal()) {
    env_.collect(params);
    coattn_.collect(params);
  } else {
    uni_.collect(params);
  }
  base_head_.collect(params, "head.base");
  if (multimodal()) {
    value_head_.collect(params, "head.value");
    desc_head_.collect(params, "head.desc");
  }
  return params;
}

}  // namespace vdiag
