// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace vdiag {

namespace {

// Reads fields of one JSON object into a config, rejecting unknown keys.
class Reader {
 public:
  Reader(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ValidationError("config: section '" + section_ + "' must be an object");
  }

  template <class T>
  void field(const char* name, T& target) {
    seen_.insert(name);
    if (!j_.contains(name)) return;
    const auto& v = j_.at(name);
    const bool ok = [&] {
      if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
      else if constexpr (std::is_integral_v<T>) return v.is_number_integer() && (std::is_signed_v<T> || v.is_number_unsigned() || v.template get<long long>() >= 0);
      else return v.is_number();
    }();
    if (!ok) throw ValidationError("config: field '" + path(name) + "' has the wrong type");
    target = v.template get<T>();
  }

  template <class E, std::size_t N>
  void choice(const char* name, E& target, const std::pair<E, const char*> (&names)[N]) {
    seen_.insert(name);
    if (!j_.contains(name)) return;
    const auto& v = j_.at(name);
    if (v.is_string())
      for (const auto& [value, text] : names)
        if (v.get<std::string>() == text) {
          target = value;
          return;
        }
    throw ValidationError("config: field '" + path(name) + "' has an unsupported value");
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key()))
        throw ValidationError("config: unknown field '" + path(it.key().c_str()) + "'");
  }

 private:
  std::string path(const char* name) const { return section_ + "." + name; }
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <class T>
  void field(const char* name, const T& v) { j[name] = v; }

  template <class E, std::size_t N>
  void choice(const char* name, const E& v, const std::pair<E, const char*> (&names)[N]) {
    for (const auto& [value, text] : names)
      if (value == v) j[name] = text;
  }

  Json j = Json::object();
};

constexpr std::pair<Alignment, const char*> kAlignments[] = {{Alignment::softmax, "softmax"},
                                                             {Alignment::entmax15, "entmax15"}};
constexpr std::pair<EnvFusion, const char*> kFusions[] = {{EnvFusion::concat, "concat"},
                                                          {EnvFusion::sum, "sum"}};
constexpr std::pair<BackboneKind, const char*> kKinds[] = {{BackboneKind::multimodal, "multimodal"},
                                                           {BackboneKind::unimodal, "unimodal"}};

template <class V, class C>
void visit_generator(V& v, C& c) {
  v.field("seed", c.seed);
  v.field("n_train", c.n_train);
  v.field("n_ecu", c.n_ecu);
  v.field("n_subsystems", c.n_subsystems);
  v.field("codes_per_subsystem", c.codes_per_subsystem);
  v.field("n_base", c.n_base);
  v.field("n_sensor_units", c.n_sensor_units);
  v.field("n_rare_units", c.n_rare_units);
  v.field("descriptions_per_unit", c.descriptions_per_unit);
  v.field("dtc_length_mean", c.dtc_length_mean);
  v.field("dtc_length_sd", c.dtc_length_sd);
  v.field("dtc_length_min", c.dtc_length_min);
  v.field("env_ratio_mean", c.env_ratio_mean);
  v.field("env_ratio_sd", c.env_ratio_sd);
  v.field("env_ratio_min", c.env_ratio_min);
  v.field("n_labels", c.n_labels);
  v.field("n_env_labels", c.n_env_labels);
  v.field("n_joint_labels", c.n_joint_labels);
  v.field("label_rate", c.label_rate);
  v.field("partial_rate", c.partial_rate);
  v.field("noise_rate", c.noise_rate);
  v.field("sensor_mean", c.sensor_mean);
  v.field("sensor_sd", c.sensor_sd);
  v.field("threshold", c.threshold);
  v.field("drift_min_count", c.drift_min_count);
  v.field("drift_triplets", c.drift_triplets);
  v.field("burst_rate", c.burst_rate);
  v.field("mean_gap_hours", c.mean_gap_hours);
  v.field("km_per_hour", c.km_per_hour);
  v.field("duplicate_rate", c.duplicate_rate);
  v.field("null_rate", c.null_rate);
  v.field("max_outside_events", c.max_outside_events);
}

template <class V, class C>
void visit_tokenizer(V& v, C& c) {
  v.field("top_units", c.top_units);
  v.field("epsilon", c.epsilon);
  v.field("theta", c.theta);
  v.field("window_seconds", c.window_seconds);
  v.field("window_km", c.window_km);
}

template <class V, class C>
void visit_model(V& v, C& c) {
  v.choice("kind", c.kind, kKinds);
  v.field("d", c.encoder.d);
  v.field("heads", c.encoder.heads);
  v.field("layers", c.encoder.layers);
  v.field("ffn_mult", c.encoder.ffn_mult);
  v.field("theta0_dtc", c.encoder.theta0_dtc);
  v.field("theta0_env", c.encoder.theta0_env);
  v.choice("alignment", c.encoder.alignment, kAlignments);
  v.field("self_attn_sublayer", c.encoder.self_attn_sublayer);
  v.field("use_rope", c.encoder.use_rope);
  v.choice("env_fusion", c.embedding.env_fusion, kFusions);
  v.field("d_ecu", c.embedding.d_ecu);
  v.field("d_value", c.embedding.d_value);
  v.field("base_time", c.positional.base_time);
  v.field("base_mileage", c.positional.base_mileage);
  v.field("time_unit_seconds", c.positional.time_unit_seconds);
  v.field("mileage_unit_km", c.positional.mileage_unit_km);
}

template <class V, class C>
void visit_vocab_sizes(V& v, C& c) {
  v.field("n_ecu", c.embedding.n_ecu);
  v.field("n_base", c.embedding.n_base);
  v.field("n_desc", c.embedding.n_desc);
  v.field("n_value", c.embedding.n_value);
  v.field("n_units", c.embedding.n_units);
}

template <class V, class C>
void visit_pretrain(V& v, C& c) {
  v.field("mask_rate", c.mask_rate);
  v.field("alpha", c.alpha);
  v.field("beta", c.beta);
  v.field("gamma", c.gamma);
  v.field("lr", c.lr);
  v.field("warmup_steps", c.warmup_steps);
  v.field("total_steps", c.total_steps);
  v.field("beta1", c.beta1);
  v.field("beta2", c.beta2);
  v.field("adam_eps", c.adam_eps);
  v.field("weight_decay", c.weight_decay);
  v.field("clip", c.clip);
  v.field("batch_size", c.batch_size);
  v.field("seed", c.seed);
  v.field("random_replacement", c.random_replacement);
}

template <class V, class C>
void visit_finetune(V& v, C& c) {
  v.field("hidden_blocks", c.hidden_blocks);
  v.field("hidden_width", c.hidden_width);
  v.field("lr", c.lr);
  v.field("weight_decay", c.weight_decay);
  v.field("max_epochs", c.max_epochs);
  v.field("batch_size", c.batch_size);
  v.field("min_epochs", c.min_epochs);
  v.field("patience", c.patience);
  v.field("threshold", c.threshold);
  v.field("seed", c.seed);
  v.field("zero_init_output", c.zero_init_output);
}

template <class C, class F>
Json write(const C& c, F visit) {
  Writer w;
  visit(w, c);
  return w.j;
}

}  // namespace

void apply_section(const Json& j, GeneratorConfig& cfg) {
  Reader r(j, "generator");
  visit_generator(r, cfg);
  r.finish();
}

void apply_section(const Json& j, TokenizerConfig& cfg) {
  Reader r(j, "tokenizer");
  visit_tokenizer(r, cfg);
  r.finish();
}

void apply_section(const Json& j, PretrainConfig& cfg) {
  Reader r(j, "pretrain");
  visit_pretrain(r, cfg);
  r.finish();
}

void apply_section(const Json& j, FinetuneConfig& cfg) {
  Reader r(j, "finetune");
  visit_finetune(r, cfg);
  r.finish();
}

void apply_model_section(const Json& j, ModelConfig& cfg) {
  Reader r(j, "model");
  visit_model(r, cfg);
  r.finish();
  cfg.embedding.d = cfg.encoder.d;
}

Json to_json(const GeneratorConfig& cfg) {
  return write(cfg, [](Writer& w, const GeneratorConfig& c) { visit_generator(w, c); });
}
Json to_json(const TokenizerConfig& cfg) {
  return write(cfg, [](Writer& w, const TokenizerConfig& c) { visit_tokenizer(w, c); });
}
Json to_json(const PretrainConfig& cfg) {
  return write(cfg, [](Writer& w, const PretrainConfig& c) { visit_pretrain(w, c); });
}
Json to_json(const FinetuneConfig& cfg) {
  return write(cfg, [](Writer& w, const FinetuneConfig& c) { visit_finetune(w, c); });
}

Json model_to_json(const ModelConfig& cfg) {
  Json j = write(cfg, [](Writer& w, const ModelConfig& c) { visit_model(w, c); });
  j["vocab_sizes"] = write(cfg, [](Writer& w, const ModelConfig& c) { visit_vocab_sizes(w, c); });
  return j;
}

ModelConfig model_from_json(const Json& j) {
  if (!j.is_object()) throw ValidationError("config: model must be an object");
  ModelConfig cfg;
  Json body = j;
  body.erase("vocab_sizes");
  apply_model_section(body, cfg);
  if (!j.contains("vocab_sizes")) throw ValidationError("config: missing field 'model.vocab_sizes'");
  Reader r(j.at("vocab_sizes"), "model.vocab_sizes");
  visit_vocab_sizes(r, cfg);
  r.finish();
  return cfg;
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ValidationError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config: top level must be an object");
  PipelineConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    if (key == "generator") apply_section(*it, cfg.generator);
    else if (key == "tokenizer") apply_section(*it, cfg.tokenizer);
    else if (key == "model") apply_model_section(*it, cfg.model);
    else if (key == "pretrain") apply_section(*it, cfg.pretrain);
    else if (key == "finetune") apply_section(*it, cfg.finetune);
    else throw ValidationError("config: unknown section '" + key + "'");
  }
  return cfg;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return pipeline_config_from_json(ss.str());
}

Json to_json(const PipelineConfig& cfg) {
  Json j;
  j["generator"] = to_json(cfg.generator);
  j["tokenizer"] = to_json(cfg.tokenizer);
  j["model"] = write(cfg.model, [](Writer& w, const ModelConfig& c) { visit_model(w, c); });
  j["pretrain"] = to_json(cfg.pretrain);
  j["finetune"] = to_json(cfg.finetune);
  return j;
}

}  // namespace vdiag
