// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

namespace vdiag {

std::string to_string(RuleKind kind) {
  switch (kind) {
    case RuleKind::dtc_pattern: return "dtc_pattern";
    case RuleKind::env_threshold: return "env_threshold";
    case RuleKind::joint: return "joint";
  }
  return "?";
}

RuleKind rule_kind_from_string(const std::string& s) {
  if (s == "dtc_pattern") return RuleKind::dtc_pattern;
  if (s == "env_threshold") return RuleKind::env_threshold;
  if (s == "joint") return RuleKind::joint;
  throw ValidationError("unknown rule kind '" + s + "'");
}

std::string PlantedRule::modality_required() const {
  switch (kind) {
    case RuleKind::dtc_pattern: return "dtc";
    case RuleKind::env_threshold: return "env";
    case RuleKind::joint: return "both";
  }
  return "?";
}

int GeneratorConfig::n_descriptions() const {
  return n_ecu * n_subsystems * codes_per_subsystem + (n_sensor_units + n_rare_units) * descriptions_per_unit;
}

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("generator." + field + ": " + why);
  };
  if (n_train < 1) fail("n_train", "must be >= 1");
  if (n_ecu < 2) fail("n_ecu", "must be >= 2");
  if (n_subsystems < 1) fail("n_subsystems", "must be >= 1");
  if (codes_per_subsystem < 1) fail("codes_per_subsystem", "must be >= 1");
  if (n_base < 2) fail("n_base", "must be >= 2");
  if (descriptions_per_unit < 1) fail("descriptions_per_unit", "must be >= 1");
  if (n_rare_units < 0) fail("n_rare_units", "must be >= 0");
  if (dtc_length_min < 3) fail("dtc_length_min", "must be >= 3");
  if (dtc_length_sd < 0 || env_ratio_sd < 0) fail("dtc_length_sd", "deviations must be >= 0");
  if (env_ratio_min < 1.0) fail("env_ratio_min", "must be >= 1");
  if (n_env_labels < 0 || n_joint_labels < 0 || n_env_labels + n_joint_labels > n_labels)
    fail("n_labels", "must cover the env and joint labels");
  if (n_sensor_units < n_env_labels + n_joint_labels + 1)
    fail("n_sensor_units", "needs one unit per env/joint label plus a boolean unit");
  const int pattern_labels = n_labels - n_env_labels - n_joint_labels;
  const int code_space = std::min(n_base, n_ecu * n_subsystems * codes_per_subsystem);
  if (2 * pattern_labels + n_joint_labels > code_space) fail("n_base", "too few codes for the rules");
  for (auto [name, p] : {std::pair{"label_rate", label_rate}, {"partial_rate", partial_rate},
                         {"noise_rate", noise_rate}, {"burst_rate", burst_rate},
                         {"duplicate_rate", duplicate_rate}, {"null_rate", null_rate}})
    if (!(p >= 0.0 && p <= 1.0)) fail(name, "must be in [0,1]");
  if (!(sensor_sd > 0.0)) fail("sensor_sd", "must be > 0");
  if (!(threshold > sensor_mean - 3 * sensor_sd)) fail("threshold", "leaves no room below it");
  if (drift_min_count < 1 || drift_triplets < drift_min_count)
    fail("drift_triplets", "must be >= drift_min_count >= 1");
  if (!(mean_gap_hours > 0.0) || km_per_hour < 0.0) fail("mean_gap_hours", "must be > 0");
  if (max_outside_events < 0) fail("max_outside_events", "must be >= 0");
}

int split_of(const std::string& vehicle_id) {
  const auto bucket = fnv1a(vehicle_id) % 100;
  return bucket < 70 ? 0 : (bucket < 85 ? 1 : 2);
}

namespace {

constexpr std::int64_t kDay = 24 * 3600;

struct Layout {
  const GeneratorConfig& cfg;

  int code(int ecu, int s, int j) const {
    return (ecu * cfg.n_subsystems * cfg.codes_per_subsystem + s * cfg.codes_per_subsystem + j) %
           cfg.n_base;
  }
  int signature(int ecu, int s, int j) const {
    return (ecu * cfg.n_subsystems + s) * cfg.codes_per_subsystem + j;
  }
  int sensor_desc(int unit, int k) const {
    return cfg.n_ecu * cfg.n_subsystems * cfg.codes_per_subsystem + (unit - 1) * cfg.descriptions_per_unit + k;
  }
  int bool_unit() const { return cfg.n_sensor_units; }
};

std::vector<PlantedRule> make_rules(const GeneratorConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, 0x72756c65));  // "rule"
  const int code_space = std::min(cfg.n_base, cfg.n_ecu * cfg.n_subsystems * cfg.codes_per_subsystem);
  std::vector<int> codes(static_cast<std::size_t>(code_space));
  for (int c = 0; c < code_space; ++c) codes[static_cast<std::size_t>(c)] = c;
  rng.shuffle(codes);
  std::size_t next_code = 0;

  std::vector<PlantedRule> rules;
  for (int l = 0; l < cfg.n_labels; ++l) {
    PlantedRule r;
    r.label = l;
    r.noise_rate = cfg.noise_rate;
    if (l < cfg.n_env_labels + cfg.n_joint_labels) {
      r.kind = l < cfg.n_env_labels ? RuleKind::env_threshold : RuleKind::joint;
      r.unit = 1 + l;
      r.threshold = cfg.threshold;
      r.min_count = cfg.drift_min_count;
      if (r.kind == RuleKind::joint) r.codes = {codes[next_code++]};
    } else {
      r.kind = RuleKind::dtc_pattern;
      r.codes = {codes[next_code], codes[next_code + 1]};
      std::sort(r.codes.begin(), r.codes.end());
      next_code += 2;
    }
    rules.push_back(std::move(r));
  }
  return rules;
}

double round1(double v) { return std::round(v * 10.0) / 10.0; }

struct Builder {
  const GeneratorConfig& cfg;
  Layout layout;
  Rng& rng;

  EnvTriplet sensor_reading(int unit) {
    EnvTriplet t;
    t.unit = unit;
    t.description = layout.sensor_desc(unit, static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.descriptions_per_unit))));
    if (unit == layout.bool_unit()) {
      t.value = rng.bernoulli(0.5);
    } else {
      double v;
      do {
        v = round1(rng.normal(cfg.sensor_mean, cfg.sensor_sd));
      } while (v < 0.0 || v >= cfg.threshold);
      t.value = v;
    }
    return t;
  }

  int random_unit() {
    if (cfg.n_rare_units > 0 && rng.bernoulli(0.03))
      return 1 + cfg.n_sensor_units + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_rare_units)));
    return 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_sensor_units)));
  }

  void set_code(RawEvent& ev, int ecu, int s, int j) {
    ev.dtc.ecu = ecu;
    ev.dtc.base = layout.code(ecu, s, j);
    ev.env.front().description = layout.signature(ecu, s, j);
  }

  RawEvent event(double ratio) {
    RawEvent ev;
    const int ecu = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_ecu)));
    const int s = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_subsystems)));
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.codes_per_subsystem)));
    ev.dtc.fault = rng.bernoulli(0.5) ? 1 : 0;
    ev.env.push_back(EnvTriplet{0, EnvValue(std::string(rng.bernoulli(0.5) ? "on" : "off")), 0});
    set_code(ev, ecu, s, j);
    const int n = rng.poisson(std::max(ratio - 1.0, 0.0));
    for (int k = 0; k < n; ++k) ev.env.push_back(sensor_reading(random_unit()));
    if (rng.bernoulli(cfg.duplicate_rate)) ev.env.push_back(ev.env[rng.below(ev.env.size())]);
    if (rng.bernoulli(cfg.null_rate)) {
      EnvTriplet broken = sensor_reading(random_unit());
      const auto which = rng.below(3);
      if (which == 0) broken.value = std::monostate{};
      if (which == 1) broken.unit = kAbsentId;
      if (which == 2) broken.description = kAbsentId;
      ev.env.push_back(std::move(broken));
    }
    return ev;
  }
};

void assign_times(std::vector<RawEvent>& events, const GeneratorConfig& cfg, Rng& rng) {
  std::vector<double> gaps(events.size(), 0.0);
  for (std::size_t i = 1; i < events.size(); ++i) {
    if (rng.bernoulli(cfg.burst_rate))
      gaps[i] = rng.bernoulli(0.5) ? 0.0 : static_cast<double>(1 + rng.below(600));
    else
      gaps[i] = rng.exponential(cfg.mean_gap_hours * 3600.0);
  }
  double span = 0.0;
  for (double g : gaps) span += g;
  // keep every generated event inside the 30 day / 300 km window
  const double max_span = 29.0 * kDay;
  const double factor = span > max_span ? max_span / span : 1.0;
  std::int64_t t = 1'600'000'000 + static_cast<std::int64_t>(rng.below(30'000'000));
  double km = 1000.0 + static_cast<double>(rng.below(100'000));
  double km_span = 0.0;
  std::vector<double> km_gaps(events.size(), 0.0);
  for (std::size_t i = 1; i < events.size(); ++i) {
    gaps[i] = std::floor(gaps[i] * factor);
    km_gaps[i] = gaps[i] / 3600.0 * cfg.km_per_hour * rng.uniform(0.5, 1.5);
    km_span += km_gaps[i];
  }
  const double km_factor = km_span > 290.0 ? 290.0 / km_span : 1.0;
  double km_acc = km;
  for (std::size_t i = 0; i < events.size(); ++i) {
    t += static_cast<std::int64_t>(gaps[i]);
    km_acc += km_gaps[i] * km_factor;
    events[i].dtc.timestamp = t;
    events[i].dtc.mileage = static_cast<std::int64_t>(std::floor(km_acc));
  }
}

bool eval_threshold(const ModalityPair& pair, const PlantedRule& r) {
  const std::size_t len = pair.dtc.size();
  int count = 0;
  for (std::size_t n = 0; n < pair.env.size(); ++n) {
    const auto& t = pair.env[n];
    if (t.unit != r.unit) continue;
    const auto* v = std::get_if<double>(&t.value);
    if (!v || !(*v > r.threshold)) continue;
    if (3 * static_cast<std::size_t>(pair.env_origin[n]) >= 2 * len) ++count;
  }
  return count >= r.min_count;
}

bool eval_codes(const ModalityPair& pair, const PlantedRule& r) {
  for (int c : r.codes) {
    const bool found = std::any_of(pair.dtc.begin(), pair.dtc.end(),
                                   [c](const DtcEvent& e) { return e.base == c; });
    if (!found) return false;
  }
  return true;
}

}  // namespace

std::vector<int> replay_labels(const RawSequence& raw, const std::vector<PlantedRule>& rules) {
  RawSequence sorted = raw;
  sort_events(sorted);
  UnitSet units;
  for (const auto& ev : sorted.events)
    for (const auto& t : ev.env) units.insert(t.unit);
  const ModalityPair pair = preprocess(sorted, units);
  std::vector<int> labels;
  for (const auto& r : rules) {
    bool on = false;
    switch (r.kind) {
      case RuleKind::dtc_pattern: on = eval_codes(pair, r); break;
      case RuleKind::env_threshold: on = eval_threshold(pair, r); break;
      case RuleKind::joint: on = eval_codes(pair, r) && eval_threshold(pair, r); break;
    }
    if (on) labels.push_back(r.label);
  }
  return labels;
}

namespace {

CorpusRecord make_vehicle(const GeneratorConfig& cfg, const std::vector<PlantedRule>& rules,
                          std::uint64_t index) {
  Rng rng(mix_seed(cfg.seed, 0x1000 + index));
  Builder b{cfg, Layout{cfg}, rng};
  const Layout& layout = b.layout;
  CorpusRecord rec;
  rec.sequence.vehicle_id = "veh-" + std::to_string(cfg.seed) + "-" + std::to_string(index);

  const int len = std::max(cfg.dtc_length_min,
                           static_cast<int>(std::lround(rng.normal(cfg.dtc_length_mean, cfg.dtc_length_sd))));
  const double ratio = std::max(cfg.env_ratio_min, rng.normal(cfg.env_ratio_mean, cfg.env_ratio_sd));
  std::vector<RawEvent> events;
  for (int i = 0; i < len; ++i) events.push_back(b.event(ratio));
  assign_times(events, cfg, rng);

  // planting: decide triggers first so the draw count does not depend on L
  std::vector<bool> plant_codes(rules.size()), plant_drift(rules.size());
  for (std::size_t r = 0; r < rules.size(); ++r) {
    const bool full = rng.bernoulli(cfg.label_rate);
    const bool partial = rng.bernoulli(cfg.partial_rate);
    const bool half = rng.bernoulli(0.5);
    switch (rules[r].kind) {
      case RuleKind::dtc_pattern: plant_codes[r] = full; break;
      case RuleKind::env_threshold: plant_drift[r] = full; break;
      case RuleKind::joint:
        plant_codes[r] = full || (partial && half);
        plant_drift[r] = full || (partial && !half);
        break;
    }
  }

  std::vector<std::size_t> free_slots(events.size());
  for (std::size_t i = 0; i < free_slots.size(); ++i) free_slots[i] = i;
  rng.shuffle(free_slots);
  const int per_ecu = cfg.n_subsystems * cfg.codes_per_subsystem;
  for (std::size_t r = 0; r < rules.size(); ++r) {
    if (!plant_codes[r]) continue;
    for (int c : rules[r].codes) {
      if (free_slots.empty()) break;
      const std::size_t slot = free_slots.back();
      free_slots.pop_back();
      b.set_code(events[slot], c / per_ecu, (c / cfg.codes_per_subsystem) % cfg.n_subsystems,
                 c % cfg.codes_per_subsystem);
    }
  }

  // drift goes to late events that keep their env list after preprocessing
  std::vector<std::size_t> late;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const bool shared = i > 0 && events[i].dtc.timestamp == events[i - 1].dtc.timestamp;
    if (!shared && 3 * i >= 2 * events.size()) late.push_back(i);
  }
  for (std::size_t r = 0; r < rules.size(); ++r) {
    if (!plant_drift[r] || late.empty()) continue;
    for (int k = 0; k < cfg.drift_triplets; ++k) {
      EnvTriplet t;
      t.unit = rules[r].unit;
      t.description = layout.sensor_desc(t.unit, static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.descriptions_per_unit))));
      t.value = round1(rng.uniform(cfg.threshold + 5.0, cfg.threshold + 40.0));
      events[late[rng.below(late.size())]].env.push_back(std::move(t));
    }
  }

  // a few older events that the window drops
  const int outside = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_outside_events) + 1));
  std::vector<RawEvent> prefix;
  std::int64_t t = events.front().dtc.timestamp;
  std::int64_t m = events.front().dtc.mileage;
  for (int k = 0; k < outside; ++k) {
    RawEvent ev = b.event(ratio);
    t -= 31 * kDay + static_cast<std::int64_t>(rng.below(10 * kDay));
    m = std::max<std::int64_t>(0, m - static_cast<std::int64_t>(rng.below(200)));
    ev.dtc.timestamp = t;
    ev.dtc.mileage = m;
    prefix.push_back(std::move(ev));
  }
  std::reverse(prefix.begin(), prefix.end());
  rec.sequence.events = std::move(prefix);
  for (auto& ev : events) rec.sequence.events.push_back(std::move(ev));

  rec.labels = replay_labels(rec.sequence, rules);
  std::vector<bool> on(rules.size(), false);
  for (int l : rec.labels) on[static_cast<std::size_t>(l)] = true;
  rec.labels.clear();
  for (std::size_t r = 0; r < rules.size(); ++r) {
    if (rng.bernoulli(rules[r].noise_rate)) on[r] = !on[r];
    if (on[r]) rec.labels.push_back(rules[r].label);
  }
  return rec;
}

}  // namespace

GeneratedCorpus generate(const GeneratorConfig& cfg) {
  cfg.validate();
  GeneratedCorpus out;
  out.rules = make_rules(cfg);
  for (std::uint64_t i = 0; static_cast<int>(out.train.size()) < cfg.n_train; ++i) {
    CorpusRecord rec = make_vehicle(cfg, out.rules, i);
    switch (split_of(rec.sequence.vehicle_id)) {
      case 0: out.train.push_back(std::move(rec)); break;
      case 1: out.val.push_back(std::move(rec)); break;
      default: out.test.push_back(std::move(rec)); break;
    }
  }
  return out;
}

std::string manifest_json(const std::vector<PlantedRule>& rules) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& r : rules) {
    nlohmann::ordered_json params;
    if (r.kind != RuleKind::env_threshold) params["codes"] = r.codes;
    if (r.kind != RuleKind::dtc_pattern) {
      params["unit"] = r.unit;
      params["threshold"] = r.threshold;
      params["min_count"] = r.min_count;
    }
    params["noise_rate"] = r.noise_rate;
    nlohmann::ordered_json entry;
    entry["kind"] = to_string(r.kind);
    entry["params"] = std::move(params);
    entry["modality_required"] = r.modality_required();
    j[std::to_string(r.label)] = std::move(entry);
  }
  return j.dump(2) + "\n";
}

std::vector<PlantedRule> rules_from_manifest(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("manifest: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("manifest: top level must be an object");
  std::vector<PlantedRule> rules;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      PlantedRule r;
      r.label = std::stoi(it.key());
      r.kind = rule_kind_from_string(it->at("kind").get<std::string>());
      const auto& p = it->at("params");
      if (p.contains("codes")) r.codes = p["codes"].get<std::vector<int>>();
      if (p.contains("unit")) r.unit = p["unit"].get<int>();
      if (p.contains("threshold")) r.threshold = p["threshold"].get<double>();
      if (p.contains("min_count")) r.min_count = p["min_count"].get<int>();
      r.noise_rate = p.value("noise_rate", 0.0);
      rules.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ValidationError("manifest: label keys must be integers");
  }
  std::sort(rules.begin(), rules.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  return rules;
}

}  // namespace vdiag
