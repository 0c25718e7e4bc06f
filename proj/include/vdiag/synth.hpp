// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vdiag/common.hpp"
#include "vdiag/corpus_io.hpp"

namespace vdiag {

enum class RuleKind { dtc_pattern, env_threshold, joint };

std::string to_string(RuleKind kind);
RuleKind rule_kind_from_string(const std::string& s);

/// How one label is produced.
///   dtc_pattern:   every code in `codes` occurs in the DTC stream.
///   env_threshold: at least `min_count` triplets of `unit` with a numeric
///                  value > `threshold` come from events in the last third
///                  of the DTC stream (event index i with 3 i >= 2 L).
///   joint:         both of the above.
struct PlantedRule {
  int label = 0;
  RuleKind kind = RuleKind::dtc_pattern;
  std::vector<int> codes;
  int unit = 0;
  double threshold = 0.0;
  int min_count = 1;
  double noise_rate = 0.0;

  /// "dtc", "env" or "both".
  std::string modality_required() const;
};

/// Generator layout. ECU e and hidden subsystem s emit base codes
/// (e*S*J + s*J + j) % n_base for j < J, and every event carries a status
/// triplet (description (e*S + s)*J + j, unit 0, text value) that names the
/// code before any modulo folding. Sensor units 1..n_sensor_units read truncated normal values
/// below each unit's threshold unless a rule injects a late drift; units
/// past that range are rare. Every label kind gets its own unit block:
/// env-only rules use units 1..n_env_labels, joint rules the next block.
struct GeneratorConfig {
  std::uint64_t seed = 0;
  int n_train = 2000;  ///< generation stops once the train split holds this many
  int n_ecu = 12;
  int n_subsystems = 4;
  int codes_per_subsystem = 4;
  int n_base = 192;
  int n_sensor_units = 17;
  int n_rare_units = 2;
  int descriptions_per_unit = 4;
  double dtc_length_mean = 40.0;
  double dtc_length_sd = 15.0;
  int dtc_length_min = 5;
  double env_ratio_mean = 15.0;
  double env_ratio_sd = 5.0;
  double env_ratio_min = 1.0;
  int n_labels = 24;
  int n_env_labels = 8;
  int n_joint_labels = 8;
  double label_rate = 0.2;     ///< chance of planting each label's trigger
  double partial_rate = 0.2;   ///< chance of planting half of a joint trigger
  double noise_rate = 0.01;
  double sensor_mean = 50.0;
  double sensor_sd = 10.0;
  double threshold = 80.0;
  int drift_min_count = 2;
  int drift_triplets = 6;      ///< triplets added to a drifting unit
  double burst_rate = 0.3;     ///< chance the next event is part of a burst
  double mean_gap_hours = 30.0;
  double km_per_hour = 0.4;
  double duplicate_rate = 0.05;
  double null_rate = 0.03;
  int max_outside_events = 3;  ///< events placed before the 30-day window

  int n_descriptions() const;
  int n_units() const { return 1 + n_sensor_units + n_rare_units; }
  void validate() const;
};

struct GeneratedCorpus {
  std::vector<CorpusRecord> train, val, test;
  std::vector<PlantedRule> rules;
};

/// 70/15/15 split bucket of a vehicle id: 0 train, 1 val, 2 test.
int split_of(const std::string& vehicle_id);

GeneratedCorpus generate(const GeneratorConfig& cfg);

/// Applies the rules to a raw sequence after the default preprocessing,
/// without label noise.
std::vector<int> replay_labels(const RawSequence& raw, const std::vector<PlantedRule>& rules);

/// {"<label>": {"kind", "params", "modality_required"}, ...}
std::string manifest_json(const std::vector<PlantedRule>& rules);
std::vector<PlantedRule> rules_from_manifest(const std::string& text);

}  // namespace vdiag
