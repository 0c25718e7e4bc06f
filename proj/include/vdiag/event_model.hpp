// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace vdiag {

/// Sentinel for a missing description or unit id in raw data.
inline constexpr int kAbsentId = -1;

/// One diagnostic trouble code occurrence: ECU | Base-DTC | Fault-Byte at a
/// timestamp (seconds) and odometer reading (km).
struct DtcEvent {
  int ecu = 0;
  int base = 0;
  int fault = 0;
  std::int64_t timestamp = 0;
  std::int64_t mileage = 0;

  bool operator==(const DtcEvent&) const = default;
};

/// Raw environmental value. `std::monostate` marks a null value.
using EnvValue = std::variant<std::monostate, double, std::string, bool>;

/// (description, value, unit) condition recorded alongside a DTC.
struct EnvTriplet {
  int description = kAbsentId;
  EnvValue value;
  int unit = kAbsentId;

  bool operator==(const EnvTriplet&) const = default;
  bool complete() const {
    return description != kAbsentId && unit != kAbsentId &&
           !std::holds_alternative<std::monostate>(value);
  }
};

struct RawEvent {
  DtcEvent dtc;
  std::vector<EnvTriplet> env;

  bool operator==(const RawEvent&) const = default;
};

/// All events of one vehicle, ordered by (timestamp, mileage).
struct RawSequence {
  std::string vehicle_id;
  std::vector<RawEvent> events;

  bool operator==(const RawSequence&) const = default;
};

/// The two modality streams after preprocessing. `env_origin[n]` is the
/// index into `dtc` of the event that contributed env triplet `n`.
struct ModalityPair {
  std::vector<DtcEvent> dtc;
  std::vector<EnvTriplet> env;
  std::vector<int> env_origin;
};

using UnitSet = std::set<int>;

/// Stable sort of events by (timestamp, mileage); ties keep input order.
void sort_events(RawSequence& raw);

/// Keeps events with t_last - t_i < max_seconds and m_last - m_i <= max_km,
/// anchored at the last event. Input must be sorted.
RawSequence window_filter(const RawSequence& raw, std::int64_t max_seconds,
                          std::int64_t max_km);

/// Drops incomplete triplets and later exact duplicates, keeping first-seen order.
std::vector<EnvTriplet> dedup_env(const std::vector<EnvTriplet>& local);

/// Flattens the env lists of a windowed sequence into a separate stream.
/// Only the first event of a group sharing one timestamp contributes env
/// triplets; triplets whose unit is not retained are dropped.
ModalityPair split_modalities(const RawSequence& raw, const UnitSet& retained_units);

/// Counts complete, deduplicated triplets per unit over a corpus and returns
/// the `k` most frequent units (ties broken by smaller unit id).
UnitSet top_units(const std::vector<RawSequence>& corpus, std::size_t k);

/// Window defaults: 30 days, 300 km.
inline constexpr std::int64_t kDefaultWindowSeconds = 30LL * 24 * 3600;
inline constexpr std::int64_t kDefaultWindowKm = 300;

/// window_filter + split_modalities with the default window.
ModalityPair preprocess(const RawSequence& raw, const UnitSet& retained_units,
                        std::int64_t max_seconds = kDefaultWindowSeconds,
                        std::int64_t max_km = kDefaultWindowKm);

}  // namespace vdiag
