// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/event_model.hpp"

#include <algorithm>
#include <map>
#include <unordered_set>

namespace vdiag {

void sort_events(RawSequence& raw) {
  std::stable_sort(raw.events.begin(), raw.events.end(),
                   [](const RawEvent& a, const RawEvent& b) {
                     if (a.dtc.timestamp != b.dtc.timestamp)
                       return a.dtc.timestamp < b.dtc.timestamp;
                     return a.dtc.mileage < b.dtc.mileage;
                   });
}

RawSequence window_filter(const RawSequence& raw, std::int64_t max_seconds,
                          std::int64_t max_km) {
  RawSequence out;
  out.vehicle_id = raw.vehicle_id;
  if (raw.events.empty()) return out;
  const auto& anchor = raw.events.back().dtc;
  for (const auto& ev : raw.events) {
    if (anchor.timestamp - ev.dtc.timestamp < max_seconds &&
        anchor.mileage - ev.dtc.mileage <= max_km)
      out.events.push_back(ev);
  }
  return out;
}

namespace {

struct TripletHash {
  std::size_t operator()(const EnvTriplet& t) const {
    std::size_t h = std::hash<int>{}(t.description) * 31 + std::hash<int>{}(t.unit);
    h = h * 31 + t.value.index();
    std::visit(
        [&h](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          if constexpr (!std::is_same_v<V, std::monostate>) h = h * 31 + std::hash<V>{}(v);
        },
        t.value);
    return h;
  }
};

}  // namespace

std::vector<EnvTriplet> dedup_env(const std::vector<EnvTriplet>& local) {
  std::vector<EnvTriplet> out;
  std::unordered_set<EnvTriplet, TripletHash> seen;
  for (const auto& t : local) {
    if (!t.complete()) continue;
    if (seen.insert(t).second) out.push_back(t);
  }
  return out;
}

ModalityPair split_modalities(const RawSequence& raw, const UnitSet& retained_units) {
  ModalityPair pair;
  pair.dtc.reserve(raw.events.size());
  bool have_prev = false;
  std::int64_t prev_t = 0;
  for (const auto& ev : raw.events) {
    const int index = static_cast<int>(pair.dtc.size());
    pair.dtc.push_back(ev.dtc);
    const bool shares_time = have_prev && ev.dtc.timestamp == prev_t;
    have_prev = true;
    prev_t = ev.dtc.timestamp;
    if (shares_time) continue;
    for (auto& t : dedup_env(ev.env)) {
      if (!retained_units.contains(t.unit)) continue;
      pair.env.push_back(std::move(t));
      pair.env_origin.push_back(index);
    }
  }
  return pair;
}

UnitSet top_units(const std::vector<RawSequence>& corpus, std::size_t k) {
  std::map<int, std::size_t> counts;
  for (const auto& seq : corpus)
    for (const auto& ev : seq.events)
      for (const auto& t : dedup_env(ev.env)) ++counts[t.unit];
  std::vector<std::pair<int, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  UnitSet out;
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i) out.insert(ranked[i].first);
  return out;
}

ModalityPair preprocess(const RawSequence& raw, const UnitSet& retained_units,
                        std::int64_t max_seconds, std::int64_t max_km) {
  return split_modalities(window_filter(raw, max_seconds, max_km), retained_units);
}

}  // namespace vdiag
