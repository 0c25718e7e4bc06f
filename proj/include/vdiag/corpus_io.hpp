// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vdiag/event_model.hpp"

namespace vdiag {

/// One corpus line: a raw vehicle sequence and its error-pattern labels.
struct CorpusRecord {
  RawSequence sequence;
  std::vector<int> labels;

  bool operator==(const CorpusRecord&) const = default;
};

/// Serializes one record as a single JSON line (no trailing newline):
/// {"vehicle_id":..,"events":[{"ecu","base","fb","t","m","env":[[d,v,c],..]}],"labels":[..]}
std::string record_to_json_line(const CorpusRecord& record);

/// Parses one JSON line; throws ValidationError naming the offending field.
CorpusRecord record_from_json_line(const std::string& line);

void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records);
std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path);

}  // namespace vdiag
