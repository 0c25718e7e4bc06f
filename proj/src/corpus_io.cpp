// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/corpus_io.hpp"

#include <fstream>

#include "json.hpp"
#include "vdiag/common.hpp"

namespace vdiag {

using nlohmann::json;

namespace {

json value_to_json(const EnvValue& v) {
  return std::visit(
      [](const auto& x) -> json {
        using V = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<V, std::monostate>)
          return nullptr;
        else
          return x;
      },
      v);
}

EnvValue value_from_json(const json& j) {
  if (j.is_null()) return std::monostate{};
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  throw ValidationError("env value: unsupported JSON type " + std::string(j.type_name()));
}

int id_from_json(const json& j, const char* field) {
  if (j.is_null()) return kAbsentId;
  if (!j.is_number_integer()) throw ValidationError(std::string("env ") + field + ": expected integer or null");
  return j.get<int>();
}

template <class T>
T required(const json& obj, const char* field) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ValidationError(std::string("missing field '") + field + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("field '") + field + "' has wrong type");
  }
}

}  // namespace

std::string record_to_json_line(const CorpusRecord& record) {
  json events = json::array();
  for (const auto& ev : record.sequence.events) {
    json env = json::array();
    for (const auto& t : ev.env) {
      env.push_back(json::array({t.description == kAbsentId ? json(nullptr) : json(t.description),
                                 value_to_json(t.value),
                                 t.unit == kAbsentId ? json(nullptr) : json(t.unit)}));
    }
    json e;
    e["ecu"] = ev.dtc.ecu;
    e["base"] = ev.dtc.base;
    e["fb"] = ev.dtc.fault;
    e["t"] = ev.dtc.timestamp;
    e["m"] = ev.dtc.mileage;
    e["env"] = std::move(env);
    events.push_back(std::move(e));
  }
  json j;
  j["vehicle_id"] = record.sequence.vehicle_id;
  j["events"] = std::move(events);
  j["labels"] = record.labels;
  return j.dump();
}

CorpusRecord record_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed JSON line: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("corpus line is not a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "vehicle_id" && it.key() != "events" && it.key() != "labels")
      throw ValidationError("unknown field '" + it.key() + "'");
  }
  CorpusRecord rec;
  rec.sequence.vehicle_id = required<std::string>(j, "vehicle_id");
  const json events = required<json>(j, "events");
  if (!events.is_array()) throw ValidationError("field 'events' must be an array");
  for (const auto& e : events) {
    RawEvent ev;
    ev.dtc.ecu = required<int>(e, "ecu");
    ev.dtc.base = required<int>(e, "base");
    ev.dtc.fault = required<int>(e, "fb");
    ev.dtc.timestamp = required<std::int64_t>(e, "t");
    ev.dtc.mileage = required<std::int64_t>(e, "m");
    if (ev.dtc.fault != 0 && ev.dtc.fault != 1) throw ValidationError("field 'fb' must be 0 or 1");
    if (ev.dtc.timestamp < 0) throw ValidationError("field 't' must be non-negative");
    if (ev.dtc.mileage < 0) throw ValidationError("field 'm' must be non-negative");
    if (auto it = e.find("env"); it != e.end()) {
      if (!it->is_array()) throw ValidationError("field 'env' must be an array");
      for (const auto& t : *it) {
        if (!t.is_array() || t.size() != 3) throw ValidationError("env entry must be [d, v, c]");
        ev.env.push_back({id_from_json(t[0], "description"), value_from_json(t[1]),
                          id_from_json(t[2], "unit")});
      }
    }
    rec.sequence.events.push_back(std::move(ev));
  }
  if (j.contains("labels")) rec.labels = required<std::vector<int>>(j, "labels");
  return rec;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<CorpusRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open for writing: " + path.string());
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
}

std::vector<CorpusRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open corpus file: " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json_line(line));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace vdiag
