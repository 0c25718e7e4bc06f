// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vdiag {

namespace {

constexpr const char* kFormat = "vdiag-checkpoint/1";

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are written in host order, which must be little-endian");

std::string file_name(std::size_t index) {
  std::ostringstream os;
  os.width(3);
  os.fill('0');
  os << index << ".f64";
  return os.str();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                     const Json& config, const ParameterList& params) {
  std::filesystem::create_directories(dir);
  Json manifest;
  manifest["format"] = kFormat;
  manifest["kind"] = kind;
  manifest["config"] = config;
  Json list = Json::array();
  const auto& items = params.items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& p = items[i];
    const std::string name = file_name(i);
    std::ofstream out(dir / name, std::ios::binary);
    const auto data = p.value.data();
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!out) throw ValidationError("checkpoint: cannot write " + (dir / name).string());
    Json entry;
    entry["name"] = p.name;
    entry["shape"] = p.value.shape();
    entry["file"] = name;
    list.push_back(std::move(entry));
  }
  manifest["parameters"] = std::move(list);
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw ValidationError("checkpoint: cannot write manifest in " + dir.string());
}

Json read_checkpoint_manifest(const std::filesystem::path& dir, const std::string& kind) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ValidationError("checkpoint: no manifest.json in " + dir.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Json j;
  try {
    j = Json::parse(ss.str());
  } catch (const Json::parse_error& e) {
    throw ValidationError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kFormat)
    throw ValidationError("checkpoint: unsupported format in " + dir.string());
  if (j.value("kind", "") != kind)
    throw ValidationError("checkpoint: " + dir.string() + " holds a '" + j.value("kind", "") +
                          "', expected '" + kind + "'");
  return j;
}

void load_parameters(const std::filesystem::path& dir, ParameterList& params) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ValidationError("checkpoint: no manifest.json in " + dir.string());
  const Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.contains("parameters"))
    throw ValidationError("checkpoint: malformed manifest in " + dir.string());
  const auto& list = j.at("parameters");
  auto& items = params.items();
  if (list.size() != items.size())
    throw ValidationError("checkpoint: " + std::to_string(list.size()) + " parameters stored, model has " +
                          std::to_string(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& p = items[i];
    const auto& e = list[i];
    if (e.value("name", "") != p.name)
      throw ValidationError("checkpoint: parameter " + std::to_string(i) + " is '" + e.value("name", "") +
                            "', expected '" + p.name + "'");
    if (e.at("shape").get<Shape>() != p.value.shape())
      throw DimensionError("checkpoint: shape of '" + p.name + "' differs from " + p.value.shape_string());
    const auto path = dir / e.at("file").get<std::string>();
    std::ifstream f(path, std::ios::binary);
    auto data = p.value.data();
    const auto bytes = static_cast<std::streamsize>(data.size() * sizeof(double));
    f.read(reinterpret_cast<char*>(data.data()), bytes);
    if (f.gcount() != bytes || f.peek() != std::char_traits<char>::eof())
      throw ValidationError("checkpoint: " + path.string() + " has the wrong size");
  }
}

}  // namespace vdiag
