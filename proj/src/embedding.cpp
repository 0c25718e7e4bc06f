// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#include "vdiag/embedding.hpp"

#include <cmath>

namespace vdiag {

void EmbeddingConfig::validate() const {
  if (d < 4 || d % 4 != 0) throw ValidationError("embedding: d must be a positive multiple of 4");
  if (n_ecu < 1 || n_base < 1 || n_desc < 1 || n_value < 1 || n_units < 1)
    throw ValidationError("embedding: vocabulary sizes must be >= 1");
  if (ecu_width() <= 0 || base_width() <= 0)
    throw ValidationError("embedding: d_ecu must leave room for the base-DTC span");
  if (env_fusion == EnvFusion::concat && (value_width() <= 0 || desc_width() <= 0))
    throw ValidationError("embedding: d_value must leave room for the description span");
}

DtcEmbeddingTables DtcEmbeddingTables::create(const EmbeddingConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d);
  DtcEmbeddingTables t;
  t.ecu = init_normal({static_cast<std::size_t>(cfg.n_ecu + 1), static_cast<std::size_t>(cfg.ecu_width())}, rng, 1.0);
  t.base = init_normal({static_cast<std::size_t>(cfg.n_base + 2), static_cast<std::size_t>(cfg.base_width())}, rng, 1.0);
  t.fault = init_normal({2, d}, rng, 1.0);
  t.cls = init_normal({1, d}, rng, 1.0);
  return t;
}

void DtcEmbeddingTables::collect(ParameterList& params) const {
  params.add("dtc.ecu", ecu, true, true);
  params.add("dtc.base", base, true, true);
  params.add("dtc.fault", fault, true, true);
  params.add("dtc.cls", cls, false);
}

EnvEmbeddingTables EnvEmbeddingTables::create(const EmbeddingConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d);
  EnvEmbeddingTables t;
  t.fusion = cfg.env_fusion;
  t.desc = init_normal({static_cast<std::size_t>(cfg.n_desc + 2), static_cast<std::size_t>(cfg.desc_width())}, rng, 1.0);
  t.value = init_normal({static_cast<std::size_t>(cfg.n_value + 2), static_cast<std::size_t>(cfg.value_width())}, rng, 1.0);
  t.unit = init_normal({static_cast<std::size_t>(cfg.n_units + 1), d}, rng, 1.0);
  t.cls = init_normal({1, d}, rng, 1.0);
  return t;
}

void EnvEmbeddingTables::collect(ParameterList& params) const {
  params.add("env.desc", desc, true, true);
  params.add("env.value", value, true, true);
  params.add("env.unit", unit, true, true);
  params.add("env.cls", cls, false);
}

Tensor embed_dtc(std::span<const int> ecu, std::span<const int> base, std::span<const int> fault,
                 const DtcEmbeddingTables& tables) {
  if (ecu.size() != base.size() || ecu.size() != fault.size())
    throw DimensionError("embed_dtc: id lists differ in length");
  return add(concat_cols({gather_rows(tables.ecu, ecu), gather_rows(tables.base, base)}),
             gather_rows(tables.fault, fault));
}

Tensor time_mileage_embedding(std::span<const double> times, std::span<const double> mileages,
                              int d, const PositionalConfig& cfg) {
  if (times.size() != mileages.size())
    throw DimensionError("time_mileage_embedding: times and mileages differ in length");
  if (d % 4 != 0) throw ValidationError("time_mileage_embedding: d must be a multiple of 4");
  const std::size_t width = static_cast<std::size_t>(d) / 2;
  const std::size_t n = static_cast<std::size_t>(d);
  Tensor out({times.size(), n});
  auto channel = [&](double x, double base, double* dst) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t even = j - (j % 2);
      const double freq = std::pow(base, -static_cast<double>(even) / static_cast<double>(width));
      dst[j] = (j % 2 == 0) ? std::sin(x * freq) : std::cos(x * freq);
    }
  };
  for (std::size_t i = 0; i < times.size(); ++i) {
    double* row = out.data().data() + i * n;
    channel(times[i], cfg.base_time, row);
    channel(mileages[i], cfg.base_mileage, row + width);
  }
  return out;
}

Tensor fuse_dtc_input(std::span<const int> ecu, std::span<const int> base,
                      std::span<const int> fault, std::span<const double> times,
                      std::span<const double> mileages, const DtcEmbeddingTables& tables,
                      const PositionalConfig& cfg) {
  const int d = static_cast<int>(tables.cls.cols());
  const double zero = 0.0;
  Tensor cls_row = add(tables.cls, time_mileage_embedding({&zero, 1}, {&zero, 1}, d, cfg));
  if (ecu.empty()) return cls_row;
  Tensor events = add(embed_dtc(ecu, base, fault, tables), time_mileage_embedding(times, mileages, d, cfg));
  return concat_rows({cls_row, events});
}

Tensor embed_env(std::span<const int> desc, std::span<const int> value, std::span<const int> unit,
                 const EnvEmbeddingTables& tables) {
  if (desc.size() != value.size() || desc.size() != unit.size())
    throw DimensionError("embed_env: id lists differ in length");
  if (desc.empty()) return tables.cls;
  Tensor v = gather_rows(tables.value, value);
  Tensor dsc = gather_rows(tables.desc, desc);
  Tensor fused = tables.fusion == EnvFusion::concat ? concat_cols({v, dsc}) : add(v, dsc);
  return concat_rows({tables.cls, add(fused, gather_rows(tables.unit, unit))});
}

}  // namespace vdiag
