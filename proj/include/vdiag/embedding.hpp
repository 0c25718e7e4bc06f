// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "vdiag/nn.hpp"

namespace vdiag {

/// How the environmental value and description embeddings are combined.
/// `concat`: concat(V_e, D_e) + U_e with d_v + d_d = d.
/// `sum`:    V_e + D_e + U_e with d_v = d_d = d.
enum class EnvFusion { concat, sum };

struct EmbeddingConfig {
  int d = 64;
  int n_ecu = 2;
  int n_base = 2;
  int n_desc = 2;
  int n_value = 2;  ///< real value tokens from the quantile vocabulary
  int n_units = 1;  ///< retained units
  int d_ecu = 0;    ///< 0 selects d/2
  int d_value = 0;  ///< 0 selects d/2 (ignored for sum fusion)
  EnvFusion env_fusion = EnvFusion::concat;

  int ecu_width() const { return d_ecu > 0 ? d_ecu : d / 2; }
  int base_width() const { return d - ecu_width(); }
  int value_width() const {
    return env_fusion == EnvFusion::sum ? d : (d_value > 0 ? d_value : d / 2);
  }
  int desc_width() const { return env_fusion == EnvFusion::sum ? d : d - value_width(); }

  // reserved ids appended after the real vocabulary
  int unk_ecu() const { return n_ecu; }
  int unk_base() const { return n_base; }
  int mask_base() const { return n_base + 1; }
  int unk_desc() const { return n_desc; }
  int mask_desc() const { return n_desc + 1; }
  int unk_value() const { return n_value; }
  int mask_value() const { return n_value + 1; }
  int unk_unit() const { return n_units; }

  void validate() const;
};

/// Frequency bases for the continuous time/mileage sinusoids. Event times
/// and mileages are measured from the first event of the window, in units of
/// `time_unit_seconds` and `mileage_unit_km`.
struct PositionalConfig {
  double base_time = 5000.0;
  double base_mileage = 5000.0;
  double time_unit_seconds = 3600.0;
  double mileage_unit_km = 1.0;
};

struct DtcEmbeddingTables {
  Tensor ecu;    ///< [(n_ecu + 1) x d_ecu]
  Tensor base;   ///< [(n_base + 2) x d_base]
  Tensor fault;  ///< [2 x d]
  Tensor cls;    ///< [1 x d]

  static DtcEmbeddingTables create(const EmbeddingConfig& cfg, Rng& rng);
  void collect(ParameterList& params) const;
};

struct EnvEmbeddingTables {
  Tensor desc;   ///< [(n_desc + 2) x d_desc]
  Tensor value;  ///< [(n_value + 2) x d_value]
  Tensor unit;   ///< [(n_units + 1) x d]
  Tensor cls;    ///< [1 x d]
  EnvFusion fusion = EnvFusion::concat;

  static EnvEmbeddingTables create(const EmbeddingConfig& cfg, Rng& rng);
  void collect(ParameterList& params) const;
};

/// concat(D_ecu, D_base) + D_f for each event, [L x d].
Tensor embed_dtc(std::span<const int> ecu, std::span<const int> base, std::span<const int> fault,
                 const DtcEmbeddingTables& tables);

/// concat(T, M): sinusoids of time and mileage, each channel d/2 wide with
/// T[i,j] = sin(t_i * base^(-j/w)) for even j and cos(t_i * base^(-(j-1)/w))
/// for odd j. Parameter free.
Tensor time_mileage_embedding(std::span<const double> times, std::span<const double> mileages,
                              int d, const PositionalConfig& cfg);

/// [CLS] + positional pattern at t=m=0, followed by embed_dtc + positional
/// rows; [(L + 1) x d].
Tensor fuse_dtc_input(std::span<const int> ecu, std::span<const int> base,
                      std::span<const int> fault, std::span<const double> times,
                      std::span<const double> mileages, const DtcEmbeddingTables& tables,
                      const PositionalConfig& cfg);

/// [CLS]_env followed by the fused triplet rows; [(Le + 1) x d].
Tensor embed_env(std::span<const int> desc, std::span<const int> value, std::span<const int> unit,
                 const EnvEmbeddingTables& tables);

}  // namespace vdiag
