// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "vdiag/event_model.hpp"

namespace vdiag {

/// Greenwald-Khanna epsilon-approximate quantile summary.
///
/// Each tuple covers `g` observations; `delta` bounds the uncertainty of its
/// rank, so that r_min(i) = sum_{j<=i} g_j and r_max(i) = r_min(i) + delta_i
/// bracket the true rank of value_i. Compression runs every floor(1/(2 eps))
/// insertions using the band/descendant schedule of the original algorithm.
class GkSketch {
 public:
  struct Tuple {
    double value;
    std::size_t g;
    std::size_t delta;
  };

  explicit GkSketch(double epsilon);

  /// Throws ValidationError on non-finite input.
  void insert(double value);

  /// Value whose rank is within ceil(phi*N) +- eps*N. Throws on an empty sketch.
  double query(double phi) const;

  double epsilon() const noexcept { return epsilon_; }
  std::size_t count() const noexcept { return count_; }
  const std::vector<Tuple>& summary() const noexcept { return summary_; }

  /// Runs the compression pass immediately.
  void compress();

 private:
  double epsilon_;
  std::size_t count_ = 0;
  std::size_t compress_period_;
  std::vector<Tuple> summary_;
};

/// Per-unit bin edges and categorical literals, with a global token layout.
/// Units are laid out in ascending id; unit `u` owns the token range
/// [base_token, base_token + bins + categories). Two reserved tokens follow
/// the last unit: unknown value and mask.
class ValueVocab {
 public:
  struct UnitBins {
    std::vector<double> edges;            ///< strictly increasing
    std::vector<std::string> categories;  ///< sorted text/boolean literals
    int base_token = 0;

    int bin_count() const { return static_cast<int>(edges.size()) + 1; }
    int token_count() const { return bin_count() + static_cast<int>(categories.size()); }
    bool operator==(const UnitBins&) const = default;
  };

  ValueVocab() = default;
  ValueVocab(std::map<int, UnitBins> units, int theta);

  /// Token for a numeric value: offset(unit) + index of the half-open bin
  /// [edge_k, edge_{k+1}) holding it, clamped to the first/last bin.
  int value_to_token(int unit, double value) const;

  /// Token for any raw value (numbers are binned, text/booleans looked up).
  int token(int unit, const EnvValue& value) const;

  int unknown_token() const noexcept { return total_tokens_; }
  int mask_token() const noexcept { return total_tokens_ + 1; }
  /// Real value tokens (excluding the two reserved ones).
  int total_tokens() const noexcept { return total_tokens_; }
  int theta() const noexcept { return theta_; }

  const std::map<int, UnitBins>& units() const noexcept { return units_; }
  UnitSet retained_units() const;

  /// {"<unit>": {"edges": [...], "base_token": n, "categories": [...]}, ...}
  std::string to_json() const;
  static ValueVocab from_json(const std::string& text);

  /// Compares the token mapping only; theta is a fit-time cap that the JSON
  /// form does not carry.
  bool operator==(const ValueVocab& o) const { return units_ == o.units_; }

 private:
  std::map<int, UnitBins> units_;
  int theta_ = 0;
  int total_tokens_ = 0;
};

/// Literal used for text/boolean values in the categorical token range.
std::string category_literal(const EnvValue& value);

/// Per-unit stream of raw values fed to `fit_bins`.
struct UnitStream {
  std::vector<double> numbers;
  std::vector<std::string> categories;
};

/// Builds equal-frequency bins per unit: edges at quantiles k/theta for
/// k = 1..theta-1 from a GK sketch, dropping duplicates and edges at or below
/// the minimum. A unit without numeric values gets one catch-all bin.
ValueVocab fit_bins(const std::map<int, UnitStream>& streams, double epsilon, int theta);

/// Collects per-unit value streams from preprocessed sequences.
std::map<int, UnitStream> collect_unit_streams(const std::vector<ModalityPair>& pairs,
                                               const UnitSet& retained_units);

}  // namespace vdiag
