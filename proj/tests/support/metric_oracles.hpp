// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

// Slow reference implementations shared by the unit and acceptance tests.

#pragma once

#include <optional>

#include "vdiag/classifier.hpp"

namespace vdiag::oracle {

/// O(P*N) pairwise AUROC: a positive beating a negative counts 1, a tie 1/2.
inline std::optional<double> pairwise_auroc(const ScoreMatrix& s, const LabelMatrix& y) {
  std::vector<double> pos, neg;
  for (std::size_t b = 0; b < s.size(); ++b)
    for (std::size_t c = 0; c < s[b].size(); ++c) (y[b][c] ? pos : neg).push_back(s[b][c]);
  if (pos.empty() || neg.empty()) return std::nullopt;
  // integer half-wins keep the sum exact
  long long half_wins = 0;
  for (double p : pos)
    for (double n : neg) half_wins += p > n ? 2 : (p == n ? 1 : 0);
  return static_cast<double>(half_wins) / 2.0 /
         (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

inline Prf counts_to_prf(long tp, long fp, long fn) {
  Prf r;
  const bool nothing = tp + fp == 0 && tp + fn == 0;
  r.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : (nothing ? 1.0 : 0.0);
  r.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : (nothing ? 1.0 : 0.0);
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

/// Brute-force counting over explicit (row, column) cells of each group.
inline Prf brute_prf1(const ScoreMatrix& s, const LabelMatrix& y, double threshold, Averaging avg) {
  const std::size_t rows = s.size(), cols = rows ? s[0].size() : 0;
  auto tally = [&](auto&& in_group) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t b = 0; b < rows; ++b)
      for (std::size_t c = 0; c < cols; ++c) {
        if (!in_group(b, c)) continue;
        const bool p = s[b][c] >= threshold, t = y[b][c] != 0;
        if (p && t) ++tp;
        if (p && !t) ++fp;
        if (!p && t) ++fn;
      }
    return counts_to_prf(tp, fp, fn);
  };
  if (avg == Averaging::micro) return tally([](std::size_t, std::size_t) { return true; });
  const std::size_t groups = avg == Averaging::macro ? cols : rows;
  if (groups == 0) return {1.0, 1.0, 1.0};
  Prf sum;
  for (std::size_t g = 0; g < groups; ++g) {
    const Prf r = avg == Averaging::macro ? tally([g](std::size_t, std::size_t c) { return c == g; })
                                          : tally([g](std::size_t b, std::size_t) { return b == g; });
    sum.precision += r.precision;
    sum.recall += r.recall;
    sum.f1 += r.f1;
  }
  const double n = static_cast<double>(groups);
  return {sum.precision / n, sum.recall / n, sum.f1 / n};
}

}  // namespace vdiag::oracle
