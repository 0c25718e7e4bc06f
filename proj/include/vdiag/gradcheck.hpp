// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vdiag {

inline constexpr double kTightTolerance = 1e-6;
inline constexpr double kLooseTolerance = 1e-4;

struct GradCheckCase {
  std::string name;
  double tolerance = kLooseTolerance;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double seconds = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double seconds = 0.0;

  bool passed() const;
  std::string to_json() const;
};

/// Finite-difference check of every differentiable op and of the complete
/// models at tiny sizes. Non-scalar outputs are reduced with a fixed random
/// projection so every output coordinate contributes to the gradient.
/// The full multimodal case uses d=8, 2 heads, 2 layers, L=6 and Le=20.
GradCheckReport run_grad_check_suite(std::uint64_t seed);

}  // namespace vdiag
