// Copyright (c) 2026 The vdiag Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "vdiag/config.hpp"
#include "vdiag/nn.hpp"

namespace vdiag {

/// Checkpoint directory layout:
///   manifest.json  {"format", "kind", "config", "parameters": [{name, shape, file}]}
///   NNN.f64        raw little-endian float64 values of parameter NNN
void save_checkpoint(const std::filesystem::path& dir, const std::string& kind,
                     const Json& config, const ParameterList& params);

/// Parsed manifest.json of a checkpoint; throws if missing or of another kind.
Json read_checkpoint_manifest(const std::filesystem::path& dir, const std::string& kind);

/// Copies stored values into `params`; names and shapes must match exactly.
void load_parameters(const std::filesystem::path& dir, ParameterList& params);

}  // namespace vdiag
