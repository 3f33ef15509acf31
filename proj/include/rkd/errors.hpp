// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rkd {

// Shape or contract violation in tensor ops / network building.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed dataset files. `kind` lets callers distinguish the documented
// failure classes without parsing messages.
struct DataFormatError : std::runtime_error {
  enum class Kind { BadMagic, Truncated, CountMismatch, BadValue };
  DataFormatError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  Kind kind;
};

// Checkpoint manifest/weights inconsistencies.
struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad run configuration or CLI arguments.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rkd
