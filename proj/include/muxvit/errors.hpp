#pragma once

#include <stdexcept>
#include <string>

namespace muxvit {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct DistributionError : std::runtime_error {
  explicit DistributionError(const std::string& msg)
      : std::runtime_error("distribution error: " + msg) {}
};

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Checkpoint loading distinguishes failure modes so callers can react.
struct CheckpointError : std::runtime_error {
  enum class Kind { BadMagic, UnknownVersion, Truncated, AliasInconsistency, Malformed };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg)
      : std::runtime_error("checkpoint error: " + msg), kind(k) {}
};

}  // namespace muxvit
