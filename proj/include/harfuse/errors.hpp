#pragma once

#include <stdexcept>
#include <string>

namespace harfuse {

// Shape/dimension mismatches between tensors or between a tensor and a config.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad configuration values (even kernel, K < 2, unknown config keys, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid data or artifacts (bad JSONL line, truncated checkpoint, ...).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated API contract (non-scalar loss, missing gradient, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace harfuse
