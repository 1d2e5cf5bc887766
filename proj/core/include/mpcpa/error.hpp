#pragma once

#include <stdexcept>
#include <string>

namespace mpcpa {

// Bad argument handed to an operation (dimension mismatch, out-of-range
// index, invalid schedule bounds, ...).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A configuration that cannot be executed (empty client shard, inconsistent
// class counts, partition retry budget exhausted, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Out-of-order actor interaction in the protocol state machines.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed serialized artifact or run directory.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidInput(message);
}

}  // namespace mpcpa
