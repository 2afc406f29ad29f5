// Error categories surfaced by the library and mapped to CLI exit codes.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ilkd {

/// Invalid configuration (model, stage, manifest, task spec). CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed data or checkpoint files. CLI exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Structured parse failure at a byte offset within a binary file.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::uint64_t offset)
      : DataError(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Non-finite values during training or an undefined statistic. CLI exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ilkd
