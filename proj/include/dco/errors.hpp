#pragma once

#include <stdexcept>
#include <string>

namespace dco {

/// Malformed input file: bad CSV header, non-numeric cell, out-of-range label.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid run configuration or command-line flag.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dco
