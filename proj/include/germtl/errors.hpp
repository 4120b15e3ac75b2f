#pragma once

#include <stdexcept>
#include <string>

namespace germtl {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Index outside the valid range of a table or vocabulary.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Malformed input file or label.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// STL parameters used where MTL is required (or the reverse), or a missing head.
class EnvironmentError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace germtl
