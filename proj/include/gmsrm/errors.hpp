#pragma once

#include <stdexcept>
#include <string>

namespace gmsrm {

// Bad shapes, out-of-range arguments, malformed files.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Variant/weights mismatch, untrained memory, incompatible checkpoints.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss went NaN/Inf during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gmsrm
