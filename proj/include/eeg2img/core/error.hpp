#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eeg2img {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (out-of-range pixels, degenerate batches, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Graph misuse, e.g. a second backward pass over a consumed graph.
class StateError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf in a loss or gradient. Training entry points abort with this.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk dataset or checkpoint.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace eeg2img
