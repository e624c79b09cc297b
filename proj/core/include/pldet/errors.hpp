#pragma once

#include <stdexcept>
#include <string>

namespace pldet {

// Invalid shapes, axes, or incompatible tensor arguments.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Invalid configuration or argument values.
class ValueError : public std::invalid_argument {
 public:
  explicit ValueError(const std::string& what) : std::invalid_argument(what) {}
};

// NaN/Inf in a forward computation or a gradient. Never propagated silently;
// the trainer aborts the step and the CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// I/O failures (checkpoints, pool dumps, config files).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pldet
