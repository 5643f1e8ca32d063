#pragma once

#include <stdexcept>
#include <string>

namespace hsd {

// Bad user input: invalid spec field, bad config value, out-of-range argument.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Tensor rank/size/channel mismatch detected before compute.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed or missing dataset content.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A loss component became NaN/Inf. `component()` names it.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::string component, double value)
      : std::runtime_error("non-finite loss component '" + component + "' (" + std::to_string(value) + ")"),
        component_(std::move(component)) {}
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

}  // namespace hsd
