#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace critgen {

// Shapes or preconditions violated by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite value produced inside a flow layer.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t layer)
      : std::runtime_error(what), layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

// Optimization diverged (non-finite loss or gradient).
class TrainingError : public std::runtime_error {
 public:
  explicit TrainingError(const std::string& what, long epoch = -1)
      : std::runtime_error(what), epoch_(epoch) {}
  long epoch() const noexcept { return epoch_; }

 private:
  long epoch_;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { version, malformed, dimension, io };
  CheckpointError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Stored artifacts disagree with each other or with the environment.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A search would exceed its configured query cap.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace critgen
