#pragma once

#include <stdexcept>
#include <string>

namespace crm {

// Shape or size disagreement between arrays.
class DimensionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numeric argument outside its allowed range.
class ParameterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// More ground-truth segments than queries available for matching.
class CapacityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Missing or malformed model inputs.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A prediction passed to a loss that expects a different forward variant.
class ContractError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset content that violates its format.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or similar failure inside the optimisation loop.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace crm
