#pragma once

#include <stdexcept>
#include <string>

namespace beliefqa {

// Error taxonomy shared by every module. The CLI maps these onto its exit
// code contract: ConfigError -> 2, FormatError -> 2, NumericError -> 3,
// anything else -> 1.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConsistencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace beliefqa
