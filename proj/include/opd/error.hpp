#pragma once

#include <stdexcept>
#include <string>

namespace opd {

/// Bad argument or violated precondition.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A NaN/Inf showed up in a loss, state or gradient.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent experiment configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A later stage was asked to run before its inputs exist.
struct MissingPrerequisite : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument(what);
}

}  // namespace opd
