#pragma once

#include <stdexcept>
#include <string>

namespace focalmix {

/// Invalid configuration or shape contract (CLI exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent on-disk data (CLI exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss or parameter (CLI exit code 3).
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Contract violation by the caller (out-of-domain argument).
class ContractError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {
inline void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}
}  // namespace detail

}  // namespace focalmix
