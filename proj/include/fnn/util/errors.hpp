#pragma once

#include <stdexcept>
#include <string>

namespace fnn {

// Raised for malformed configs, bad file contents, unknown keys.
// The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for numerical failures: divergence, non-finite values,
// violated stability preconditions. The CLI maps this to exit code 2.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace fnn
