#pragma once

#include <stdexcept>
#include <string>

namespace crate {

// Recoverable failure carrying a short machine-readable code ("empty_corpus",
// "context_overflow", ...). Anything else thrown out of the library is treated
// as an internal error by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

inline void require(bool condition, const char* code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

}  // namespace crate
