#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace topo_nas {

// Machine-readable failure classes; the CLI maps each to its own exit code.
enum class ErrorCategory {
  invalid_argument,
  infeasible,
  parse,
  io,
  numeric,
  mismatch,
  stale_gradient,
  locked,
  stage_failed,
};

constexpr std::string_view category_name(ErrorCategory c) noexcept {
  switch (c) {
    case ErrorCategory::invalid_argument: return "invalid_argument";
    case ErrorCategory::infeasible: return "infeasible";
    case ErrorCategory::parse: return "parse";
    case ErrorCategory::io: return "io";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::mismatch: return "mismatch";
    case ErrorCategory::stale_gradient: return "stale_gradient";
    case ErrorCategory::locked: return "locked";
    case ErrorCategory::stage_failed: return "stage_failed";
  }
  return "unknown";
}

constexpr int exit_code(ErrorCategory c) noexcept { return 10 + static_cast<int>(c); }

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& what) {
  throw Error(category, what);
}

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(ErrorCategory::invalid_argument, what);
}

}  // namespace topo_nas
