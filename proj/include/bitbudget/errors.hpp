#pragma once

#include <stdexcept>
#include <string>

namespace bitbudget {

// Requested average bit budget cannot be met by any assignment.
struct InfeasibleBudgetError : std::runtime_error {
  explicit InfeasibleBudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

// Instance exceeds a hard resource guard (table size, enumeration count).
struct ResourceLimitError : std::runtime_error {
  explicit ResourceLimitError(const std::string& msg) : std::runtime_error(msg) {}
};

// Persisted artifact failed an integrity check (hash mismatch, bad magic).
struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted because the loss became non-finite.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bitbudget
