#ifndef CTRLSIM_ERROR_HPP
#define CTRLSIM_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ctrlsim {

enum class ErrorKind {
  normalization,
  missing_context,
  budget_exceeded,
  undefined_conditional,
  zero_denominator,
  support_violation,
  unknown_policy,
  degenerate_fit,
  unseen_context,
  parse,
  invalid_argument,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::normalization: return "NormalizationError";
    case ErrorKind::missing_context: return "MissingContext";
    case ErrorKind::budget_exceeded: return "BudgetExceeded";
    case ErrorKind::undefined_conditional: return "UndefinedConditional";
    case ErrorKind::zero_denominator: return "ZeroDenominator";
    case ErrorKind::support_violation: return "SupportViolation";
    case ErrorKind::unknown_policy: return "UnknownPolicy";
    case ErrorKind::degenerate_fit: return "DegenerateFit";
    case ErrorKind::unseen_context: return "UnseenContext";
    case ErrorKind::parse: return "ParseError";
    case ErrorKind::invalid_argument: return "InvalidArgument";
  }
  return "Error";
}

/// Every failure raised by the library. `details` carries one line per
/// violation when a check collects several (e.g. environment validation).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::vector<std::string> details = {})
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        details_(std::move(details)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::vector<std::string>& details() const noexcept { return details_; }

 private:
  ErrorKind kind_;
  std::vector<std::string> details_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace ctrlsim

#endif  // CTRLSIM_ERROR_HPP
