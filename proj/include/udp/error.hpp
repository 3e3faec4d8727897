#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace udp {

/// Broad failure classes. The CLI maps these onto exit codes and every
/// module throws through the same hierarchy.
enum class ErrorKind {
  kConfiguration,
  kArgument,
  kShape,
  kNumericalDomain,
  kParse,
  kIo,
  kTransport,
  kProtocol,
  kVocabulary,
  kValidation,
  kPrecondition,
  kAnnotation,
  kData,
  kEpisode,
  kInvariant,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Transport failures are the only ones a caller may retry.
  bool retryable() const noexcept { return kind_ == ErrorKind::kTransport; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace udp
