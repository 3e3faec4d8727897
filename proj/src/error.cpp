#include "udp/error.hpp"

namespace udp {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfiguration: return "configuration error";
    case ErrorKind::kArgument: return "argument error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kNumericalDomain: return "numerical-domain error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kIo: return "io error";
    case ErrorKind::kTransport: return "transport error";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kVocabulary: return "vocabulary error";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kPrecondition: return "precondition error";
    case ErrorKind::kAnnotation: return "annotation error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kEpisode: return "episode error";
    case ErrorKind::kInvariant: return "internal invariant violation";
  }
  return "error";
}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace udp
