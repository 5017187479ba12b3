#include "stmgt/error.hpp"

namespace stmgt {

const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "E_DIMENSION";
    case ErrorKind::Contract: return "E_CONTRACT";
    case ErrorKind::Config: return "E_CONFIG";
    case ErrorKind::Ingestion: return "E_INGESTION";
    case ErrorKind::Numeric: return "E_NUMERIC";
  }
  return "E_UNKNOWN";
}

}  // namespace stmgt
