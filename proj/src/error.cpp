#include "dprune/error.hpp"

namespace dprune {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kIndex: return "index";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kLength: return "length";
    case ErrorCode::kData: return "data";
    case ErrorCode::kPlanStale: return "plan_stale";
    case ErrorCode::kSelection: return "selection";
    case ErrorCode::kIntegrity: return "integrity";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDependency: return "dependency";
    case ErrorCode::kUndefined: return "undefined";
    case ErrorCode::kLocked: return "locked";
  }
  return "unknown";
}

}  // namespace dprune
