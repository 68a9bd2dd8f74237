#include "sherbet/error.hpp"

namespace sherbet {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::MultipleRoots: return "MultipleRoots";
    case ErrorCode::OrphanNode: return "OrphanNode";
    case ErrorCode::LevelOutOfRange: return "LevelOutOfRange";
    case ErrorCode::UnknownCode: return "UnknownCode";
    case ErrorCode::PointOutsideBall: return "PointOutsideBall";
    case ErrorCode::EmptyEdgeSet: return "EmptyEdgeSet";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyAdmission: return "EmptyAdmission";
    case ErrorCode::SchemaError: return "SchemaError";
    case ErrorCode::InsufficientPatients: return "InsufficientPatients";
    case ErrorCode::SingleAdmissionPatientInFineTune: return "SingleAdmissionPatientInFineTune";
    case ErrorCode::EmptyTruth: return "EmptyTruth";
    case ErrorCode::AllZeroSupport: return "AllZeroSupport";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::HeadMissing: return "HeadMissing";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::MissingArtifact: return "MissingArtifact";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace sherbet
