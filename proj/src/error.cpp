#include "slicepath/error.h"

namespace slicepath {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::MalformedNumber: return "MalformedNumber";
        case ErrorKind::NegativeLayerHeight: return "NegativeLayerHeight";
        case ErrorKind::UnsupportedArc: return "UnsupportedArc";
        case ErrorKind::TruncatedFile: return "TruncatedFile";
        case ErrorKind::BadMagic: return "BadMagic";
        case ErrorKind::OpenContour: return "OpenContour";
        case ErrorKind::EmptyContour: return "EmptyContour";
        case ErrorKind::UnknownShape: return "UnknownShape";
        case ErrorKind::MaskEmpty: return "MaskEmpty";
        case ErrorKind::NoContourFound: return "NoContourFound";
        case ErrorKind::SchemaVersionMismatch: return "SchemaVersionMismatch";
        case ErrorKind::ChecksumMismatch: return "ChecksumMismatch";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorKind::NonFiniteParam: return "NonFiniteParam";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::NonFiniteState: return "NonFiniteState";
        case ErrorKind::AllMasked: return "AllMasked";
        case ErrorKind::DegenerateSample: return "DegenerateSample";
        case ErrorKind::ZeroTruthMean: return "ZeroTruthMean";
        case ErrorKind::EmptyPath: return "EmptyPath";
        case ErrorKind::IoFailure: return "IoFailure";
    }
    return "Unknown";
}

}  // namespace slicepath
