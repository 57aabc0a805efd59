#include "clipforge/error.hpp"

namespace clipforge {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::missing_file: return "MissingFile";
    case Errc::decode_error: return "DecodeError";
    case Errc::empty_video: return "EmptyVideo";
    case Errc::bad_channel_count: return "BadChannelCount";
    case Errc::missing_class_dir: return "MissingClassDir";
    case Errc::empty_class_dir: return "EmptyClassDir";
    case Errc::too_few_samples: return "TooFewSamples";
    case Errc::bad_magic: return "BadMagic";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::truncated_payload: return "TruncatedPayload";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::empty_split: return "EmptySplit";
    case Errc::non_finite_loss: return "NonFiniteLoss";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::bad_label: return "BadLabel";
    case Errc::empty_matrix: return "EmptyMatrix";
    case Errc::empty_history: return "EmptyHistory";
    case Errc::io_error: return "IOError";
    case Errc::checkpoint_missing: return "CheckpointMissing";
    case Errc::empty_plan: return "EmptyPlan";
    case Errc::render_tool_failure: return "RenderToolFailure";
    case Errc::schema_version_mismatch: return "SchemaVersionMismatch";
    case Errc::malformed_plan: return "MalformedPlan";
    case Errc::overlapping_intervals: return "OverlappingIntervals";
    case Errc::not_found: return "NotFound";
    case Errc::illegal_transition: return "IllegalTransition";
    case Errc::artifact_not_ready: return "ArtifactNotReady";
  }
  return "Unknown";
}

}  // namespace clipforge
