#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace clipforge {

enum class Errc {
  invalid_argument,
  missing_file,
  decode_error,
  empty_video,
  bad_channel_count,
  missing_class_dir,
  empty_class_dir,
  too_few_samples,
  bad_magic,
  version_mismatch,
  truncated_payload,
  shape_mismatch,
  empty_split,
  non_finite_loss,
  length_mismatch,
  bad_label,
  empty_matrix,
  empty_history,
  io_error,
  checkpoint_missing,
  empty_plan,
  render_tool_failure,
  schema_version_mismatch,
  malformed_plan,
  overlapping_intervals,
  not_found,
  illegal_transition,
  artifact_not_ready,
};

std::string_view to_string(Errc code);

/// Domain error carrying a machine-checkable code. Every failure the
/// library reports on purpose is one of these.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace clipforge
