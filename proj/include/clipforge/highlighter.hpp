#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clipforge/media.hpp"
#include "clipforge/nn.hpp"

namespace clipforge::highlighter {

struct WindowScore {
  media::WindowSpec window;
  double p_violence = 0;

  friend bool operator==(const WindowScore&, const WindowScore&) = default;
};

struct HighlightParams {
  double threshold = 0.5;  // a window is violent when p >= threshold
  int stride_frames = 8;
  double max_gap_sec = 1.0;
  double min_len_sec = 1.0;

  void validate() const;
  friend bool operator==(const HighlightParams&, const HighlightParams&) = default;
};

nlohmann::json to_json(const HighlightParams& p);
/// Missing keys keep their defaults.
HighlightParams params_from_json(const nlohmann::json& j);

struct Segment {
  double start_sec = 0;
  double end_sec = 0;
  double mean_score = 0;
  double peak_score = 0;

  double duration() const { return end_sec - start_sec; }
  friend bool operator==(const Segment&, const Segment&) = default;
};

inline constexpr int kPlanSchemaVersion = 1;

struct HighlightPlan {
  std::string source_id;
  HighlightParams params;
  std::vector<Segment> segments;
  double total_sec = 0;
  std::string checkpoint_id;

  friend bool operator==(const HighlightPlan&, const HighlightPlan&) = default;
};

/// Scores every sliding window of the video (eval mode). Frames are
/// decoded once, in order.
std::vector<WindowScore> score_video(const media::VideoMeta& video, const nn::ModelConfig& model,
                                     const nn::ModelParams& params, int stride_frames = 8);

/// Same over frames already in memory (resampled, normalized).
std::vector<WindowScore> score_frames(std::span<const std::vector<float>> frames,
                                      const nn::ModelConfig& model, const nn::ModelParams& params,
                                      int stride_frames = 8);

/// Threshold, union, close gaps of at most max_gap_sec, drop segments
/// shorter than min_len_sec. Works on frame indices at 16 fps, so the
/// result is exact. `scores` must be ordered by window start.
std::vector<Segment> segments_from_scores(std::span<const WindowScore> scores,
                                          double threshold = 0.5, double max_gap_sec = 1.0,
                                          double min_len_sec = 1.0);

HighlightPlan make_plan(std::string source_id, const HighlightParams& params,
                        std::vector<Segment> segments, std::string checkpoint_id);

nlohmann::json to_json(const HighlightPlan& plan);
/// Throws SchemaVersionMismatch, MalformedPlan.
HighlightPlan plan_from_json(const nlohmann::json& j);
void export_plan(const HighlightPlan& plan, const std::filesystem::path& path);
HighlightPlan import_plan(const std::filesystem::path& path);

nlohmann::json to_json(std::span<const WindowScore> scores);

enum class RenderBackend { automatic, opencv, external };

struct RenderResult {
  std::filesystem::path output;
  long frames_written = 0;  // -1 when the external tool does not report it
  double duration_sec = 0;
  std::string backend;
};

/// Concatenates the plan's segments of `source` in chronological order.
/// `automatic` uses the external tool when it is on PATH and re-encodes
/// with OpenCV otherwise. Throws EmptyPlan, InvalidArgument (source does
/// not match plan.source_id), RenderToolFailure.
RenderResult render_highlight(const HighlightPlan& plan, const std::filesystem::path& source,
                              const std::filesystem::path& output,
                              RenderBackend backend = RenderBackend::automatic,
                              const std::string& tool = "ffmpeg");

/// Argument vector handed to the external tool (exact cut list).
std::vector<std::string> external_command(const HighlightPlan& plan,
                                          const std::filesystem::path& source,
                                          const std::filesystem::path& output,
                                          const std::string& tool = "ffmpeg");

/// True if `tool` resolves to an executable on PATH.
bool tool_available(const std::string& tool);

}  // namespace clipforge::highlighter
