#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

namespace clipforge::synthetic {

/// Scenes of flat colored blocks on a dark background. Calm clips drift
/// each block slowly around a fixed anchor; violent clips throw every block
/// to a fresh random position each frame, rendered with motion blur along
/// the jump. Only motion separates the classes.
struct SynthSpec {
  int n_per_class = 200;
  double duration_sec = 1.0;
  std::uint64_t seed = 0;
  // Half-width in pixels of the range violent block positions are drawn
  // from, on top of the block's own size (see block_range).
  double violent_motion_amplitude = 48.0;
  // Peak drift in pixels of calm blocks.
  double calm_motion_amplitude = 1.5;
  int frame_size = 96;
  double fps = 16.0;
  int blocks = 2;
  int blur_subframes = 8;
  std::string extension = ".mkv";

  void validate() const;
  int frame_count() const;
};

nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct Interval {
  double start_sec = 0;
  double end_sec = 0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Independent stream per clip so clips can be generated in any order.
std::uint64_t clip_seed(std::uint64_t seed, int label, int index);

/// RGB frames of one clip, before encoding.
std::vector<cv::Mat> render_clip(const SynthSpec& spec, bool violent, std::uint64_t seed);

/// RGB frames of a spec.duration_sec video that is calm except inside
/// `violent`. Throws OverlappingIntervals / InvalidArgument.
std::vector<cv::Mat> render_composite(const SynthSpec& spec, std::span<const Interval> violent);

/// Mean absolute difference between consecutive frames, over all pixels
/// and channels (0..255 scale).
double motion_statistic(std::span<const cv::Mat> frames);

void write_frames(std::span<const cv::Mat> frames, double fps, const std::filesystem::path& path);

struct GeneratedClip {
  std::filesystem::path path;
  int label = 0;
  double motion = 0;
};

/// Writes <root>/NonViolence/NV_0000<ext> ... and <root>/Violence/V_0000<ext> ...
std::vector<GeneratedClip> generate(const SynthSpec& spec, const std::filesystem::path& root);

struct CompositeResult {
  std::filesystem::path video;
  std::filesystem::path truth;  // JSON: duration_sec, fps, violent_intervals
};

/// Ground truth goes next to the video as <stem>.truth.json.
CompositeResult generate_composite(const SynthSpec& spec, std::span<const Interval> violent,
                                   const std::filesystem::path& video_path);

std::vector<Interval> read_truth(const std::filesystem::path& truth_path);

}  // namespace clipforge::synthetic
