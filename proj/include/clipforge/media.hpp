#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "clipforge/clip.hpp"

namespace clipforge::media {

/// Metadata for a decodable video. frame_count and fps describe the stream
/// after resampling to the 16 fps processing rate; the container's native
/// values are kept alongside.
struct VideoMeta {
  std::string source_id;
  std::filesystem::path path;
  double fps = kProcessingFps;
  long frame_count = 0;
  int width = 0;
  int height = 0;
  double duration_sec = 0.0;
  double source_fps = 0.0;
  long source_frame_count = 0;
};

/// A 16-frame window in resampled frame index space. end_frame is
/// exclusive; it is start_frame + 16 except for videos shorter than one
/// window, where it is the video length (sampling pads the rest).
struct WindowSpec {
  long start_frame = 0;
  long end_frame = 0;
  double start_sec = 0.0;
  double end_sec = 0.0;

  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

/// SHA-256 of the file contents, lowercase hex.
std::string content_id(const std::filesystem::path& path);

VideoMeta probe_video(const std::filesystem::path& path);

/// Number of frames a stream of `source_frames` at `source_fps` has after
/// resampling to 16 fps.
long resampled_frame_count(long source_frames, double source_fps);

/// Source frame index shown at resampled index `k`.
long source_index_for(long k, double source_fps, long source_frames);

/// Bilinear resize of an 8-bit RGB image to 64x64, scaled to [0, 1].
std::vector<float> resize_normalize(const cv::Mat& rgb);

/// Resampled frame indices picked for one clip: i * max(frame_count / n, 1),
/// clamped to the last frame.
std::vector<long> uniform_indices(long frame_count, int n = kSequenceLength);

/// Decodes the listed resampled frames (any order, duplicates allowed) and
/// returns them resized and normalized, in the order requested.
std::vector<std::vector<float>> load_frames(const VideoMeta& video,
                                            std::span<const long> indices);

/// Every resampled frame, resized and normalized.
std::vector<std::vector<float>> load_all_frames(const VideoMeta& video);

ClipTensor sample_clip_uniform(const VideoMeta& video, int n = kSequenceLength);

std::vector<WindowSpec> sliding_windows(long frame_count, int stride_frames);
std::vector<WindowSpec> sliding_windows(const VideoMeta& video, int stride_frames);

/// Clip of the frames covered by `window`, repeating the final frame of
/// the video when the window runs past it.
ClipTensor clip_for_window(std::span<const std::vector<float>> frames,
                           const WindowSpec& window, const std::string& source_id);

/// Sequential reader over the resampled stream; memory stays at one frame
/// regardless of video length.
class FrameStream {
 public:
  explicit FrameStream(const VideoMeta& video);
  ~FrameStream();
  FrameStream(const FrameStream&) = delete;
  FrameStream& operator=(const FrameStream&) = delete;

  /// Next resampled frame, resized and normalized; false after the last.
  bool next(std::vector<float>& frame);
  long position() const { return next_index_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  long next_index_ = 0;
};

/// Encoder chosen from the file extension: .mkv → FFV1 (lossless),
/// .avi → MJPG, .mp4 → mp4v. Frames are 8-bit RGB of the opened size.
class VideoSink {
 public:
  VideoSink(const std::filesystem::path& path, double fps, int width, int height);
  ~VideoSink();
  VideoSink(const VideoSink&) = delete;
  VideoSink& operator=(const VideoSink&) = delete;

  void write(const cv::Mat& rgb);
  void write_bgr(const cv::Mat& bgr);
  /// Flushes the container. Called by the destructor if needed.
  void close();
  long frames_written() const { return frames_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  long frames_ = 0;
};

/// FourCC for the extension, or throws InvalidArgument.
int fourcc_for(const std::filesystem::path& path);

}  // namespace clipforge::media
