#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace clipforge {

inline constexpr int kSequenceLength = 16;
inline constexpr int kImageHeight = 64;
inline constexpr int kImageWidth = 64;
inline constexpr int kChannels = 3;
inline constexpr double kProcessingFps = 16.0;

inline constexpr std::size_t kFrameElements =
    static_cast<std::size_t>(kImageHeight) * kImageWidth * kChannels;
inline constexpr std::size_t kClipElements = kFrameElements * kSequenceLength;

struct ClipOrigin {
  std::string source_id;
  // Frame indices in the 16 fps resampled stream.
  long first_frame = 0;
  long last_frame = 0;
};

/// A (frames, height, width, channels) block of normalized RGB values,
/// row-major with channels innermost. The model input contract is
/// (16, 64, 64, 3) with every value in [0, 1]; smaller shapes exist for
/// tests and are checked against the model config at use.
struct ClipTensor {
  int frames = kSequenceLength;
  int height = kImageHeight;
  int width = kImageWidth;
  int channels = kChannels;
  std::vector<float> data;
  ClipOrigin origin;

  std::size_t frame_size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  std::size_t element_count() const { return frame_size() * frames; }
  const float* frame(int t) const { return data.data() + frame_size() * t; }
  float* frame(int t) { return data.data() + frame_size() * t; }

  static ClipTensor zeros(int frames = kSequenceLength, int height = kImageHeight,
                          int width = kImageWidth, int channels = kChannels) {
    ClipTensor c;
    c.frames = frames;
    c.height = height;
    c.width = width;
    c.channels = channels;
    c.data.assign(c.element_count(), 0.0f);
    return c;
  }
};

/// Throws ShapeMismatch / InvalidArgument if the clip is not a standard
/// (16, 64, 64, 3) tensor with values in [0, 1].
void check_clip_contract(const ClipTensor& clip);

}  // namespace clipforge
