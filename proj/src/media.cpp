#include "clipforge/media.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include <openssl/evp.h>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include "clipforge/error.hpp"

namespace clipforge {

void check_clip_contract(const ClipTensor& clip) {
  if (clip.frames != kSequenceLength || clip.height != kImageHeight ||
      clip.width != kImageWidth || clip.channels != kChannels) {
    throw Error(Errc::shape_mismatch, "clip shape must be (16, 64, 64, 3)");
  }
  if (clip.data.size() != kClipElements) {
    throw Error(Errc::shape_mismatch, "clip payload has " + std::to_string(clip.data.size()) +
                                          " values, expected " + std::to_string(kClipElements));
  }
  for (float v : clip.data) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw Error(Errc::invalid_argument, "clip value outside [0, 1]");
    }
  }
}

}  // namespace clipforge

namespace clipforge::media {

namespace {

constexpr double kIndexEpsilon = 1e-9;

cv::VideoCapture open_capture(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(Errc::missing_file, path.string());
  }
  cv::VideoCapture cap;
  try {
    cap.open(path.string(), cv::CAP_FFMPEG);
  } catch (const cv::Exception& e) {
    throw Error(Errc::decode_error, path.string() + ": " + e.what());
  }
  if (!cap.isOpened()) {
    throw Error(Errc::decode_error, "cannot open " + path.string() + " as video");
  }
  return cap;
}

std::vector<float> to_frame(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return resize_normalize(rgb);
}

}  // namespace

std::string content_id(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::missing_file, path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

long resampled_frame_count(long source_frames, double source_fps) {
  if (source_frames <= 0) return 0;
  const auto n = static_cast<long>(
      std::floor(static_cast<double>(source_frames) * kProcessingFps / source_fps + kIndexEpsilon));
  return std::max(n, 1L);
}

long source_index_for(long k, double source_fps, long source_frames) {
  const auto idx = static_cast<long>(
      std::floor(static_cast<double>(k) * source_fps / kProcessingFps + kIndexEpsilon));
  return std::clamp(idx, 0L, source_frames - 1);
}

VideoMeta probe_video(const std::filesystem::path& path) {
  auto cap = open_capture(path);
  VideoMeta meta;
  meta.path = path;
  meta.source_fps = cap.get(cv::CAP_PROP_FPS);
  meta.width = static_cast<int>(cap.get(cv::CAP_PROP_FRAME_WIDTH));
  meta.height = static_cast<int>(cap.get(cv::CAP_PROP_FRAME_HEIGHT));
  if (!(meta.source_fps > 0.0) || !std::isfinite(meta.source_fps)) {
    throw Error(Errc::decode_error, path.string() + ": stream reports no frame rate");
  }
  // Container frame counts are estimates for some formats; count by grabbing.
  long count = 0;
  while (cap.grab()) ++count;
  if (count == 0) throw Error(Errc::empty_video, path.string());
  meta.source_frame_count = count;
  meta.frame_count = resampled_frame_count(count, meta.source_fps);
  meta.duration_sec = static_cast<double>(meta.frame_count) / meta.fps;
  meta.source_id = content_id(path);
  return meta;
}

std::vector<float> resize_normalize(const cv::Mat& rgb) {
  if (rgb.empty()) throw Error(Errc::invalid_argument, "empty frame");
  if (rgb.channels() != 3) {
    throw Error(Errc::bad_channel_count,
                "expected 3 channels, got " + std::to_string(rgb.channels()));
  }
  if (rgb.depth() != CV_8U) throw Error(Errc::invalid_argument, "frame must be 8-bit");
  cv::Mat resized;
  if (rgb.rows == kImageHeight && rgb.cols == kImageWidth) {
    resized = rgb;
  } else {
    cv::resize(rgb, resized, cv::Size(kImageWidth, kImageHeight), 0, 0, cv::INTER_LINEAR);
  }
  std::vector<float> out(kFrameElements);
  cv::Mat dst(kImageHeight, kImageWidth, CV_32FC3, out.data());
  resized.convertTo(dst, CV_32FC3, 1.0 / 255.0);
  return out;
}

std::vector<long> uniform_indices(long frame_count, int n) {
  if (frame_count <= 0) throw Error(Errc::empty_video, "no frames to sample");
  if (n < 1) throw Error(Errc::invalid_argument, "sample count must be positive");
  const long skip = std::max(frame_count / n, 1L);
  std::vector<long> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[i] = std::min(i * skip, frame_count - 1);
  return idx;
}

std::vector<std::vector<float>> load_frames(const VideoMeta& video,
                                            std::span<const long> indices) {
  if (video.frame_count <= 0) throw Error(Errc::empty_video, video.path.string());
  // Map each needed source frame to the output slots that use it.
  std::map<long, std::vector<std::size_t>> wanted;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= video.frame_count) {
      throw Error(Errc::invalid_argument, "frame index out of range");
    }
    wanted[source_index_for(indices[i], video.source_fps, video.source_frame_count)].push_back(i);
  }
  std::vector<std::vector<float>> out(indices.size());
  if (wanted.empty()) return out;

  auto cap = open_capture(video.path);
  cv::Mat bgr;
  long src = 0;
  auto next = wanted.begin();
  while (next != wanted.end()) {
    if (!cap.grab()) {
      throw Error(Errc::decode_error, video.path.string() + ": stream ended at frame " +
                                          std::to_string(src));
    }
    if (src == next->first) {
      cap.retrieve(bgr);
      auto frame = to_frame(bgr);
      for (std::size_t slot : next->second) out[slot] = frame;
      ++next;
    }
    ++src;
  }
  return out;
}

std::vector<std::vector<float>> load_all_frames(const VideoMeta& video) {
  std::vector<long> idx(static_cast<std::size_t>(video.frame_count));
  for (long i = 0; i < video.frame_count; ++i) idx[i] = i;
  return load_frames(video, idx);
}

ClipTensor sample_clip_uniform(const VideoMeta& video, int n) {
  const auto idx = uniform_indices(video.frame_count, n);
  const auto frames = load_frames(video, idx);
  ClipTensor clip = ClipTensor::zeros(n);
  for (int t = 0; t < n; ++t) std::copy(frames[t].begin(), frames[t].end(), clip.frame(t));
  clip.origin = {video.source_id, idx.front(), idx.back()};
  return clip;
}

std::vector<WindowSpec> sliding_windows(long frame_count, int stride_frames) {
  if (stride_frames < 1) throw Error(Errc::invalid_argument, "stride must be >= 1");
  if (frame_count <= 0) throw Error(Errc::empty_video, "no frames to window");
  auto make = [](long start, long end) {
    return WindowSpec{start, end, static_cast<double>(start) / kProcessingFps,
                      static_cast<double>(end) / kProcessingFps};
  };
  std::vector<WindowSpec> windows;
  if (frame_count < kSequenceLength) {
    windows.push_back(make(0, frame_count));
    return windows;
  }
  for (long s = 0; s + kSequenceLength <= frame_count; s += stride_frames) {
    windows.push_back(make(s, s + kSequenceLength));
  }
  return windows;
}

std::vector<WindowSpec> sliding_windows(const VideoMeta& video, int stride_frames) {
  return sliding_windows(video.frame_count, stride_frames);
}

ClipTensor clip_for_window(std::span<const std::vector<float>> frames, const WindowSpec& window,
                           const std::string& source_id) {
  if (frames.empty()) throw Error(Errc::empty_video, "no frames");
  const long last = static_cast<long>(frames.size()) - 1;
  ClipTensor clip = ClipTensor::zeros();
  for (int t = 0; t < kSequenceLength; ++t) {
    const long idx = std::min(window.start_frame + t, last);
    const auto& f = frames[static_cast<std::size_t>(idx)];
    if (f.size() != kFrameElements) throw Error(Errc::shape_mismatch, "frame is not 64x64x3");
    std::copy(f.begin(), f.end(), clip.frame(t));
  }
  clip.origin = {source_id, window.start_frame,
                 std::min(window.start_frame + kSequenceLength - 1, last)};
  return clip;
}

}  // namespace clipforge::media

namespace clipforge::media {

int fourcc_for(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".mkv") return cv::VideoWriter::fourcc('F', 'F', 'V', '1');
  if (ext == ".avi") return cv::VideoWriter::fourcc('M', 'J', 'P', 'G');
  if (ext == ".mp4") return cv::VideoWriter::fourcc('m', 'p', '4', 'v');
  throw Error(Errc::invalid_argument, "no encoder for extension '" + ext + "' (use .mkv, .avi or .mp4)");
}

struct VideoSink::Impl {
  cv::VideoWriter writer;
  cv::Size size;
  cv::Mat bgr;
};

VideoSink::VideoSink(const std::filesystem::path& path, double fps, int width, int height)
    : impl_(std::make_unique<Impl>()) {
  impl_->size = cv::Size(width, height);
  const int fourcc = fourcc_for(path);
  if (!impl_->writer.open(path.string(), cv::CAP_FFMPEG, fourcc, fps, impl_->size, true)) {
    throw Error(Errc::io_error, "cannot open video writer for " + path.string());
  }
}

VideoSink::~VideoSink() {
  try {
    close();
  } catch (...) {
  }
}

void VideoSink::write(const cv::Mat& rgb) {
  if (rgb.type() != CV_8UC3 || rgb.size() != impl_->size) {
    throw Error(Errc::shape_mismatch, "frame does not match the sink size/type");
  }
  cv::cvtColor(rgb, impl_->bgr, cv::COLOR_RGB2BGR);
  impl_->writer.write(impl_->bgr);
  ++frames_;
}

void VideoSink::write_bgr(const cv::Mat& bgr) {
  if (bgr.type() != CV_8UC3 || bgr.size() != impl_->size) {
    throw Error(Errc::shape_mismatch, "frame does not match the sink size/type");
  }
  impl_->writer.write(bgr);
  ++frames_;
}

void VideoSink::close() {
  if (impl_ && impl_->writer.isOpened()) impl_->writer.release();
}

}  // namespace clipforge::media

namespace clipforge::media {

struct FrameStream::Impl {
  VideoMeta video;
  cv::VideoCapture cap;
  long decoded = -1;  // source index held in `current`
  std::vector<float> current;
};

FrameStream::FrameStream(const VideoMeta& video) : impl_(std::make_unique<Impl>()) {
  if (video.frame_count <= 0) throw Error(Errc::empty_video, video.path.string());
  impl_->video = video;
  impl_->cap = open_capture(video.path);
}

FrameStream::~FrameStream() = default;

bool FrameStream::next(std::vector<float>& frame) {
  auto& d = *impl_;
  if (next_index_ >= d.video.frame_count) return false;
  const long target = source_index_for(next_index_, d.video.source_fps, d.video.source_frame_count);
  if (target != d.decoded) {
    cv::Mat bgr;
    while (d.decoded < target) {
      if (!d.cap.grab()) {
        throw Error(Errc::decode_error, d.video.path.string() + ": stream ended at frame " +
                                            std::to_string(d.decoded + 1));
      }
      ++d.decoded;
    }
    d.cap.retrieve(bgr);
    d.current = to_frame(bgr);
  }
  frame = d.current;
  ++next_index_;
  return true;
}

}  // namespace clipforge::media
