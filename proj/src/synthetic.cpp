#include "clipforge/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <opencv2/imgproc.hpp>

#include "clipforge/dataset.hpp"
#include "clipforge/error.hpp"
#include "clipforge/media.hpp"
#include "clipforge/rng.hpp"

namespace clipforge::synthetic {

using nlohmann::json;

namespace {

constexpr double kBackground = 20.0;
constexpr double kCalmRate = 0.3;  // rad per frame

struct Block {
  double color[3];
  int size;
  double anchor[2];  // y, x
  double phase[2];
};

std::vector<Block> draw_blocks(const SynthSpec& s, Rng& rng) {
  std::vector<Block> blocks(static_cast<std::size_t>(s.blocks));
  for (auto& b : blocks) {
    for (auto& c : b.color) c = static_cast<double>(150 + rng.below(106));
    b.size = static_cast<int>(36 * s.frame_size / 96 + rng.below(24 * s.frame_size / 96));
    for (auto& a : b.anchor) a = rng.uniform(0.0, static_cast<double>(s.frame_size - b.size));
    for (auto& p : b.phase) p = rng.uniform(0.0, 6.28);
  }
  return blocks;
}

// Position range for violent jumps; blocks may leave the frame partly.
std::pair<double, double> block_range(const SynthSpec& s, const Block& b) {
  const double mid = (s.frame_size - b.size) / 2.0;
  const double half = s.violent_motion_amplitude + 0.3 * b.size;
  return {mid - half, mid + half};
}

using Positions = std::vector<std::array<double, 2>>;

Positions calm_positions(const SynthSpec& s, const std::vector<Block>& blocks, int t) {
  Positions p(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (int d = 0; d < 2; ++d) {
      p[i][d] = blocks[i].anchor[d] +
                s.calm_motion_amplitude * std::sin(kCalmRate * t + blocks[i].phase[d]);
    }
  }
  return p;
}

Positions violent_positions(const SynthSpec& s, const std::vector<Block>& blocks, Rng& rng) {
  Positions p(blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto [lo, hi] = block_range(s, blocks[i]);
    for (int d = 0; d < 2; ++d) p[i][d] = rng.uniform(lo, hi);
  }
  return p;
}

// Average of blur_subframes renders interpolated from `prev` to `cur`.
cv::Mat render_frame(const SynthSpec& s, const std::vector<Block>& blocks, const Positions& prev,
                     const Positions& cur) {
  const int S = s.frame_size, K = s.blur_subframes;
  cv::Mat acc(S, S, CV_64FC3, cv::Scalar::all(0));
  cv::Mat sub(S, S, CV_64FC3);
  for (int k = 0; k < K; ++k) {
    sub.setTo(cv::Scalar::all(kBackground));
    const double w = static_cast<double>(k + 1) / K;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const int y = static_cast<int>(prev[i][0] + (cur[i][0] - prev[i][0]) * w);
      const int x = static_cast<int>(prev[i][1] + (cur[i][1] - prev[i][1]) * w);
      const int y0 = std::max(y, 0), x0 = std::max(x, 0);
      const int y1 = std::min(y + blocks[i].size, S), x1 = std::min(x + blocks[i].size, S);
      if (y1 > y0 && x1 > x0) {
        sub(cv::Rect(x0, y0, x1 - x0, y1 - y0))
            .setTo(cv::Scalar(blocks[i].color[0], blocks[i].color[1], blocks[i].color[2]));
      }
    }
    acc += sub;
  }
  cv::Mat out;
  acc.convertTo(out, CV_8UC3, 1.0 / K);  // saturate_cast rounds to nearest
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void SynthSpec::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::invalid_argument, what); };
  if (n_per_class < 1) fail("n_per_class must be >= 1");
  if (!(duration_sec > 0)) fail("duration_sec must be > 0");
  if (!(calm_motion_amplitude > 0) || !(violent_motion_amplitude > 0)) {
    fail("motion amplitudes must be positive");
  }
  if (!(violent_motion_amplitude > calm_motion_amplitude)) {
    fail("violent_motion_amplitude must exceed calm_motion_amplitude");
  }
  if (frame_size < 32) fail("frame_size must be >= 32");
  if (!(fps > 0)) fail("fps must be > 0");
  if (blocks < 1) fail("blocks must be >= 1");
  if (blur_subframes < 1) fail("blur_subframes must be >= 1");
  media::fourcc_for("x" + extension);
  if (frame_count() < 2) fail("clips need at least two frames");
}

int SynthSpec::frame_count() const {
  return static_cast<int>(std::floor(duration_sec * fps + 1e-9));
}

json to_json(const SynthSpec& s) {
  return json{{"n_per_class", s.n_per_class},
              {"duration_sec", s.duration_sec},
              {"seed", s.seed},
              {"violent_motion_amplitude", s.violent_motion_amplitude},
              {"calm_motion_amplitude", s.calm_motion_amplitude},
              {"frame_size", s.frame_size},
              {"fps", s.fps},
              {"blocks", s.blocks},
              {"blur_subframes", s.blur_subframes},
              {"extension", s.extension}};
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  try {
    s.n_per_class = j.value("n_per_class", s.n_per_class);
    s.duration_sec = j.value("duration_sec", s.duration_sec);
    s.seed = j.value("seed", s.seed);
    s.violent_motion_amplitude = j.value("violent_motion_amplitude", s.violent_motion_amplitude);
    s.calm_motion_amplitude = j.value("calm_motion_amplitude", s.calm_motion_amplitude);
    s.frame_size = j.value("frame_size", s.frame_size);
    s.fps = j.value("fps", s.fps);
    s.blocks = j.value("blocks", s.blocks);
    s.blur_subframes = j.value("blur_subframes", s.blur_subframes);
    s.extension = j.value("extension", s.extension);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::uint64_t clip_seed(std::uint64_t seed, int label, int index) {
  return splitmix64(splitmix64(seed) ^ (static_cast<std::uint64_t>(index) << 1 |
                                        static_cast<std::uint64_t>(label & 1)));
}

std::vector<cv::Mat> render_clip(const SynthSpec& spec, bool violent, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const auto blocks = draw_blocks(spec, rng);
  Positions prev = calm_positions(spec, blocks, 0);
  std::vector<cv::Mat> frames;
  for (int t = 0; t < spec.frame_count(); ++t) {
    Positions cur = violent ? violent_positions(spec, blocks, rng) : calm_positions(spec, blocks, t);
    frames.push_back(render_frame(spec, blocks, prev, cur));
    prev = std::move(cur);
  }
  return frames;
}

namespace {

std::vector<Interval> checked_intervals(const SynthSpec& spec, std::span<const Interval> in) {
  std::vector<Interval> v(in.begin(), in.end());
  for (const auto& iv : v) {
    if (!(iv.start_sec >= 0 && iv.end_sec > iv.start_sec && iv.end_sec <= spec.duration_sec)) {
      throw Error(Errc::invalid_argument, "interval must satisfy 0 <= start < end <= duration");
    }
  }
  std::sort(v.begin(), v.end(),
            [](const Interval& a, const Interval& b) { return a.start_sec < b.start_sec; });
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i].start_sec < v[i - 1].end_sec) {
      throw Error(Errc::overlapping_intervals, "violent intervals overlap");
    }
  }
  return v;
}

}  // namespace

std::vector<cv::Mat> render_composite(const SynthSpec& spec, std::span<const Interval> violent) {
  spec.validate();
  const auto intervals = checked_intervals(spec, violent);
  Rng rng(clip_seed(spec.seed, 0, -1));
  const auto blocks = draw_blocks(spec, rng);
  Positions prev = calm_positions(spec, blocks, 0);
  std::vector<cv::Mat> frames;
  for (int t = 0; t < spec.frame_count(); ++t) {
    const double sec = t / spec.fps;
    const bool v = std::any_of(intervals.begin(), intervals.end(), [&](const Interval& iv) {
      return sec >= iv.start_sec && sec < iv.end_sec;
    });
    Positions cur = v ? violent_positions(spec, blocks, rng) : calm_positions(spec, blocks, t);
    frames.push_back(render_frame(spec, blocks, prev, cur));
    prev = std::move(cur);
  }
  return frames;
}

double motion_statistic(std::span<const cv::Mat> frames) {
  if (frames.size() < 2) return 0.0;
  double total = 0;
  cv::Mat diff;
  for (std::size_t t = 1; t < frames.size(); ++t) {
    cv::absdiff(frames[t], frames[t - 1], diff);
    const auto s = cv::sum(diff);
    total += (s[0] + s[1] + s[2]) / static_cast<double>(diff.total() * diff.channels());
  }
  return total / static_cast<double>(frames.size() - 1);
}

void write_frames(std::span<const cv::Mat> frames, double fps, const std::filesystem::path& path) {
  if (frames.empty()) throw Error(Errc::invalid_argument, "no frames to write");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  media::VideoSink sink(path, fps, frames.front().cols, frames.front().rows);
  for (const auto& f : frames) sink.write(f);
  sink.close();
}

std::vector<GeneratedClip> generate(const SynthSpec& spec, const std::filesystem::path& root) {
  spec.validate();
  std::vector<GeneratedClip> out;
  for (int label = 0; label < dataset::kNumClasses; ++label) {
    const auto dir = root / std::string(dataset::class_name(label));
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(Errc::io_error, "cannot create " + dir.string() + ": " + ec.message());
    const char* prefix = label == dataset::kPositiveClass ? "V" : "NV";
    for (int i = 0; i < spec.n_per_class; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%04d%s", prefix, i, spec.extension.c_str());
      const auto frames = render_clip(spec, label == dataset::kPositiveClass, clip_seed(spec.seed, label, i));
      write_frames(frames, spec.fps, dir / name);
      out.push_back({dir / name, label, motion_statistic(frames)});
    }
  }
  return out;
}

CompositeResult generate_composite(const SynthSpec& spec, std::span<const Interval> violent,
                                   const std::filesystem::path& video_path) {
  const auto frames = render_composite(spec, violent);
  write_frames(frames, spec.fps, video_path);
  CompositeResult r{video_path, video_path.parent_path() / (video_path.stem().string() + ".truth.json")};
  json intervals = json::array();
  for (const auto& iv : checked_intervals(spec, violent)) {
    intervals.push_back({iv.start_sec, iv.end_sec});
  }
  std::ofstream out(r.truth);
  if (!out) throw Error(Errc::io_error, "cannot write " + r.truth.string());
  out << json{{"duration_sec", spec.duration_sec},
              {"fps", spec.fps},
              {"violent_intervals", intervals},
              {"spec", to_json(spec)}}
             .dump(2)
      << '\n';
  return r;
}

std::vector<Interval> read_truth(const std::filesystem::path& truth_path) {
  std::ifstream in(truth_path);
  if (!in) throw Error(Errc::missing_file, truth_path.string());
  std::vector<Interval> out;
  try {
    const auto j = json::parse(in);
    for (const auto& iv : j.at("violent_intervals")) {
      out.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, "ground truth " + truth_path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace clipforge::synthetic
