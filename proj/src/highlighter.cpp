#include "clipforge/highlighter.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <fstream>
#include <sstream>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <opencv2/videoio.hpp>

#include "clipforge/error.hpp"

namespace clipforge::highlighter {

using nlohmann::json;

namespace {
constexpr double kTol = 1e-9;
}

void HighlightParams::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::invalid_argument, what); };
  if (!(threshold >= 0.0 && threshold <= 1.0)) fail("threshold must be in [0, 1]");
  if (stride_frames < 1) fail("stride_frames must be >= 1");
  if (!(max_gap_sec >= 0.0)) fail("max_gap_sec must be >= 0");
  if (!(min_len_sec >= 0.0)) fail("min_len_sec must be >= 0");
}

json to_json(const HighlightParams& p) {
  return json{{"threshold", p.threshold},
              {"stride_frames", p.stride_frames},
              {"max_gap_sec", p.max_gap_sec},
              {"min_len_sec", p.min_len_sec}};
}

HighlightParams params_from_json(const json& j) {
  HighlightParams p;
  if (j.is_null()) return p;
  try {
    p.threshold = j.value("threshold", p.threshold);
    p.stride_frames = j.value("stride_frames", p.stride_frames);
    p.max_gap_sec = j.value("max_gap_sec", p.max_gap_sec);
    p.min_len_sec = j.value("min_len_sec", p.min_len_sec);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("highlight params: ") + e.what());
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Scoring

namespace {

class WindowScorer {
 public:
  WindowScorer(const nn::ModelConfig& model, const nn::ModelParams& params)
      : model_(model), params_(params) {
    nn::check_params(model, params);
    if (model.seq_len != kSequenceLength || model.image_h != kImageHeight ||
        model.image_w != kImageWidth || model.channels != kChannels) {
      throw Error(Errc::shape_mismatch, "scoring needs a model with the standard clip input");
    }
  }

  void add(const media::WindowSpec& w, ClipTensor clip) {
    pending_.push_back(w);
    batch_.push_back(std::move(clip));
    if (batch_.size() == kBatch) flush();
  }

  std::vector<WindowScore> finish() {
    flush();
    return std::move(out_);
  }

 private:
  static constexpr std::size_t kBatch = 16;

  void flush() {
    if (batch_.empty()) return;
    Rng unused(0);
    const auto probs = nn::model_forward<float>(batch_, params_, model_, nn::Mode::eval, unused);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      out_.push_back({pending_[i], static_cast<double>(probs[i][1])});
    }
    batch_.clear();
    pending_.clear();
  }

  const nn::ModelConfig& model_;
  const nn::ModelParams& params_;
  std::vector<ClipTensor> batch_;
  std::vector<media::WindowSpec> pending_;
  std::vector<WindowScore> out_;
};

}  // namespace

std::vector<WindowScore> score_frames(std::span<const std::vector<float>> frames,
                                      const nn::ModelConfig& model, const nn::ModelParams& params,
                                      int stride_frames) {
  const auto windows = media::sliding_windows(static_cast<long>(frames.size()), stride_frames);
  WindowScorer scorer(model, params);
  for (const auto& w : windows) scorer.add(w, media::clip_for_window(frames, w, ""));
  return scorer.finish();
}

std::vector<WindowScore> score_video(const media::VideoMeta& video, const nn::ModelConfig& model,
                                     const nn::ModelParams& params, int stride_frames) {
  const auto windows = media::sliding_windows(video, stride_frames);
  WindowScorer scorer(model, params);
  media::FrameStream stream(video);
  std::deque<std::vector<float>> buffer;  // frames [base, base + size)
  long base = 0;
  std::vector<float> frame;
  for (const auto& w : windows) {
    while (!buffer.empty() && base < w.start_frame) {
      buffer.pop_front();
      ++base;
    }
    while (base + static_cast<long>(buffer.size()) < w.end_frame && stream.next(frame)) {
      buffer.push_back(frame);
    }
    ClipTensor clip = ClipTensor::zeros();
    for (int t = 0; t < kSequenceLength; ++t) {
      const auto idx = std::min<std::size_t>(static_cast<std::size_t>(t), buffer.size() - 1);
      std::copy(buffer[idx].begin(), buffer[idx].end(), clip.frame(t));
    }
    clip.origin = {video.source_id, w.start_frame, w.end_frame - 1};
    scorer.add(w, std::move(clip));
  }
  return scorer.finish();
}

// ---------------------------------------------------------------------------
// Segments

std::vector<Segment> segments_from_scores(std::span<const WindowScore> scores, double threshold,
                                          double max_gap_sec, double min_len_sec) {
  struct Run {
    long start, end;
    double sum;
    int count;
    double peak;
  };
  const double gap_frames = max_gap_sec * kProcessingFps;
  const double min_frames = min_len_sec * kProcessingFps;
  std::vector<Run> runs;
  for (const auto& s : scores) {
    if (!(s.p_violence >= threshold)) continue;
    const long a = s.window.start_frame, b = s.window.end_frame;
    if (!runs.empty() && static_cast<double>(a - runs.back().end) <= gap_frames + kTol) {
      auto& r = runs.back();
      r.end = std::max(r.end, b);
      r.sum += s.p_violence;
      ++r.count;
      r.peak = std::max(r.peak, s.p_violence);
    } else {
      runs.push_back({a, b, s.p_violence, 1, s.p_violence});
    }
  }
  std::vector<Segment> out;
  for (const auto& r : runs) {
    if (static_cast<double>(r.end - r.start) + kTol < min_frames) continue;
    out.push_back({static_cast<double>(r.start) / kProcessingFps,
                   static_cast<double>(r.end) / kProcessingFps, r.sum / r.count, r.peak});
  }
  return out;
}

HighlightPlan make_plan(std::string source_id, const HighlightParams& params,
                        std::vector<Segment> segments, std::string checkpoint_id) {
  params.validate();
  std::sort(segments.begin(), segments.end(),
            [](const Segment& a, const Segment& b) { return a.start_sec < b.start_sec; });
  HighlightPlan plan{std::move(source_id), params, std::move(segments), 0.0,
                     std::move(checkpoint_id)};
  for (const auto& s : plan.segments) plan.total_sec += s.duration();
  return plan;
}

json to_json(const HighlightPlan& plan) {
  json segs = json::array();
  for (const auto& s : plan.segments) {
    segs.push_back({{"start_sec", s.start_sec},
                    {"end_sec", s.end_sec},
                    {"mean_score", s.mean_score},
                    {"peak_score", s.peak_score}});
  }
  return json{{"schema_version", kPlanSchemaVersion},
              {"source_id", plan.source_id},
              {"checkpoint_id", plan.checkpoint_id},
              {"params", to_json(plan.params)},
              {"segments", segs},
              {"total_sec", plan.total_sec}};
}

HighlightPlan plan_from_json(const json& j) {
  auto malformed = [](const std::string& what) { return Error(Errc::malformed_plan, what); };
  if (!j.is_object() || !j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
    throw malformed("missing integer schema_version");
  }
  const int version = j["schema_version"].get<int>();
  if (version != kPlanSchemaVersion) {
    throw Error(Errc::schema_version_mismatch,
                "plan schema " + std::to_string(version) + ", expected " +
                    std::to_string(kPlanSchemaVersion));
  }
  HighlightPlan plan;
  try {
    plan.source_id = j.at("source_id").get<std::string>();
    plan.checkpoint_id = j.value("checkpoint_id", std::string());
    plan.params = params_from_json(j.at("params"));
    for (const auto& s : j.at("segments")) {
      plan.segments.push_back({s.at("start_sec").get<double>(), s.at("end_sec").get<double>(),
                               s.at("mean_score").get<double>(), s.at("peak_score").get<double>()});
    }
    plan.total_sec = j.at("total_sec").get<double>();
  } catch (const json::exception& e) {
    throw malformed(e.what());
  } catch (const Error& e) {
    throw malformed(e.what());
  }
  double total = 0;
  for (std::size_t i = 0; i < plan.segments.size(); ++i) {
    const auto& s = plan.segments[i];
    if (!(s.end_sec > s.start_sec) || !(s.start_sec >= 0)) {
      throw malformed("segment " + std::to_string(i) + " is empty or negative");
    }
    if (i > 0 && s.start_sec < plan.segments[i - 1].end_sec) {
      throw malformed("segments overlap or are out of order at index " + std::to_string(i));
    }
    total += s.duration();
  }
  if (std::abs(total - plan.total_sec) > 1e-6) throw malformed("total_sec disagrees with segments");
  return plan;
}

void export_plan(const HighlightPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out || !(out << to_json(plan).dump(2) << '\n')) {
    throw Error(Errc::io_error, "cannot write " + path.string());
  }
}

HighlightPlan import_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(Errc::malformed_plan, e.what());
  }
  return plan_from_json(j);
}

json to_json(std::span<const WindowScore> scores) {
  json arr = json::array();
  for (const auto& s : scores) {
    arr.push_back({{"start_frame", s.window.start_frame},
                   {"end_frame", s.window.end_frame},
                   {"start_sec", s.window.start_sec},
                   {"end_sec", s.window.end_sec},
                   {"p_violence", s.p_violence}});
  }
  return arr;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

std::string fmt_sec(double v) {
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << v;
  return s.str();
}

RenderResult render_opencv(const HighlightPlan& plan, const std::filesystem::path& source,
                           const std::filesystem::path& output) {
  cv::VideoCapture cap(source.string(), cv::CAP_FFMPEG);
  if (!cap.isOpened()) throw Error(Errc::decode_error, "cannot open " + source.string());
  const double fps = cap.get(cv::CAP_PROP_FPS);
  const int w = static_cast<int>(cap.get(cv::CAP_PROP_FRAME_WIDTH));
  const int h = static_cast<int>(cap.get(cv::CAP_PROP_FRAME_HEIGHT));
  if (!(fps > 0)) throw Error(Errc::decode_error, source.string() + ": no frame rate");
  std::vector<std::pair<long, long>> cuts;  // source frame ranges [a, b)
  for (const auto& s : plan.segments) {
    cuts.emplace_back(std::lround(s.start_sec * fps), std::lround(s.end_sec * fps));
  }
  media::VideoSink sink(output, fps, w, h);
  cv::Mat bgr;
  std::size_t c = 0;
  for (long j = 0; c < cuts.size() && cap.read(bgr); ++j) {
    while (c < cuts.size() && j >= cuts[c].second) ++c;
    if (c < cuts.size() && j >= cuts[c].first) sink.write_bgr(bgr);
  }
  sink.close();
  return {output, sink.frames_written(), static_cast<double>(sink.frames_written()) / fps, "opencv"};
}

RenderResult render_external(const HighlightPlan& plan, const std::filesystem::path& source,
                             const std::filesystem::path& output, const std::string& tool) {
  const auto args = external_command(plan, source, output, tool);
  int err_pipe[2];
  if (pipe(err_pipe) != 0) throw Error(Errc::io_error, std::strerror(errno));
  const pid_t pid = fork();
  if (pid < 0) throw Error(Errc::io_error, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    dup2(err_pipe[1], STDERR_FILENO);
    const int devnull = open("/dev/null", O_RDWR);
    if (devnull >= 0) {
      dup2(devnull, STDIN_FILENO);
      dup2(devnull, STDOUT_FILENO);
    }
    close(err_pipe[0]);
    close(err_pipe[1]);
    std::vector<char*> argv;
    for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);
    execvp(argv[0], argv.data());
    const std::string msg = "exec " + args[0] + ": " + std::strerror(errno) + "\n";
    (void)!write(STDERR_FILENO, msg.data(), msg.size());
    _exit(127);
  }
  close(err_pipe[1]);
  std::string err;
  char buf[4096];
  ssize_t n;
  while ((n = read(err_pipe[0], buf, sizeof buf)) > 0) err.append(buf, static_cast<std::size_t>(n));
  close(err_pipe[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    throw Error(Errc::render_tool_failure,
                tool + " exited with status " + std::to_string(code) + ": " + err);
  }
  return {output, -1, plan.total_sec, "external"};
}

}  // namespace

std::vector<std::string> external_command(const HighlightPlan& plan,
                                          const std::filesystem::path& source,
                                          const std::filesystem::path& output,
                                          const std::string& tool) {
  std::string graph;
  for (std::size_t i = 0; i < plan.segments.size(); ++i) {
    const auto& s = plan.segments[i];
    graph += "[0:v]trim=start=" + fmt_sec(s.start_sec) + ":end=" + fmt_sec(s.end_sec) +
             ",setpts=PTS-STARTPTS[v" + std::to_string(i) + "];";
  }
  for (std::size_t i = 0; i < plan.segments.size(); ++i) graph += "[v" + std::to_string(i) + "]";
  graph += "concat=n=" + std::to_string(plan.segments.size()) + ":v=1:a=0[out]";
  return {tool, "-y", "-v", "error", "-i", source.string(), "-filter_complex", graph,
          "-map", "[out]", output.string()};
}

bool tool_available(const std::string& tool) {
  if (tool.empty()) return false;
  if (tool.find('/') != std::string::npos) return access(tool.c_str(), X_OK) == 0;
  const char* path = std::getenv("PATH");
  if (!path) return false;
  std::stringstream ss(path);
  std::string dir;
  while (std::getline(ss, dir, ':')) {
    if (dir.empty()) continue;
    const auto candidate = std::filesystem::path(dir) / tool;
    if (access(candidate.c_str(), X_OK) == 0) return true;
  }
  return false;
}

RenderResult render_highlight(const HighlightPlan& plan, const std::filesystem::path& source,
                              const std::filesystem::path& output, RenderBackend backend,
                              const std::string& tool) {
  if (plan.segments.empty()) throw Error(Errc::empty_plan, "plan has no segments");
  if (!std::filesystem::exists(source)) throw Error(Errc::missing_file, source.string());
  if (!plan.source_id.empty() && media::content_id(source) != plan.source_id) {
    throw Error(Errc::invalid_argument, source.string() + " is not the plan's source video");
  }
  if (output.has_parent_path()) std::filesystem::create_directories(output.parent_path());
  if (backend == RenderBackend::automatic) {
    backend = tool_available(tool) ? RenderBackend::external : RenderBackend::opencv;
  }
  return backend == RenderBackend::external ? render_external(plan, source, output, tool)
                                            : render_opencv(plan, source, output);
}

}  // namespace clipforge::highlighter
