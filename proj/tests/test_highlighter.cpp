#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <opencv2/core.hpp>

#include "clipforge/error.hpp"
#include "clipforge/highlighter.hpp"
#include "clipforge/media.hpp"
#include "clipforge/rng.hpp"
#include "clipforge/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace clipforge;
using namespace clipforge::highlighter;

namespace {

std::vector<WindowScore> random_scores(std::mt19937_64& gen, long* frames_out = nullptr) {
  std::uniform_int_distribution<long> frames_d(1, 300);
  std::uniform_int_distribution<int> stride_d(1, 24);
  std::uniform_int_distribution<int> grid(0, 10);
  std::uniform_real_distribution<double> u(0, 1);
  const long frames = frames_d(gen);
  if (frames_out) *frames_out = frames;
  std::vector<WindowScore> out;
  for (const auto& w : media::sliding_windows(frames, stride_d(gen))) {
    // Half the scores on a 0.1 grid so that ties with the threshold happen.
    out.push_back({w, u(gen) < 0.5 ? grid(gen) / 10.0 : u(gen)});
  }
  return out;
}

WindowScore window(double start_sec, double end_sec, double p) {
  const long a = std::lround(start_sec * 16), b = std::lround(end_sec * 16);
  return {{a, b, a / 16.0, b / 16.0}, p};
}

void write_video(const std::filesystem::path& path, int frames, int size = 48) {
  std::vector<cv::Mat> v;
  for (int i = 0; i < frames; ++i) {
    v.emplace_back(size, size, CV_8UC3, cv::Scalar((i * 7) % 256, (i * 3) % 256, 100));
  }
  synthetic::write_frames(v, 16.0, path);
}

}  // namespace

TEST_CASE("all scores below threshold give no segments") {
  std::vector<WindowScore> s{window(0, 1, 0.2), window(0.5, 1.5, 0.49)};
  CHECK(segments_from_scores(s).empty());
}

TEST_CASE("overlapping violent windows union into one segment") {
  std::vector<WindowScore> s{window(0, 1, 0.9), window(0.5, 1.5, 0.7)};
  const auto seg = segments_from_scores(s);
  REQUIRE(seg.size() == 1);
  CHECK(seg[0].start_sec == 0.0);
  CHECK(seg[0].end_sec == 1.5);
  CHECK(seg[0].peak_score == 0.9);
  CHECK(seg[0].mean_score == doctest::Approx(0.8));
}

TEST_CASE("gap bridging and minimum length") {
  // Two 1 s windows separated by exactly 1 s merge; 1.0625 s does not.
  std::vector<WindowScore> merged{window(0, 1, 0.9), window(2, 3, 0.9)};
  CHECK(segments_from_scores(merged).size() == 1);
  std::vector<WindowScore> apart{window(0, 1, 0.9), window(2.0625, 3.0625, 0.9)};
  CHECK(segments_from_scores(apart).size() == 2);
  std::vector<WindowScore> short_one{window(0, 0.5, 0.9)};
  CHECK(segments_from_scores(short_one).empty());
  CHECK(segments_from_scores(short_one, 0.5, 1.0, 0.5).size() == 1);
}

TEST_CASE("threshold is inclusive") {
  std::vector<WindowScore> s{window(0, 1, 0.5)};
  CHECK(segments_from_scores(s, 0.5).size() == 1);
  CHECK(segments_from_scores(s, 0.5000001).empty());
}

TEST_CASE("segments match the frame-set oracle on random sequences") {
  std::mt19937_64 gen(11);
  std::uniform_int_distribution<int> grid(0, 10);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto scores = random_scores(gen);
    const double thr = grid(gen) / 10.0;
    // Gaps and lengths both on and off the 1/16 s frame grid.
    const double gap = u(gen) < 0.5 ? std::floor(u(gen) * 40) / 16.0 : u(gen) * 2.5;
    const double len = u(gen) < 0.5 ? std::floor(u(gen) * 40) / 16.0 : u(gen) * 2.5;
    const auto got = segments_from_scores(scores, thr, gap, len);
    const auto want = oracle::segments(scores, thr, gap, len);
    REQUIRE(got == want);
  }
}

TEST_CASE("raising the threshold only shrinks detections") {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 500; ++trial) {
    const auto scores = random_scores(gen);
    double prev_total = std::numeric_limits<double>::infinity();
    std::vector<Segment> prev;
    for (int k = 0; k <= 11; ++k) {
      const double thr = k / 10.0;
      const auto seg = segments_from_scores(scores, thr, 1.0, 1.0);
      double total = 0;
      for (const auto& s : seg) {
        total += s.duration();
        bool inside = prev.empty() && k == 0;
        for (const auto& p : prev) inside |= p.start_sec <= s.start_sec && s.end_sec <= p.end_sec;
        CHECK(inside);
      }
      CHECK(total <= prev_total);
      prev_total = total;
      prev = seg;
    }
  }
}

TEST_CASE("raising min_len never adds segments") {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 300; ++trial) {
    const auto scores = random_scores(gen);
    std::size_t prev = SIZE_MAX;
    for (double len = 0; len <= 4.0; len += 0.25) {
      const auto n = segments_from_scores(scores, 0.5, 1.0, len).size();
      CHECK(n <= prev);
      prev = n;
    }
  }
}

TEST_CASE("segment derivation is idempotent on its own output windows") {
  std::mt19937_64 gen(14);
  for (int trial = 0; trial < 300; ++trial) {
    const auto seg = segments_from_scores(random_scores(gen), 0.5, 1.0, 1.0);
    std::vector<WindowScore> again;
    for (const auto& s : seg) again.push_back(window(s.start_sec, s.end_sec, 1.0));
    const auto seg2 = segments_from_scores(again, 0.5, 1.0, 1.0);
    REQUIRE(seg2.size() == seg.size());
    for (std::size_t i = 0; i < seg.size(); ++i) {
      CHECK(seg2[i].start_sec == seg[i].start_sec);
      CHECK(seg2[i].end_sec == seg[i].end_sec);
    }
  }
}

TEST_CASE("plan json round trip on random plans") {
  std::mt19937_64 gen(21);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Segment> segs;
    double t = u(gen) * 3;
    const int n = static_cast<int>(u(gen) * 6);
    for (int i = 0; i < n; ++i) {
      const double a = t + u(gen) * 2, b = a + 0.0625 + u(gen) * 3;
      segs.push_back({a, b, u(gen), u(gen)});
      t = b;
    }
    HighlightParams p{u(gen), 1 + static_cast<int>(u(gen) * 16), u(gen) * 3, u(gen) * 3};
    const auto plan = make_plan("src" + std::to_string(trial), p, segs, "ck");
    CHECK(plan_from_json(to_json(plan)) == plan);
    CHECK(plan_from_json(nlohmann::json::parse(to_json(plan).dump())) == plan);
  }
}

TEST_CASE("plan export/import and rejection of bad plans") {
  testutil::TempDir dir("plan");
  const auto plan = make_plan("abc", {}, {{5, 7, 0.8, 0.9}, {1, 2, 0.6, 0.7}}, "ck");
  CHECK(plan.segments.front().start_sec == 1);  // chronological regardless of scores
  CHECK(plan.total_sec == 3);
  export_plan(plan, dir / "p.json");
  CHECK(import_plan(dir / "p.json") == plan);

  auto j = to_json(plan);
  j["segments"][1]["start_sec"] = 1.5;  // overlaps [1, 2)
  j["segments"][0] = {{"start_sec", 1}, {"end_sec", 2}, {"mean_score", 0.6}, {"peak_score", 0.7}};
  j["segments"][1] = {{"start_sec", 1.5}, {"end_sec", 7}, {"mean_score", 0.8}, {"peak_score", 0.9}};
  j["total_sec"] = 6.5;
  try {
    plan_from_json(j);
    FAIL("overlap accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::malformed_plan);
  }

  auto v = to_json(plan);
  v["schema_version"] = kPlanSchemaVersion + 1;
  try {
    plan_from_json(v);
    FAIL("future schema accepted");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::schema_version_mismatch);
  }
}

TEST_CASE("params json and validation") {
  HighlightParams p{0.7, 4, 0.5, 2.0};
  CHECK(params_from_json(to_json(p)) == p);
  CHECK(params_from_json(nlohmann::json::object()) == HighlightParams{});
  CHECK_THROWS_AS(params_from_json({{"threshold", 1.5}}), Error);
  CHECK_THROWS_AS(params_from_json({{"stride_frames", 0}}), Error);
  CHECK_THROWS_AS(params_from_json({{"max_gap_sec", -1}}), Error);
}

TEST_CASE("score_video window arithmetic, range and determinism") {
  testutil::TempDir dir("score");
  write_video(dir / "v.mkv", 64);
  const auto meta = media::probe_video(dir / "v.mkv");
  REQUIRE(meta.frame_count == 64);
  nn::ModelConfig cfg;
  Rng rng(3);
  const auto params = nn::init_params<float>(cfg, rng);
  const auto a = score_video(meta, cfg, params, 8);
  CHECK(a.size() == 7);
  for (const auto& s : a) {
    CHECK(s.p_violence >= 0.0);
    CHECK(s.p_violence <= 1.0);
  }
  CHECK(score_video(meta, cfg, params, 8) == a);
  // Streaming and in-memory scoring agree.
  const auto frames = media::load_all_frames(meta);
  const auto b = score_frames(frames, cfg, params, 8);
  REQUIRE(b.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i].window == a[i].window);
    CHECK(b[i].p_violence == doctest::Approx(a[i].p_violence).epsilon(1e-6));
  }
}

TEST_CASE("render: duration additivity with the OpenCV backend") {
  testutil::TempDir dir("render");
  write_video(dir / "src.mkv", 160);
  const auto id = media::content_id(dir / "src.mkv");
  const auto plan = make_plan(id, {}, {{6, 8, 0.9, 0.9}, {1, 3, 0.7, 0.8}}, "");
  const auto r = render_highlight(plan, dir / "src.mkv", dir / "out.mkv", RenderBackend::opencv);
  CHECK(r.backend == "opencv");
  const auto out = media::probe_video(dir / "out.mkv");
  CHECK(std::abs(out.frame_count - 64) <= 4);
  CHECK(std::abs(r.frames_written - 64) <= 4);
}

TEST_CASE("render: errors") {
  testutil::TempDir dir("render_err");
  write_video(dir / "src.mkv", 32);
  const auto id = media::content_id(dir / "src.mkv");
  try {
    render_highlight(make_plan(id, {}, {}, ""), dir / "src.mkv", dir / "o.mkv");
    FAIL("empty plan rendered");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::empty_plan);
  }
  const auto plan = make_plan(id, {}, {{0, 1, 1, 1}}, "");
  CHECK_THROWS_AS(render_highlight(plan, dir / "missing.mkv", dir / "o.mkv"), Error);
  const auto other = make_plan("not-this-video", {}, {{0, 1, 1, 1}}, "");
  CHECK_THROWS_AS(render_highlight(other, dir / "src.mkv", dir / "o.mkv"), Error);

  // An external tool that fails: its exit status and stderr surface.
  const auto tool = dir / "fake-tool";
  {
    std::ofstream f(tool);
    f << "#!/bin/sh\necho 'cannot open input' >&2\nexit 3\n";
  }
  std::filesystem::permissions(tool, std::filesystem::perms::owner_all);
  try {
    render_highlight(plan, dir / "src.mkv", dir / "o.mkv", RenderBackend::external, tool.string());
    FAIL("failing tool not reported");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::render_tool_failure);
    CHECK(std::string(e.what()).find("cannot open input") != std::string::npos);
  }
}

TEST_CASE("external command lists segments in chronological order") {
  const auto plan = make_plan("x", {}, {{4, 5, 0.9, 0.9}, {1, 2, 0.6, 0.6}}, "");
  const auto cmd = external_command(plan, "in.mkv", "out.mkv", "ffmpeg");
  std::string all;
  for (const auto& a : cmd) all += a + " ";
  const auto first = all.find("trim=start=1");
  const auto second = all.find("trim=start=4");
  REQUIRE(first != std::string::npos);
  REQUIRE(second != std::string::npos);
  CHECK(first < second);
  CHECK(cmd.back() == "out.mkv");
}
