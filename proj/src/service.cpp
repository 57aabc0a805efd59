#include "clipforge/service.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <ctime>
#include <deque>
#include <fstream>
#include <random>
#include <thread>

#include <httplib.h>

#include <unistd.h>

#include "clipforge/dataset.hpp"
#include "clipforge/error.hpp"
#include "clipforge/media.hpp"
#include "clipforge/nn.hpp"

namespace clipforge::service {

namespace fs = std::filesystem;
using nlohmann::json;

void ServiceConfig::validate() const {
  if (port < 0 || port > 65535) throw Error(Errc::invalid_argument, "port out of range");
  if (workers < 1) throw Error(Errc::invalid_argument, "workers must be >= 1");
  if (max_upload_bytes == 0) throw Error(Errc::invalid_argument, "max_upload_bytes must be > 0");
  if (storage_dir.empty()) throw Error(Errc::invalid_argument, "storage_dir is empty");
}

json to_json(const ServiceConfig& c) {
  return json{{"host", c.host},
              {"port", c.port},
              {"checkpoint", c.checkpoint.string()},
              {"storage_dir", c.storage_dir.string()},
              {"max_upload_bytes", c.max_upload_bytes},
              {"workers", c.workers}};
}

ServiceConfig service_config_from_json(const json& j) {
  if (!j.is_object()) throw Error(Errc::invalid_argument, "service config must be an object");
  ServiceConfig c;
  try {
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.checkpoint = j.value("checkpoint", c.checkpoint.string());
    c.storage_dir = j.value("storage_dir", c.storage_dir.string());
    c.max_upload_bytes = j.value("max_upload_bytes", c.max_upload_bytes);
    c.workers = j.value("workers", c.workers);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("service config: ") + e.what());
  }
  return c;
}

std::optional<std::string> process_env(const std::string& name) {
  if (const char* v = std::getenv(name.c_str())) return std::string(v);
  return std::nullopt;
}

namespace {

long long parse_integer(const std::string& name, const std::string& text) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) {
    throw Error(Errc::invalid_argument, name + " is not an integer: '" + text + "'");
  }
  return v;
}

}  // namespace

void apply_env_overrides(ServiceConfig& c, const EnvLookup& env) {
  if (auto v = env("CLIPFORGE_HOST")) c.host = *v;
  if (auto v = env("CLIPFORGE_PORT")) c.port = static_cast<int>(parse_integer("CLIPFORGE_PORT", *v));
  if (auto v = env("CLIPFORGE_CHECKPOINT")) c.checkpoint = *v;
  if (auto v = env("CLIPFORGE_STORAGE_DIR")) c.storage_dir = *v;
  if (auto v = env("CLIPFORGE_MAX_UPLOAD_BYTES")) {
    const auto n = parse_integer("CLIPFORGE_MAX_UPLOAD_BYTES", *v);
    if (n <= 0) throw Error(Errc::invalid_argument, "CLIPFORGE_MAX_UPLOAD_BYTES must be > 0");
    c.max_upload_bytes = static_cast<std::size_t>(n);
  }
  if (auto v = env("CLIPFORGE_WORKERS")) {
    c.workers = static_cast<int>(parse_integer("CLIPFORGE_WORKERS", *v));
  }
}

ServiceConfig load_config(const std::optional<fs::path>& file, const EnvLookup& env) {
  ServiceConfig c;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw Error(Errc::missing_file, file->string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw Error(Errc::invalid_argument, file->string() + ": " + e.what());
    }
    c = service_config_from_json(j);
  }
  apply_env_overrides(c, env);
  c.validate();
  return c;
}

std::string_view to_string(JobKind k) { return k == JobKind::score ? "score" : "highlight"; }

std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "?";
}

JobKind parse_job_kind(std::string_view s) {
  if (s == "score") return JobKind::score;
  if (s == "highlight") return JobKind::highlight;
  throw Error(Errc::invalid_argument, "unknown job kind '" + std::string(s) + "'");
}

JobState parse_job_state(std::string_view s) {
  for (auto st : {JobState::queued, JobState::running, JobState::done, JobState::failed}) {
    if (to_string(st) == s) return st;
  }
  throw Error(Errc::invalid_argument, "unknown job state '" + std::string(s) + "'");
}

bool transition_allowed(JobState from, JobState to) {
  switch (from) {
    case JobState::queued: return to == JobState::running || to == JobState::failed;
    case JobState::running: return to == JobState::done || to == JobState::failed;
    default: return false;
  }
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

json segment_json(const highlighter::Segment& s) {
  return {{"start_sec", s.start_sec},
          {"end_sec", s.end_sec},
          {"mean_score", s.mean_score},
          {"peak_score", s.peak_score}};
}

highlighter::Segment segment_from(const json& j) {
  return {j.at("start_sec").get<double>(), j.at("end_sec").get<double>(),
          j.value("mean_score", 0.0), j.value("peak_score", 0.0)};
}

std::string new_job_id() {
  static std::atomic<unsigned> counter{0};
  std::random_device rd;
  char buf[48];
  std::snprintf(buf, sizeof buf, "job-%08x%08x-%04x", rd(), rd(), counter++ & 0xffffu);
  return buf;
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text) || !out.flush()) {
      throw Error(Errc::io_error, "cannot write " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io_error, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace

json to_json(const Job& job) {
  json history = json::array();
  for (const auto& t : job.history) history.push_back({{"state", to_string(t.state)}, {"at", t.at}});
  json j{{"id", job.id},
         {"kind", to_string(job.kind)},
         {"state", to_string(job.state)},
         {"video_id", job.video_id},
         {"params", highlighter::to_json(job.params)},
         {"history", history},
         {"artifacts", nullptr},
         {"error", nullptr}};
  if (job.segments) {
    json segs = json::array();
    for (const auto& s : *job.segments) segs.push_back(segment_json(s));
    j["segments"] = segs;
  }
  if (job.artifacts) {
    json a{{"scores", job.artifacts->scores.string()}, {"plan", job.artifacts->plan.string()}};
    a["video"] = job.artifacts->video.empty() ? json(nullptr) : json(job.artifacts->video.string());
    j["artifacts"] = a;
  }
  if (job.error) j["error"] = *job.error;
  return j;
}

Job job_from_json(const json& j) {
  Job job;
  try {
    job.id = j.at("id").get<std::string>();
    job.kind = parse_job_kind(j.at("kind").get<std::string>());
    job.state = parse_job_state(j.at("state").get<std::string>());
    job.video_id = j.at("video_id").get<std::string>();
    job.params = highlighter::params_from_json(j.at("params"));
    for (const auto& t : j.at("history")) {
      job.history.push_back({parse_job_state(t.at("state").get<std::string>()),
                             t.at("at").get<std::string>()});
    }
    if (j.contains("segments")) {
      job.segments.emplace();
      for (const auto& s : j["segments"]) job.segments->push_back(segment_from(s));
    }
    if (j.contains("artifacts") && !j["artifacts"].is_null()) {
      const auto& a = j["artifacts"];
      Artifacts art{a.at("scores").get<std::string>(), a.at("plan").get<std::string>(), {}};
      if (a.contains("video") && !a["video"].is_null()) art.video = a["video"].get<std::string>();
      job.artifacts = art;
    }
    if (j.contains("error") && !j["error"].is_null()) job.error = j["error"].get<std::string>();
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("job record: ") + e.what());
  }
  return job;
}

JobStore::JobStore(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(Errc::io_error, "cannot create " + dir_.string() + ": " + ec.message());
}

void JobStore::persist(const Job& job) const {
  write_atomic(dir_ / (job.id + ".json"), to_json(job).dump(2) + "\n");
}

Job JobStore::create(const std::string& video_id, JobKind kind,
                     const highlighter::HighlightParams& params,
                     std::optional<std::vector<highlighter::Segment>> segments) {
  Job job;
  job.id = new_job_id();
  job.kind = kind;
  job.video_id = video_id;
  job.params = params;
  job.segments = std::move(segments);
  job.history.push_back({JobState::queued, utc_now()});
  std::lock_guard lock(mu_);
  persist(job);
  return job;
}

namespace {

std::optional<Job> read_job(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    return job_from_json(json::parse(in));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

bool valid_job_id(const std::string& id) {
  if (id.empty() || id.size() > 64) return false;
  for (char c : id) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-') return false;
  }
  return true;
}

}  // namespace

std::optional<Job> JobStore::get(const std::string& id) const {
  if (!valid_job_id(id)) return std::nullopt;
  std::lock_guard lock(mu_);
  return read_job(dir_ / (id + ".json"));
}

std::vector<Job> JobStore::all() const {
  std::lock_guard lock(mu_);
  std::vector<Job> jobs;
  for (const auto& e : fs::directory_iterator(dir_)) {
    if (e.path().extension() != ".json") continue;
    if (auto job = read_job(e.path())) jobs.push_back(std::move(*job));
  }
  std::sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) {
    return std::tie(a.history.front().at, a.id) < std::tie(b.history.front().at, b.id);
  });
  return jobs;
}

Job JobStore::transition(const std::string& id, JobState to, std::optional<Artifacts> artifacts,
                         std::optional<std::string> error) {
  std::lock_guard lock(mu_);
  auto job = valid_job_id(id) ? read_job(dir_ / (id + ".json")) : std::nullopt;
  if (!job) throw Error(Errc::not_found, "job " + id);
  if (!transition_allowed(job->state, to)) {
    throw Error(Errc::illegal_transition, "job " + id + ": " + std::string(to_string(job->state)) +
                                              " -> " + std::string(to_string(to)));
  }
  if ((to == JobState::done) != artifacts.has_value()) {
    throw Error(Errc::illegal_transition, "job " + id + ": artifacts are recorded exactly on done");
  }
  job->state = to;
  job->artifacts = std::move(artifacts);
  job->error = to == JobState::failed ? std::optional(error.value_or("failed")) : std::nullopt;
  job->history.push_back({to, utc_now()});
  persist(*job);
  return *job;
}

std::vector<std::string> JobStore::recover() {
  std::vector<std::string> requeue;
  for (const auto& job : all()) {
    if (job.state == JobState::running) {
      transition(job.id, JobState::failed, {}, "interrupted: service restarted while running");
    } else if (job.state == JobState::queued) {
      requeue.push_back(job.id);
    }
  }
  return requeue;
}

// ---------------------------------------------------------------------------

struct Service::Impl {
  ServiceConfig cfg;
  fs::path videos_dir, artifacts_dir, uploads_dir;
  JobStore store;
  std::optional<nn::Checkpoint> model;
  std::string checkpoint_id;
  std::string checkpoint_error;
  JobHook hook;
  httplib::Server http;
  int bound_port = -1;

  std::mutex qmu;
  std::condition_variable qcv;
  std::deque<std::string> queue;
  bool stopping = false;
  std::vector<std::thread> workers;

  explicit Impl(ServiceConfig c)
      : cfg((c.validate(), std::move(c))),
        videos_dir(cfg.storage_dir / "videos"),
        artifacts_dir(cfg.storage_dir / "artifacts"),
        uploads_dir(cfg.storage_dir / "uploads"),
        store(cfg.storage_dir / "jobs") {
    for (const auto& d : {videos_dir, artifacts_dir, uploads_dir}) fs::create_directories(d);
    if (!cfg.checkpoint.empty()) {
      try {
        model = nn::load_checkpoint(cfg.checkpoint);
        checkpoint_id = media::content_id(cfg.checkpoint);
      } catch (const Error& e) {
        checkpoint_error = e.what();
      }
    } else {
      checkpoint_error = "no checkpoint configured";
    }
    routes();
  }

  std::optional<fs::path> find_video(const std::string& id) const {
    if (id.size() != 64 || id.find_first_not_of("0123456789abcdef") != std::string::npos) {
      return std::nullopt;
    }
    const fs::path meta = videos_dir / (id + ".json");
    std::ifstream in(meta);
    if (!in) return std::nullopt;
    try {
      const auto j = json::parse(in);
      return videos_dir / j.at("file").get<std::string>();
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  void enqueue(const std::string& id) {
    {
      std::lock_guard lock(qmu);
      queue.push_back(id);
    }
    qcv.notify_one();
  }

  void worker_loop() {
    for (;;) {
      std::string id;
      {
        std::unique_lock lock(qmu);
        qcv.wait(lock, [&] { return stopping || !queue.empty(); });
        if (stopping) return;
        id = queue.front();
        queue.pop_front();
      }
      run_job(id);
    }
  }

  void run_job(const std::string& id) {
    Job job;
    try {
      job = store.transition(id, JobState::running);
    } catch (const Error&) {
      return;  // already terminal or gone
    }
    try {
      if (hook) hook(job);
      auto artifacts = execute(job);
      store.transition(id, JobState::done, std::move(artifacts));
    } catch (const std::exception& e) {
      store.transition(id, JobState::failed, {}, e.what());
    } catch (...) {
      store.transition(id, JobState::failed, {}, "unknown error");
    }
  }

  Artifacts execute(const Job& job) {
    if (!model) throw Error(Errc::checkpoint_missing, checkpoint_error);
    const auto source = find_video(job.video_id);
    if (!source) throw Error(Errc::not_found, "video " + job.video_id);
    const auto meta = media::probe_video(*source);
    const auto scores = highlighter::score_video(meta, model->config, model->params,
                                                 job.params.stride_frames);
    auto segments = job.segments ? *job.segments
                                 : highlighter::segments_from_scores(scores, job.params.threshold,
                                                                     job.params.max_gap_sec,
                                                                     job.params.min_len_sec);
    const auto plan =
        highlighter::make_plan(job.video_id, job.params, std::move(segments), checkpoint_id);

    const fs::path dir = artifacts_dir / job.id;
    fs::create_directories(dir);
    Artifacts a{dir / "scores.json", dir / "plan.json", {}};
    json sj{{"video_id", job.video_id},
            {"duration_sec", meta.duration_sec},
            {"fps", meta.fps},
            {"frame_count", meta.frame_count},
            {"params", highlighter::to_json(job.params)},
            {"checkpoint_id", checkpoint_id},
            {"scores", highlighter::to_json(std::span<const highlighter::WindowScore>(scores))}};
    write_atomic(a.scores, sj.dump(2) + "\n");
    write_atomic(a.plan, highlighter::to_json(plan).dump(2) + "\n");
    if (job.kind == JobKind::highlight) {
      a.video = dir / "highlight.mkv";
      highlighter::render_highlight(plan, *source, a.video);
    }
    return a;
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(json{{"error", message}}.dump(), "application/json");
  }

  static void send_json(httplib::Response& res, const json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_file(httplib::Response& res, const fs::path& path, const char* type) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return send_error(res, 500, "artifact missing on disk");
    std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    res.set_content(std::move(body), type);
  }

  json video_json(const std::string& id, const media::VideoMeta& m) const {
    return {{"video_id", id},
            {"metadata",
             {{"width", m.width},
              {"height", m.height},
              {"fps", m.fps},
              {"frame_count", m.frame_count},
              {"duration_sec", m.duration_sec},
              {"source_fps", m.source_fps},
              {"source_frame_count", m.source_frame_count}}}};
  }

  void upload(const httplib::Request& req, httplib::Response& res) {
    if (!req.has_file("file")) return send_error(res, 400, "multipart field 'file' is required");
    const auto file = req.get_file_value("file");
    if (file.content.size() > cfg.max_upload_bytes) {
      return send_error(res, 413, "upload exceeds " + std::to_string(cfg.max_upload_bytes) + " bytes");
    }
    std::string ext = fs::path(file.filename).extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!dataset::is_video_extension(fs::path("x" + ext))) ext = ".mkv";
    static std::atomic<unsigned> seq{0};
    const fs::path tmp = uploads_dir / ("upload-" + std::to_string(::getpid()) + "-" +
                                        std::to_string(seq++) + ext);
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out || !out.write(file.content.data(), static_cast<std::streamsize>(file.content.size()))) {
        return send_error(res, 500, "cannot store upload");
      }
    }
    media::VideoMeta meta;
    std::string id;
    try {
      id = media::content_id(tmp);
      meta = media::probe_video(tmp);
    } catch (const Error& e) {
      fs::remove(tmp);
      return send_error(res, 400, std::string("undecodable video: ") + e.what());
    }
    const fs::path dest = videos_dir / (id + ext);
    std::error_code ec;
    if (fs::exists(dest)) {
      fs::remove(tmp, ec);
    } else {
      fs::rename(tmp, dest, ec);
      if (ec) return send_error(res, 500, "cannot store upload: " + ec.message());
    }
    meta.path = dest;
    auto out = video_json(id, meta);
    write_atomic(videos_dir / (id + ".json"),
                 json{{"file", dest.filename().string()}, {"metadata", out["metadata"]}}.dump(2));
    send_json(res, out);
  }

  void create_job(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      return send_error(res, 400, std::string("body is not JSON: ") + e.what());
    }
    if (!body.is_object()) return send_error(res, 400, "body must be a JSON object");
    if (!body.contains("video_id") || !body["video_id"].is_string()) {
      return send_error(res, 400, "video_id is required");
    }
    const auto video_id = body["video_id"].get<std::string>();
    JobKind kind;
    highlighter::HighlightParams params;
    std::optional<std::vector<highlighter::Segment>> segments;
    try {
      kind = parse_job_kind(body.value("kind", std::string("score")));
      if (body.contains("params")) params = highlighter::params_from_json(body["params"]);
      params.validate();
      if (body.contains("plan")) {
        const auto plan = highlighter::plan_from_json(body["plan"]);
        if (plan.source_id != video_id) {
          throw Error(Errc::invalid_argument, "plan.source_id does not match video_id");
        }
        segments = plan.segments;
      }
    } catch (const Error& e) {
      return send_error(res, 400, e.what());
    }
    if (!find_video(video_id)) return send_error(res, 404, "unknown video " + video_id);
    const auto job = store.create(video_id, kind, params, std::move(segments));
    enqueue(job.id);
    send_json(res, json{{"job_id", job.id}, {"state", to_string(job.state)}}, 202);
  }

  void artifact(const httplib::Request& req, httplib::Response& res, const std::string& which) {
    const auto job = store.get(req.path_params.at("id"));
    if (!job) return send_error(res, 404, "unknown job " + req.path_params.at("id"));
    if (which == "video" && job->kind != JobKind::highlight) {
      return send_error(res, 404, "score jobs have no rendered video");
    }
    if (job->state != JobState::done) {
      return send_error(res, 409, "job is " + std::string(to_string(job->state)));
    }
    if (which == "scores") return send_file(res, job->artifacts->scores, "application/json");
    if (which == "plan") return send_file(res, job->artifacts->plan, "application/json");
    send_file(res, job->artifacts->video, "video/x-matroska");
  }

  void routes() {
    http.set_payload_max_length(cfg.max_upload_bytes + (64u << 10));
    http.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      json j{{"status", model ? "ok" : "degraded"}, {"checkpoint_loaded", model.has_value()}};
      if (!model) j["detail"] = checkpoint_error;
      send_json(res, j);
    });
    http.Post("/videos", [this](const httplib::Request& req, httplib::Response& res) {
      upload(req, res);
    });
    http.Post("/jobs", [this](const httplib::Request& req, httplib::Response& res) {
      create_job(req, res);
    });
    http.Get("/jobs/:id", [this](const httplib::Request& req, httplib::Response& res) {
      const auto job = store.get(req.path_params.at("id"));
      if (!job) return send_error(res, 404, "unknown job " + req.path_params.at("id"));
      send_json(res, to_json(*job));
    });
    for (const std::string which : {"scores", "plan", "video"}) {
      http.Get("/jobs/:id/" + which, [this, which](const httplib::Request& req, httplib::Response& res) {
        artifact(req, res, which);
      });
    }
    http.set_exception_handler(
        [](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
          try {
            std::rethrow_exception(ep);
          } catch (const std::exception& e) {
            send_error(res, 500, e.what());
          } catch (...) {
            send_error(res, 500, "unknown error");
          }
        });
    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        res.set_content(json{{"error", httplib::status_message(res.status)}}.dump(),
                        "application/json");
      }
    });
  }

  void start_workers() {
    for (const auto& id : store.recover()) enqueue(id);
    for (int i = 0; i < cfg.workers; ++i) workers.emplace_back([this] { worker_loop(); });
  }

  void shutdown() {
    http.stop();
    {
      std::lock_guard lock(qmu);
      stopping = true;
    }
    qcv.notify_all();
    for (auto& t : workers) t.join();
    workers.clear();
  }
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}
Service::~Service() { impl_->shutdown(); }

const ServiceConfig& Service::config() const { return impl_->cfg; }
bool Service::checkpoint_loaded() const { return impl_->model.has_value(); }
JobStore& Service::store() { return impl_->store; }
void Service::set_job_hook(JobHook hook) { impl_->hook = std::move(hook); }

int Service::bind() {
  if (impl_->bound_port >= 0) return impl_->bound_port;
  auto& http = impl_->http;
  const auto& cfg = impl_->cfg;
  int port = cfg.port == 0 ? http.bind_to_any_port(cfg.host)
                           : (http.bind_to_port(cfg.host, cfg.port) ? cfg.port : -1);
  if (port < 0) {
    throw Error(Errc::io_error, "cannot bind " + cfg.host + ":" + std::to_string(cfg.port));
  }
  impl_->bound_port = port;
  impl_->start_workers();
  return port;
}

void Service::listen() {
  bind();
  impl_->http.listen_after_bind();
}

void Service::stop() { impl_->shutdown(); }

}  // namespace clipforge::service
