#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clipforge/highlighter.hpp"

namespace clipforge::service {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path checkpoint;  // empty: run degraded
  std::filesystem::path storage_dir = "clipforge-data";
  std::size_t max_upload_bytes = 256u << 20;
  int workers = 1;

  void validate() const;
};

nlohmann::json to_json(const ServiceConfig& c);
/// Missing keys keep their defaults.
ServiceConfig service_config_from_json(const nlohmann::json& j);

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
std::optional<std::string> process_env(const std::string& name);

/// Applies the CLIPFORGE_* variables listed at load_config.
void apply_env_overrides(ServiceConfig& c, const EnvLookup& env = process_env);

/// Config file (optional) then CLIPFORGE_HOST, CLIPFORGE_PORT,
/// CLIPFORGE_CHECKPOINT, CLIPFORGE_STORAGE_DIR, CLIPFORGE_MAX_UPLOAD_BYTES,
/// CLIPFORGE_WORKERS. Throws InvalidArgument on a malformed value.
ServiceConfig load_config(const std::optional<std::filesystem::path>& file,
                          const EnvLookup& env = process_env);

enum class JobKind { score, highlight };
enum class JobState { queued, running, done, failed };

std::string_view to_string(JobKind k);
std::string_view to_string(JobState s);
JobKind parse_job_kind(std::string_view s);
JobState parse_job_state(std::string_view s);

/// queued -> running -> (done | failed). Also queued -> failed, for jobs
/// that can never start.
bool transition_allowed(JobState from, JobState to);

struct Transition {
  JobState state = JobState::queued;
  std::string at;  // ISO-8601 UTC
};

struct Artifacts {
  std::filesystem::path scores;
  std::filesystem::path plan;
  std::filesystem::path video;  // highlight jobs only
};

struct Job {
  std::string id;
  JobKind kind = JobKind::score;
  JobState state = JobState::queued;
  std::string video_id;
  highlighter::HighlightParams params;
  /// Edited segment list to render instead of the detected one.
  std::optional<std::vector<highlighter::Segment>> segments;
  std::optional<Artifacts> artifacts;
  std::optional<std::string> error;
  std::vector<Transition> history;
};

nlohmann::json to_json(const Job& job);
Job job_from_json(const nlohmann::json& j);

/// One JSON file per job under `dir`. All mutations go through one mutex
/// and are written atomically (temp file + rename).
class JobStore {
 public:
  explicit JobStore(std::filesystem::path dir);

  Job create(const std::string& video_id, JobKind kind, const highlighter::HighlightParams& params,
             std::optional<std::vector<highlighter::Segment>> segments = std::nullopt);
  std::optional<Job> get(const std::string& id) const;
  std::vector<Job> all() const;

  /// Throws IllegalTransition, NotFound. Artifacts are recorded exactly
  /// when moving to done; error text only when moving to failed.
  Job transition(const std::string& id, JobState to, std::optional<Artifacts> artifacts = {},
                 std::optional<std::string> error = {});

  /// After a restart: running jobs become failed; returns the ids of
  /// queued jobs, oldest first, for re-enqueueing.
  std::vector<std::string> recover();

 private:
  void persist(const Job& job) const;
  std::filesystem::path dir_;
  mutable std::mutex mu_;
};

/// Hook run by a worker right after a job enters `running`; a throw fails
/// the job with the exception text. For tests.
using JobHook = std::function<void(const Job&)>;

class Service {
 public:
  explicit Service(ServiceConfig config);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceConfig& config() const;
  bool checkpoint_loaded() const;
  JobStore& store();
  void set_job_hook(JobHook hook);

  /// Binds (port 0 picks a free one) and starts workers; returns the port.
  int bind();
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace clipforge::service
