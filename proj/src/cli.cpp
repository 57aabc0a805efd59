#include "clipforge/cli.hpp"

#include <atomic>
#include <chrono>
#include <csignal>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>
#include <opencv2/core.hpp>

#include "clipforge/dataset.hpp"
#include "clipforge/error.hpp"
#include "clipforge/evaluator.hpp"
#include "clipforge/highlighter.hpp"
#include "clipforge/media.hpp"
#include "clipforge/nn.hpp"
#include "clipforge/service.hpp"
#include "clipforge/synthetic.hpp"
#include "clipforge/trainer.hpp"

namespace clipforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  bool json_out = false;
  int workers = 1;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  json config;  // whole config file, {} if none

  json section(const char* name) const {
    return config.contains(name) ? config[name] : json::object();
  }

  void load() {
    if (config_path.empty()) {
      config = json::object();
      return;
    }
    std::ifstream in(config_path);
    if (!in) throw Error(Errc::missing_file, "config " + config_path);
    try {
      config = json::parse(in);
    } catch (const json::exception& e) {
      throw Error(Errc::invalid_argument, config_path + ": " + e.what());
    }
    if (!config.is_object()) throw Error(Errc::invalid_argument, config_path + ": not an object");
  }

  void effective(const std::string& command, const json& cfg) const {
    *err << "clipforge " << command << " effective config: " << cfg.dump() << "\n";
  }

  void summary(const json& j, const std::string& text) const {
    if (json_out) {
      *out << j.dump() << "\n";
    } else {
      *out << text;
    }
  }
};

std::array<double, 3> fractions_from(const std::vector<double>& v) {
  if (v.size() != 3) throw Error(Errc::invalid_argument, "--fractions takes three values");
  return {v[0], v[1], v[2]};
}

json manifest_counts(const dataset::DatasetManifest& m) {
  json j = json::object();
  for (auto s : {dataset::Split::train, dataset::Split::val, dataset::Split::test}) {
    j[std::string(dataset::to_string(s))] = m.in_split(s).size();
  }
  return j;
}

fs::path archive_path(const fs::path& manifest, dataset::Split s) {
  return manifest.parent_path() / (std::string(dataset::to_string(s)) + ".clpa");
}

/// Archive next to the manifest when it holds exactly this split's
/// labels, in order; otherwise decode the videos.
dataset::LabeledClips split_clips(const dataset::DatasetManifest& m, const fs::path& manifest_path,
                                  dataset::Split s, std::string* source) {
  const auto entries = m.in_split(s);
  const auto archive = archive_path(manifest_path, s);
  if (fs::exists(archive)) {
    auto clips = dataset::read_archive(archive);
    bool match = clips.labels.size() == entries.size();
    for (std::size_t i = 0; match && i < entries.size(); ++i) match = clips.labels[i] == entries[i]->label;
    if (match) {
      if (source) *source = archive.string();
      return clips;
    }
  }
  if (source) *source = "decoded";
  return dataset::load_clips(m, s);
}

nn::ModelConfig model_config(const Common& c) {
  auto j = c.section("model");
  auto cfg = j.empty() ? nn::ModelConfig{} : nn::config_from_json(j);
  cfg.validate();
  return cfg;
}

highlighter::RenderBackend parse_backend(const std::string& s) {
  if (s == "auto") return highlighter::RenderBackend::automatic;
  if (s == "opencv") return highlighter::RenderBackend::opencv;
  if (s == "external") return highlighter::RenderBackend::external;
  throw Error(Errc::invalid_argument, "unknown backend " + s);
}

std::vector<synthetic::Interval> parse_intervals(const std::string& text) {
  std::vector<synthetic::Interval> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw Error(Errc::invalid_argument, "interval '" + item + "' is not start:end");
    }
    try {
      out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
    } catch (const std::exception&) {
      throw Error(Errc::invalid_argument, "interval '" + item + "' is not numeric");
    }
  }
  return out;
}

std::atomic<bool> g_interrupted{false};
extern "C" void on_signal(int) { g_interrupted = true; }

// --- subcommands ----------------------------------------------------------

struct PreprocessOpts {
  std::string root, out;
  std::uint64_t seed = 0;
  std::vector<double> fractions{dataset::kDefaultFractions.begin(), dataset::kDefaultFractions.end()};
};

void preprocess(const Common& c, const PreprocessOpts& o) {
  const auto fr = fractions_from(o.fractions);
  c.effective("preprocess", {{"root", o.root}, {"out", o.out}, {"seed", o.seed}, {"fractions", o.fractions}});
  const auto manifest = dataset::split_manifest(dataset::build_manifest(o.root), fr, o.seed);
  fs::create_directories(o.out);
  const fs::path mpath = fs::path(o.out) / "manifest.jsonl";
  dataset::write_manifest(manifest, mpath);
  json archives = json::object();
  for (auto s : {dataset::Split::train, dataset::Split::val, dataset::Split::test}) {
    const auto clips = dataset::load_clips(manifest, s);
    const auto path = archive_path(mpath, s);
    dataset::write_archive(clips.clips, clips.labels, path);
    archives[std::string(dataset::to_string(s))] = path.string();
  }
  json skipped = json::array();
  for (const auto& sk : manifest.skipped) skipped.push_back({{"path", sk.path.string()}, {"reason", sk.reason}});
  const json j{{"manifest", mpath.string()},
               {"counts", manifest_counts(manifest)},
               {"archives", archives},
               {"skipped", skipped},
               {"seed", o.seed}};
  c.summary(j, "wrote " + mpath.string() + " and split archives " + manifest_counts(manifest).dump() + "\n");
}

struct SplitOpts {
  std::string manifest, out;
  std::uint64_t seed = 0;
  std::vector<double> fractions{dataset::kDefaultFractions.begin(), dataset::kDefaultFractions.end()};
};

void split(const Common& c, const SplitOpts& o) {
  const auto fr = fractions_from(o.fractions);
  c.effective("split", {{"manifest", o.manifest}, {"out", o.out}, {"seed", o.seed}, {"fractions", o.fractions}});
  const auto m = dataset::split_manifest(dataset::read_manifest(o.manifest), fr, o.seed);
  dataset::write_manifest(m, o.out);
  c.summary({{"manifest", o.out}, {"counts", manifest_counts(m)}, {"seed", o.seed}},
            "wrote " + o.out + " " + manifest_counts(m).dump() + "\n");
}

struct TrainOpts {
  std::string manifest, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr;
  bool plots = false;
};

void train(const Common& c, const TrainOpts& o) {
  auto tj = c.section("train");
  auto cfg = tj.empty() ? trainer::TrainConfig{} : trainer::train_config_from_json(tj);
  if (o.seed) cfg.seed = *o.seed;
  if (o.epochs) cfg.max_epochs = *o.epochs;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.lr) cfg.initial_lr = *o.lr;
  cfg.validate();
  const auto model = model_config(c);
  const json effective{{"manifest", o.manifest}, {"out", o.out}, {"train", trainer::to_json(cfg)},
                       {"model", nn::to_json(model)}, {"seed", cfg.seed}};
  c.effective("train", effective);

  const auto m = dataset::read_manifest(o.manifest);
  std::string train_src, val_src;
  const auto train_set = split_clips(m, o.manifest, dataset::Split::train, &train_src);
  const auto val_set = split_clips(m, o.manifest, dataset::Split::val, &val_src);
  *c.err << "train clips: " << train_set.clips.size() << " (" << train_src
         << "), val clips: " << val_set.clips.size() << " (" << val_src << ")\n";

  auto result = trainer::train(model, train_set, val_set, cfg, std::nullopt, [&](const trainer::EpochRecord& r) {
    char line[200];
    std::snprintf(line, sizeof line,
                  "epoch %3d  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  lr %.6g\n", r.epoch,
                  r.loss, r.accuracy, r.val_loss, r.val_accuracy, r.lr);
    *c.err << line << std::flush;
  });

  fs::create_directories(o.out);
  const fs::path ckpt = fs::path(o.out) / "model.ckpt";
  nn::save_checkpoint(result.params, model, ckpt);
  const auto curves = evaluator::export_curves(result.history, o.out, o.plots);
  {
    std::ofstream cf(fs::path(o.out) / "config.json");
    cf << effective.dump(2) << "\n";
  }
  const auto& h = result.history;
  const auto& best = h.records.at(static_cast<std::size_t>(h.best_epoch - 1));
  const json j{{"checkpoint", ckpt.string()},
               {"history", curves.csv.string()},
               {"epochs", h.records.size()},
               {"best_epoch", h.best_epoch},
               {"stopped_early", h.stopped_early},
               {"best_val_accuracy", best.val_accuracy},
               {"best_val_loss", best.val_loss},
               {"seed", cfg.seed}};
  c.summary(j, "saved " + ckpt.string() + " (best epoch " + std::to_string(h.best_epoch) + " of " +
                   std::to_string(h.records.size()) + ")\n");
}

struct EvaluateOpts {
  std::string manifest, checkpoint, split = "test", out;
};

void evaluate(const Common& c, const EvaluateOpts& o) {
  const auto split = dataset::parse_split(o.split);
  c.effective("evaluate", {{"manifest", o.manifest}, {"checkpoint", o.checkpoint}, {"split", o.split}});
  const auto ck = nn::load_checkpoint(o.checkpoint);
  const auto m = dataset::read_manifest(o.manifest);
  const auto data = split_clips(m, o.manifest, split, nullptr);
  if (data.clips.empty()) throw Error(Errc::empty_split, o.split + " split is empty");
  const auto e = evaluator::evaluate_model(ck.config, ck.params, data);
  const json j{{"split", o.split},
               {"confusion", evaluator::to_json(e.cm)},
               {"metrics", evaluator::to_json(e.report)}};
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    std::ofstream f(fs::path(o.out) / "metrics.json");
    f << j.dump(2) << "\n";
  }
  char text[256];
  std::snprintf(text, sizeof text,
                "SE %.4f  SP %.4f  ACC %.4f  PE %.4f  F1 %.4f  loss %.4f\n", e.report.sensitivity,
                e.report.specificity, e.report.accuracy, e.report.precision, e.report.f1,
                e.report.loss);
  c.summary(j, evaluator::format_confusion(e.cm) + text);
}

struct ScoreOpts {
  std::string video, checkpoint, out;
  int stride = 8;
};

void score(const Common& c, const ScoreOpts& o) {
  c.effective("score", {{"video", o.video}, {"checkpoint", o.checkpoint}, {"stride_frames", o.stride}});
  const auto ck = nn::load_checkpoint(o.checkpoint);
  const auto meta = media::probe_video(o.video);
  const auto scores = highlighter::score_video(meta, ck.config, ck.params, o.stride);
  const json sj{{"video_id", meta.source_id},
                {"duration_sec", meta.duration_sec},
                {"fps", meta.fps},
                {"frame_count", meta.frame_count},
                {"checkpoint_id", media::content_id(o.checkpoint)},
                {"scores", highlighter::to_json(std::span<const highlighter::WindowScore>(scores))}};
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f || !(f << sj.dump(2) << "\n")) throw Error(Errc::io_error, "cannot write " + o.out);
  }
  c.summary({{"video_id", meta.source_id}, {"windows", scores.size()}, {"out", o.out}},
            std::to_string(scores.size()) + " windows scored\n");
}

struct HighlightOpts {
  std::string video, checkpoint, out, plan_in, plan_out, backend = "auto", tool = "ffmpeg";
  highlighter::HighlightParams params;
};

void highlight(const Common& c, HighlightOpts o) {
  o.params.validate();
  c.effective("highlight", {{"video", o.video},
                            {"checkpoint", o.checkpoint},
                            {"plan", o.plan_in},
                            {"params", highlighter::to_json(o.params)},
                            {"backend", o.backend}});
  highlighter::HighlightPlan plan;
  if (!o.plan_in.empty()) {
    plan = highlighter::import_plan(o.plan_in);
  } else {
    if (o.checkpoint.empty()) throw Error(Errc::invalid_argument, "--checkpoint or --plan is required");
    const auto ck = nn::load_checkpoint(o.checkpoint);
    const auto meta = media::probe_video(o.video);
    const auto scores = highlighter::score_video(meta, ck.config, ck.params, o.params.stride_frames);
    plan = highlighter::make_plan(
        meta.source_id, o.params,
        highlighter::segments_from_scores(scores, o.params.threshold, o.params.max_gap_sec,
                                          o.params.min_len_sec),
        media::content_id(o.checkpoint));
  }
  if (!o.plan_out.empty()) highlighter::export_plan(plan, o.plan_out);
  json j{{"plan", highlighter::to_json(plan)}};
  std::string text = std::to_string(plan.segments.size()) + " segment(s), " +
                     std::to_string(plan.total_sec) + " s\n";
  if (!o.out.empty()) {
    const auto r = highlighter::render_highlight(plan, o.video, o.out, parse_backend(o.backend), o.tool);
    j["render"] = {{"output", r.output.string()},
                   {"frames_written", r.frames_written},
                   {"duration_sec", r.duration_sec},
                   {"backend", r.backend}};
    text += "rendered " + r.output.string() + " via " + r.backend + "\n";
  }
  c.summary(j, text);
}

struct ServeOpts {
  std::optional<int> port;
  std::string checkpoint, storage;
};

void serve(const Common& c, const ServeOpts& o, bool workers_set) {
  auto sj = c.section("service");
  auto cfg = sj.empty() ? service::ServiceConfig{} : service::service_config_from_json(sj);
  service::apply_env_overrides(cfg);
  if (o.port) cfg.port = *o.port;
  if (!o.checkpoint.empty()) cfg.checkpoint = o.checkpoint;
  if (!o.storage.empty()) cfg.storage_dir = o.storage;
  if (workers_set) cfg.workers = c.workers;
  cfg.validate();
  c.effective("serve", service::to_json(cfg));
  service::Service svc(cfg);
  const int port = svc.bind();
  *c.err << "listening on " << cfg.host << ":" << port
         << (svc.checkpoint_loaded() ? "" : " (degraded: no checkpoint)") << "\n";
  g_interrupted = false;
  auto prev_int = std::signal(SIGINT, on_signal);
  auto prev_term = std::signal(SIGTERM, on_signal);
  std::thread watcher([&] {
    while (!g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    svc.stop();
  });
  svc.listen();
  g_interrupted = true;
  watcher.join();
  std::signal(SIGINT, prev_int);
  std::signal(SIGTERM, prev_term);
  c.summary({{"port", port}, {"stopped", true}}, "stopped\n");
}

struct SynthOpts {
  std::string out;
  std::optional<int> n_per_class;
  std::optional<std::uint64_t> seed;
  std::optional<double> duration;
  std::string composite;  // "start:end,start:end"
};

void synth(const Common& c, const SynthOpts& o) {
  auto sj = c.section("synth");
  auto spec = sj.empty() ? synthetic::SynthSpec{} : synthetic::synth_spec_from_json(sj);
  if (o.n_per_class) spec.n_per_class = *o.n_per_class;
  if (o.seed) spec.seed = *o.seed;
  if (o.duration) spec.duration_sec = *o.duration;
  spec.validate();
  json eff = synthetic::to_json(spec);
  eff["out"] = o.out;
  if (!o.composite.empty()) eff["composite"] = o.composite;
  c.effective("synth", eff);
  if (!o.composite.empty()) {
    const auto intervals = parse_intervals(o.composite);
    const auto r = synthetic::generate_composite(spec, intervals, o.out);
    c.summary({{"video", r.video.string()}, {"truth", r.truth.string()}, {"seed", spec.seed}},
              "wrote " + r.video.string() + "\n");
    return;
  }
  const auto clips = synthetic::generate(spec, o.out);
  c.summary({{"root", o.out}, {"clips", clips.size()}, {"seed", spec.seed}},
            "wrote " + std::to_string(clips.size()) + " clips under " + o.out + "\n");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"clipforge: fight-scene detection and highlight compilation"};
  app.name("clipforge");
  app.require_subcommand(1);
  Common c;
  c.out = &out;
  c.err = &err;
  app.add_option("--config", c.config_path, "JSON config with optional sections model, train, synth, service");
  app.add_flag("--json", c.json_out, "Write a JSON summary to stdout");
  auto* workers_opt = app.add_option("--workers", c.workers, "Worker threads (decode / service jobs)")
                          ->check(CLI::PositiveNumber);

  std::function<void()> action;

  PreprocessOpts pre;
  auto* sp = app.add_subcommand("preprocess", "Build manifest, split, and write clip archives");
  sp->add_option("--root", pre.root, "Dataset root with NonViolence/ and Violence/")->required();
  sp->add_option("--out", pre.out, "Output directory")->required();
  sp->add_option("--seed", pre.seed, "Split seed");
  sp->add_option("--fractions", pre.fractions, "train val test fractions")->expected(3);
  sp->callback([&] { action = [&] { preprocess(c, pre); }; });

  SplitOpts spl;
  auto* ss = app.add_subcommand("split", "Re-split an existing manifest");
  ss->add_option("--manifest", spl.manifest, "Input manifest (JSON lines)")->required();
  ss->add_option("--out", spl.out, "Output manifest")->required();
  ss->add_option("--seed", spl.seed, "Split seed");
  ss->add_option("--fractions", spl.fractions, "train val test fractions")->expected(3);
  ss->callback([&] { action = [&] { split(c, spl); }; });

  TrainOpts tr;
  auto* st = app.add_subcommand("train", "Train from a split manifest");
  st->add_option("--manifest", tr.manifest, "Split manifest; <split>.clpa next to it is used if current")
      ->required();
  st->add_option("--out", tr.out, "Output directory (model.ckpt, history.*)")->required();
  st->add_option("--seed", tr.seed, "Training seed");
  st->add_option("--epochs", tr.epochs, "Maximum epochs");
  st->add_option("--batch-size", tr.batch_size, "Minibatch size");
  st->add_option("--lr", tr.lr, "Initial learning rate");
  st->add_flag("--plots", tr.plots, "Also write loss.svg and accuracy.svg");
  st->callback([&] { action = [&] { train(c, tr); }; });

  EvaluateOpts ev;
  auto* se = app.add_subcommand("evaluate", "Confusion matrix and metrics on a split");
  se->add_option("--manifest", ev.manifest, "Split manifest")->required();
  se->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required();
  se->add_option("--split", ev.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  se->add_option("--out", ev.out, "Directory for metrics.json");
  se->callback([&] { action = [&] { evaluate(c, ev); }; });

  ScoreOpts sc;
  auto* ssc = app.add_subcommand("score", "Per-window violence probabilities for a video");
  ssc->add_option("--video", sc.video, "Input video")->required();
  ssc->add_option("--checkpoint", sc.checkpoint, "Model checkpoint")->required();
  ssc->add_option("--stride", sc.stride, "Window stride in frames")->check(CLI::PositiveNumber);
  ssc->add_option("--out", sc.out, "Scores JSON");
  ssc->callback([&] { action = [&] { score(c, sc); }; });

  HighlightOpts hl;
  auto* sh = app.add_subcommand("highlight", "Detect violent segments and render the highlight");
  sh->add_option("--video", hl.video, "Input video")->required();
  sh->add_option("--checkpoint", hl.checkpoint, "Model checkpoint (not needed with --plan)");
  sh->add_option("--plan", hl.plan_in, "Render this plan instead of scoring");
  sh->add_option("--plan-out", hl.plan_out, "Write the plan JSON here");
  sh->add_option("--out", hl.out, "Rendered highlight video");
  sh->add_option("--threshold", hl.params.threshold, "Window is violent when p >= threshold");
  sh->add_option("--max-gap", hl.params.max_gap_sec, "Merge segments closer than this (s)");
  sh->add_option("--min-len", hl.params.min_len_sec, "Drop segments shorter than this (s)");
  sh->add_option("--stride", hl.params.stride_frames, "Window stride in frames");
  sh->add_option("--backend", hl.backend, "auto, opencv or external")
      ->check(CLI::IsMember({"auto", "opencv", "external"}));
  sh->add_option("--tool", hl.tool, "External render tool");
  sh->callback([&] { action = [&] { highlight(c, hl); }; });

  ServeOpts sv;
  auto* ssv = app.add_subcommand("serve", "Run the HTTP job service");
  ssv->add_option("--port", sv.port, "Listen port (0 picks one)");
  ssv->add_option("--checkpoint", sv.checkpoint, "Model checkpoint");
  ssv->add_option("--storage", sv.storage, "Storage directory");
  ssv->callback([&] { action = [&] { serve(c, sv, workers_opt->count() > 0); }; });

  SynthOpts sy;
  auto* ssy = app.add_subcommand("synth", "Generate a synthetic dataset or composite video");
  ssy->add_option("--out", sy.out, "Dataset root, or video path with --composite")->required();
  ssy->add_option("--n-per-class", sy.n_per_class, "Clips per class");
  ssy->add_option("--seed", sy.seed, "Generator seed");
  ssy->add_option("--duration", sy.duration, "Seconds per clip / composite length");
  ssy->add_option("--composite", sy.composite, "Violent intervals, e.g. 3:9,14:20");
  ssy->callback([&] { action = [&] { synth(c, sy); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* scope = &app;
    for (const auto* sub : app.get_subcommands()) scope = sub;
    err << scope->help();
    return kExitUsage;
  }

  try {
    c.load();
    cv::setNumThreads(c.workers);
    action();
    return kExitOk;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomain;
  }
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace clipforge::cli
