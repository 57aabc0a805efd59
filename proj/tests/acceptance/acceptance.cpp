// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if
// all selected criteria pass. `acceptance [name...]` runs a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "clipforge/dataset.hpp"
#include "clipforge/error.hpp"
#include "clipforge/evaluator.hpp"
#include "clipforge/highlighter.hpp"
#include "clipforge/media.hpp"
#include "clipforge/nn.hpp"
#include "clipforge/synthetic.hpp"
#include "clipforge/trainer.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace clipforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

double slope(const std::vector<double>& y) {
  const double n = static_cast<double>(y.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double x = static_cast<double>(i + 1);
    sx += x;
    sy += y[i];
    sxx += x * x;
    sxy += x * y[i];
  }
  const double den = n * sxx - sx * sx;
  return den == 0 ? 0 : (n * sxy - sx * sy) / den;
}

// ---------------------------------------------------------------------------

Outcome metric_formulas() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(2024);
  std::uniform_int_distribution<long> d(0, 1000);
  double worst = 0;
  int checked = 0;
  bool flags_ok = true;
  for (int trial = 0; trial < 10000; ++trial) {
    evaluator::ConfusionMatrix cm{d(gen), d(gen), d(gen), d(gen)};
    if (trial % 13 == 0) cm.tp = 0;
    if (cm.total() == 0) continue;
    const auto r = evaluator::metrics(cm);
    const auto o = oracle::metrics(cm.tp, cm.fp, cm.tn, cm.fn);
    for (const auto& [a, b] : {std::pair{r.sensitivity, o.se}, {r.specificity, o.sp}, {r.accuracy, o.acc},
                               {r.precision, o.pe}, {r.f1, o.f1}}) {
      worst = std::max(worst, std::abs(a - b));
    }
    flags_ok = flags_ok && r.sensitivity_undefined == o.se_undef && r.precision_undefined == o.pe_undef &&
               r.f1_undefined == o.f1_undef;
    ++checked;
  }
  const auto perfect = evaluator::metrics({50, 0, 50, 0});
  const auto sym = evaluator::metrics({25, 25, 25, 25});
  const bool fixed = perfect.sensitivity == 1 && perfect.specificity == 1 && perfect.accuracy == 1 &&
                     perfect.precision == 1 && perfect.f1 == 1 && sym.sensitivity == 0.5 &&
                     sym.specificity == 0.5 && sym.accuracy == 0.5 && sym.precision == 0.5 && sym.f1 == 0.5;
  const double secs = seconds_since(t0);
  return {worst <= 1e-12 && flags_ok && fixed && secs < 5,
          std::to_string(checked) + " matrices, max |err| " + fmt(worst) + ", perfect/symmetric " +
              (fixed ? "ok" : "WRONG") + ", " + fmt(secs, 3) + " s"};
}

Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  const auto c = nn::ModelConfig::tiny();
  Rng rng(1);
  auto params = nn::init_params<double>(c, rng);
  // Nudge biases off zero so no ReLU input sits exactly on the kink.
  for (auto& t : params.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.values) v += rng.uniform(-0.1, 0.1);
    }
  }
  std::vector<ClipTensor> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(testutil::random_clip(rng, c.seq_len, c.image_h, c.image_w));
  const std::vector<int> labels{1, 0, 1};
  double worst = 0;
  std::string worst_tensor;
  long checked = 0;
  bool margin_ok = true;
  for (auto mode : {nn::Mode::eval, nn::Mode::train}) {
    const auto r = nn::gradient_check(batch, labels, params, c, mode, Rng(99));
    margin_ok = margin_ok && r.relu_margin > 1e-4;
    checked += r.checked;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_tensor = r.worst_tensor;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && margin_ok && secs < 60,
          std::to_string(checked) + " values (eval + train), max rel err " + fmt(worst) + " in " + worst_tensor +
              ", " + fmt(secs, 3) + " s"};
}

template <typename T>
double bilstm_reversal_error(Rng& rng) {
  const int steps = 1 + static_cast<int>(rng.below(16)), D = 1 + static_cast<int>(rng.below(8)),
            H = 1 + static_cast<int>(rng.below(8));
  auto draw = [&](std::size_t n) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-1.5, 1.5));
    return v;
  };
  const auto Wf = draw(4 * H * D), Uf = draw(4 * H * H), bf = draw(4 * H);
  const auto Wb = draw(4 * H * D), Ub = draw(4 * H * H), bb = draw(4 * H);
  const auto x = draw(static_cast<std::size_t>(steps * D));
  std::vector<T> xr(x.size());
  for (int t = 0; t < steps; ++t) std::copy_n(x.begin() + t * D, D, xr.begin() + (steps - 1 - t) * D);
  nn::LstmCellParams<T> fwd{Wf, Uf, bf, D, H}, bwd{Wb, Ub, bb, D, H};
  const auto seq = nn::bilstm_forward<T>(x, steps, fwd, bwd, nn::OutputMode::sequence);
  const auto rev = nn::bilstm_forward<T>(xr, steps, bwd, fwd, nn::OutputMode::sequence);
  const auto clip = nn::bilstm_forward<T>(x, steps, fwd, bwd, nn::OutputMode::clip);
  double err = 0;
  for (int t = 0; t < steps; ++t) {
    for (int k = 0; k < H; ++k) {
      err = std::max(err, std::abs(static_cast<double>(seq[t * 2 * H + H + k] - rev[(steps - 1 - t) * 2 * H + k])));
    }
  }
  for (int k = 0; k < H; ++k) {
    err = std::max(err, std::abs(static_cast<double>(clip[k] - seq[(steps - 1) * 2 * H + k])));
    err = std::max(err, std::abs(static_cast<double>(clip[H + k] - seq[H + k])));
  }
  return err;
}

Outcome bilstm_and_softmax() {
  const auto t0 = Clock::now();
  Rng rng(31);
  double rev_err = 0, sum_err = 0;
  bool nonneg = true;
  for (int trial = 0; trial < 1000; ++trial) {
    rev_err = std::max(rev_err, bilstm_reversal_error<double>(rng));
    rev_err = std::max(rev_err, bilstm_reversal_error<float>(rng));
    std::vector<double> z(2 + rng.below(8));
    const double scale = trial % 2 ? 5.0 : 500.0;
    for (auto& v : z) v = rng.uniform(-scale, scale);
    const auto p = nn::softmax<double>(z);
    std::vector<float> zf(z.begin(), z.end());
    const auto pf = nn::softmax<float>(zf);
    double s = 0, sf = 0;
    for (double v : p) {
      nonneg = nonneg && v >= 0;
      s += v;
    }
    for (float v : pf) sf += v;
    sum_err = std::max({sum_err, std::abs(s - 1), std::abs(sf - 1)});
  }
  const double secs = seconds_since(t0);
  return {rev_err <= 1e-6 && sum_err <= 1e-6 && nonneg && secs < 10,
          "1000 inputs (f64 + f32), reversal err " + fmt(rev_err) + ", |sum-1| " + fmt(sum_err) + ", " +
              fmt(secs, 3) + " s"};
}

nn::ModelParams tagged(float value) {
  nn::ModelParams p;
  p.tensors.push_back({"w", {1}, {value}, true});
  return p;
}

Outcome callback_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> u(0, 1);
  trainer::TrainConfig cfg;
  int mismatches = 0, floor_hits = 0, reductions = 0, stops = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(u(gen) * 80);
    std::vector<double> vl, va;
    double loss = 1.0, acc = 0.5;
    // Every fourth sequence is long and flat so the lr reaches its floor.
    const bool flat = trial % 4 == 0;
    for (int e = 0; e < n; ++e) {
      const double steps[] = {0.0, -1e-4, -5e-5, -0.01, 0.01, -2e-4};
      loss += flat ? 0.0 : steps[static_cast<int>(u(gen) * 6)];
      const double acc_steps[] = {0.0, 1e-4, 0.125, -0.125};
      acc = flat ? acc + (e < 60 ? 1.5e-4 : 0) : std::clamp(acc + acc_steps[static_cast<int>(u(gen) * 4)], 0.0, 1.0);
      vl.push_back(loss);
      va.push_back(acc);
    }
    const auto want = oracle::simulate_callbacks(vl, va, cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience,
                                                 cfg.min_lr, cfg.earlystop_patience, 1e-4);
    auto ps = trainer::plateau_init(cfg);
    auto es = trainer::earlystop_init();
    std::vector<double> lrs;
    double lr = cfg.initial_lr;
    bool stopped = false;
    for (int e = 0; e < n; ++e) {
      lrs.push_back(lr);
      lr = trainer::plateau_step(ps, cfg, vl[static_cast<std::size_t>(e)]);
      if (!trainer::earlystop_step(es, cfg, va[static_cast<std::size_t>(e)], tagged(static_cast<float>(e + 1)))) {
        stopped = true;
        break;
      }
    }
    const bool restored = es.snapshot && es.snapshot->tensors[0].values[0] == static_cast<float>(want.best_epoch);
    if (lrs != want.lr || stopped != want.stopped || es.best_epoch != want.best_epoch || !restored) ++mismatches;
    if (std::find(lrs.begin(), lrs.end(), cfg.min_lr) != lrs.end()) ++floor_hits;
    if (std::any_of(lrs.begin(), lrs.end(), [&](double v) { return v < cfg.initial_lr; })) ++reductions;
    stops += stopped;
    for (double v : lrs) {
      if (v < cfg.min_lr) ++mismatches;
    }
  }

  // Restoration in a real run: the returned weights score the best epoch's val accuracy.
  const auto mc = nn::ModelConfig::tiny();
  auto clips = [&](int n, std::uint64_t seed) {
    Rng rng(seed);
    dataset::LabeledClips d;
    for (int i = 0; i < n; ++i) {
      auto clip = testutil::random_clip(rng, mc.seq_len, mc.image_h, mc.image_w);
      const int label = i % 2;
      for (auto& v : clip.data) v = label ? 0.6f + 0.4f * v : 0.4f * v;
      d.clips.push_back(std::move(clip));
      d.labels.push_back(label);
    }
    return d;
  };
  trainer::TrainConfig tc;
  tc.max_epochs = 30;
  tc.seed = 4;
  const auto train_set = clips(24, 1), val = clips(8, 2);
  const auto res = trainer::train(mc, train_set, val, tc);
  const auto& best = res.history.records[static_cast<std::size_t>(res.history.best_epoch - 1)];
  // The scenario is chosen so the last epoch is worse than the best one.
  const bool run_restored = res.history.restored_best &&
                            res.history.records.back().val_accuracy < best.val_accuracy &&
                            trainer::score_split(mc, res.params, val).accuracy == best.val_accuracy;

  const double secs = seconds_since(t0);
  return {mismatches == 0 && floor_hits > 0 && run_restored,
          "1000 sequences, " + std::to_string(mismatches) + " mismatches, " + std::to_string(reductions) +
              " with reductions, " + std::to_string(floor_hits) + " reach the 5e-05 floor, " + std::to_string(stops) +
              " stop early; training run restores epoch " + std::to_string(res.history.best_epoch) + " " +
              (run_restored ? "ok" : "WRONG") + ", " + fmt(secs, 3) + " s"};
}

Outcome segment_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<long> frames_d(1, 400);
  std::uniform_int_distribution<int> stride_d(1, 24), grid(0, 10);
  std::uniform_real_distribution<double> u(0, 1);
  int mismatches = 0, monotone_violations = 0, nonempty = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<highlighter::WindowScore> scores;
    for (const auto& w : media::sliding_windows(frames_d(gen), stride_d(gen))) {
      scores.push_back({w, u(gen) < 0.5 ? grid(gen) / 10.0 : u(gen)});
    }
    const double thr = grid(gen) / 10.0, gap = grid(gen) / 4.0, len = grid(gen) / 4.0;
    const auto got = highlighter::segments_from_scores(scores, thr, gap, len);
    const auto want = oracle::segments(scores, thr, gap, len);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < got.size(); ++i) {
      same = got[i].start_sec == want[i].start_sec && got[i].end_sec == want[i].end_sec &&
             std::abs(got[i].mean_score - want[i].mean_score) < 1e-12 && got[i].peak_score == want[i].peak_score;
    }
    mismatches += !same;
    nonempty += !got.empty();
    // Raising the threshold (no gap bridging, no length filter) only removes frames.
    const double hi = std::min(1.0, thr + 0.1 + u(gen) * 0.5);
    const auto lo_s = highlighter::segments_from_scores(scores, thr, 0, 0);
    const auto hi_s = highlighter::segments_from_scores(scores, hi, 0, 0);
    for (const auto& h : hi_s) {
      const bool covered = std::any_of(lo_s.begin(), lo_s.end(), [&](const auto& l) {
        return l.start_sec <= h.start_sec && h.end_sec <= l.end_sec;
      });
      monotone_violations += !covered;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && monotone_violations == 0,
          "10000 sequences (" + std::to_string(nonempty) + " non-empty), " + std::to_string(mismatches) +
              " mismatches, " + std::to_string(monotone_violations) + " monotonicity violations, " + fmt(secs, 3) +
              " s"};
}

// Shared by the training and end-to-end criteria.
struct TrainedModel {
  nn::ModelConfig config;
  nn::ModelParams params;
};
std::optional<TrainedModel> g_model;

Outcome synthetic_training(const fs::path& work) {
  const auto t0 = Clock::now();
  synthetic::SynthSpec spec;
  spec.n_per_class = 200;
  spec.seed = 0;
  synthetic::generate(spec, work / "synth");
  const auto m = dataset::split_manifest(dataset::build_manifest(work / "synth"), dataset::kDefaultFractions, 0);
  const auto train_set = dataset::load_clips(m, dataset::Split::train);
  const auto val = dataset::load_clips(m, dataset::Split::val);
  const auto test = dataset::load_clips(m, dataset::Split::test);
  const double prep_secs = seconds_since(t0);

  const nn::ModelConfig mc;
  const trainer::TrainConfig tc;
  const auto res = trainer::train(mc, train_set, val, tc);
  const auto ev = evaluator::evaluate_model(mc, res.params, test);
  g_model = TrainedModel{mc, res.params};

  std::vector<double> loss, val_loss, val_acc;
  for (const auto& r : res.history.records) {
    loss.push_back(r.loss);
    val_loss.push_back(r.val_loss);
    val_acc.push_back(r.val_accuracy);
  }
  const double s_loss = slope(loss), s_vloss = slope(val_loss), s_vacc = slope(val_acc);
  const double secs = seconds_since(t0);
  const bool pass = ev.report.accuracy >= 0.90 && s_loss < 0 && s_vacc > 0 && secs < 600;
  return {pass, "split " + std::to_string(train_set.clips.size()) + "/" + std::to_string(val.clips.size()) + "/" +
                    std::to_string(test.clips.size()) + ", " + std::to_string(res.history.records.size()) +
                    " epochs (best " + std::to_string(res.history.best_epoch) + "), test ACC " +
                    fmt(ev.report.accuracy) + ", slopes loss " + fmt(s_loss) + " val_loss " + fmt(s_vloss) +
                    " val_acc " + fmt(s_vacc) + ", data " + fmt(prep_secs, 3) + " s, total " + fmt(secs, 3) + " s"};
}

Outcome end_to_end_highlight(const fs::path& work) {
  if (!g_model) {
    // Run standalone: train the model first, outside the timed section.
    const auto t = synthetic_training(work);
    if (!g_model) return {false, "no model: " + t.detail};
  }
  const auto t0 = Clock::now();
  synthetic::SynthSpec spec;
  spec.duration_sec = 24;
  spec.seed = 5;
  const std::vector<synthetic::Interval> truth{{3, 9}, {14, 20}};
  const auto comp = synthetic::generate_composite(spec, truth, work / "composite.mkv");
  const auto meta = media::probe_video(comp.video);
  const highlighter::HighlightParams hp;
  const auto scores = highlighter::score_video(meta, g_model->config, g_model->params, hp.stride_frames);
  const auto segs = highlighter::segments_from_scores(scores, hp.threshold, hp.max_gap_sec, hp.min_len_sec);
  std::vector<std::pair<double, double>> pred, want;
  for (const auto& s : segs) pred.emplace_back(s.start_sec, s.end_sec);
  for (const auto& t : truth) want.emplace_back(t.start_sec, t.end_sec);
  const double iou = oracle::interval_iou(pred, want);

  std::string detail = std::to_string(segs.size()) + " segments [";
  for (const auto& s : segs) detail += " " + fmt(s.start_sec) + "-" + fmt(s.end_sec);
  detail += " ], IoU " + fmt(iou);
  bool render_ok = false;
  if (!segs.empty()) {
    const auto plan = highlighter::make_plan(meta.source_id, hp, segs, "");
    const auto r = highlighter::render_highlight(plan, comp.video, work / "highlight.mkv");
    const long out_frames = media::probe_video(r.output).source_frame_count;
    const long planned = std::lround(plan.total_sec * kProcessingFps);
    render_ok = std::abs(out_frames - planned) <= 4;
    detail += ", rendered " + std::to_string(out_frames) + " frames vs plan " + std::to_string(planned) + " (" +
              r.backend + ")";
  }
  const double secs = seconds_since(t0);
  detail += ", " + fmt(secs, 3) + " s";
  return {iou >= 0.8 && render_ok && secs < 120, detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + CLIPFORGE_CLI + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

Outcome cli_determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  std::string detail;
  for (const char* run : {"run1", "run2"}) {
    const auto dir = work / run;
    fs::create_directories(dir);
    const auto log = dir / "log.txt";
    const std::string d = "\"" + dir.string() + "\"";
    if (cli("synth --out " + d + "/data --n-per-class 20 --seed 9", log) != 0 ||
        cli("preprocess --root " + d + "/data --out " + d + "/prep --seed 9", log) != 0 ||
        cli("train --manifest " + d + "/prep/manifest.jsonl --out " + d + "/model --seed 9", log) != 0) {
      return {false, std::string(run) + " failed, see " + log.string()};
    }
  }
  bool same = true;
  // Manifest paths name each run's own dataset root; compare with the root stripped.
  auto read = [&](const char* run, const std::string& f) {
    auto text = slurp(work / run / f);
    const auto root = (work / run).string();
    for (auto pos = text.find(root); pos != std::string::npos; pos = text.find(root, pos)) text.erase(pos, root.size());
    return text;
  };
  for (const char* f : {"prep/manifest.jsonl", "model/history.csv", "model/history.json", "model/model.ckpt"}) {
    const auto a = read("run1", f), b = read("run2", f);
    const bool eq = !a.empty() && a == b;
    same = same && eq;
    detail += std::string(f) + (eq ? " identical, " : " DIFFERS, ");
  }
  const auto rows = trainer::read_history_csv(work / "run1" / "model" / "history.csv").size();
  detail += std::to_string(rows) + " epochs, " + fmt(seconds_since(t0), 3) + " s";
  return {same, detail};
}

}  // namespace

int main(int argc, char** argv) {
  testutil::TempDir work("acceptance");
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric-formulas", metric_formulas},
      {"gradient-check", gradient_correctness},
      {"bilstm-softmax", bilstm_and_softmax},
      {"callback-oracles", callback_oracles},
      {"segment-oracle", segment_oracle},
      {"synthetic-training", [&] { return synthetic_training(work.path()); }},
      {"end-to-end-highlight", [&] { return end_to_end_highlight(work.path()); }},
      {"cli-determinism", [&] { return cli_determinism(work.path()); }},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failed = 0, ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 && ran > 0 ? 0 : 1;
}
