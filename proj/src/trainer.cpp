#include "clipforge/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "clipforge/error.hpp"

namespace clipforge::trainer {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::invalid_argument, what); };
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(initial_lr > 0)) fail("initial_lr must be > 0");
  if (!(plateau_factor > 0 && plateau_factor < 1)) fail("plateau_factor must be in (0, 1)");
  if (plateau_patience < 1) fail("plateau_patience must be >= 1");
  if (!(min_lr > 0 && min_lr <= initial_lr)) fail("min_lr must be in (0, initial_lr]");
  if (earlystop_patience < 1) fail("earlystop_patience must be >= 1");
}

json to_json(const TrainConfig& c) {
  return json{{"max_epochs", c.max_epochs},
              {"batch_size", c.batch_size},
              {"initial_lr", c.initial_lr},
              {"plateau_factor", c.plateau_factor},
              {"plateau_patience", c.plateau_patience},
              {"min_lr", c.min_lr},
              {"earlystop_patience", c.earlystop_patience},
              {"seed", c.seed},
              {"calibrate_encoder", c.calibrate_encoder}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.initial_lr = j.value("initial_lr", c.initial_lr);
    c.plateau_factor = j.value("plateau_factor", c.plateau_factor);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.min_lr = j.value("min_lr", c.min_lr);
    c.earlystop_patience = j.value("earlystop_patience", c.earlystop_patience);
    c.seed = j.value("seed", c.seed);
    c.calibrate_encoder = j.value("calibrate_encoder", c.calibrate_encoder);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double categorical_crossentropy(const std::vector<std::vector<double>>& probs,
                                const std::vector<std::vector<double>>& onehot) {
  if (probs.empty() || probs.size() != onehot.size()) {
    throw Error(Errc::shape_mismatch, "probs and onehot must be nonempty with equal rows");
  }
  double total = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != onehot[i].size()) {
      throw Error(Errc::shape_mismatch, "row " + std::to_string(i) + " width differs");
    }
    for (std::size_t k = 0; k < probs[i].size(); ++k) {
      if (onehot[i][k] != 0.0) {
        total -= onehot[i][k] * std::log(std::max(probs[i][k], nn::kProbabilityFloor));
      }
    }
  }
  return total / static_cast<double>(probs.size());
}

template <typename T>
void sgd_update(nn::ParamSet<T>& params, const nn::ParamSet<T>& grads, double lr) {
  std::size_t g = 0;
  for (auto& t : params.tensors) {
    if (!t.trainable) continue;
    if (g >= grads.tensors.size() || grads.tensors[g].name != t.name ||
        grads.tensors[g].values.size() != t.values.size()) {
      throw Error(Errc::shape_mismatch, "gradient missing or misshapen for '" + t.name + "'");
    }
    const auto& gv = grads.tensors[g].values;
    const auto step = static_cast<T>(lr);
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] -= step * gv[i];
    ++g;
  }
  if (g != grads.tensors.size()) {
    throw Error(Errc::shape_mismatch, "gradient set has tensors that are not trainable");
  }
}

template void sgd_update<float>(nn::ParamSet<float>&, const nn::ParamSet<float>&, double);
template void sgd_update<double>(nn::ParamSet<double>&, const nn::ParamSet<double>&, double);

PlateauState plateau_init(const TrainConfig& cfg) {
  return {cfg.initial_lr, std::numeric_limits<double>::infinity(), 0};
}

double plateau_step(PlateauState& s, const TrainConfig& cfg, double val_loss) {
  if (val_loss < s.best - kMinDelta) {
    s.best = val_loss;
    s.wait = 0;
  } else if (++s.wait >= cfg.plateau_patience) {
    s.lr = std::max(s.lr * cfg.plateau_factor, cfg.min_lr);
    s.wait = 0;
  }
  return s.lr;
}

EarlyStopState earlystop_init() {
  EarlyStopState s;
  s.best = -std::numeric_limits<double>::infinity();
  return s;
}

bool earlystop_step(EarlyStopState& s, const TrainConfig& cfg, double val_accuracy,
                    const nn::ModelParams& params) {
  ++s.epoch;
  if (val_accuracy > s.best + kMinDelta) {
    s.best = val_accuracy;
    s.best_epoch = s.epoch;
    s.wait = 0;
    s.snapshot = params;
    return true;
  }
  return ++s.wait < cfg.earlystop_patience;
}

namespace {

void require_nonempty(const dataset::LabeledClips& d, const char* what) {
  if (d.clips.empty()) throw Error(Errc::empty_split, std::string(what) + " split is empty");
  if (d.clips.size() != d.labels.size()) {
    throw Error(Errc::length_mismatch, std::string(what) + " clips and labels differ in length");
  }
}

std::vector<ClipTensor> gather(const dataset::LabeledClips& d, std::span<const std::size_t> idx,
                               std::vector<int>& labels) {
  std::vector<ClipTensor> out;
  out.reserve(idx.size());
  labels.clear();
  for (auto i : idx) {
    out.push_back(d.clips[i]);
    labels.push_back(d.labels[i]);
  }
  return out;
}

}  // namespace

nn::ModelParams initial_params(const nn::ModelConfig& model, const dataset::LabeledClips& train,
                               const TrainConfig& cfg) {
  Rng rng(cfg.seed);
  auto params = nn::init_params<float>(model, rng);
  if (cfg.calibrate_encoder && !train.clips.empty()) {
    const auto n = std::min<std::size_t>(train.clips.size(), static_cast<std::size_t>(cfg.batch_size));
    nn::calibrate_encoder(params, model, std::span(train.clips).first(n));
  }
  return params;
}

SplitScore score_split(const nn::ModelConfig& model, const nn::ModelParams& params,
                       const dataset::LabeledClips& data) {
  require_nonempty(data, "evaluation");
  Rng unused(0);
  SplitScore s;
  const auto probs = nn::model_forward<float>(data.clips, params, model, nn::Mode::eval, unused);
  int correct = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    s.probs.emplace_back(probs[i].begin(), probs[i].end());
    const int y = data.labels[i];
    s.loss -= std::log(std::max<double>(probs[i][static_cast<std::size_t>(y)], nn::kProbabilityFloor));
    if (nn::argmax<float>(probs[i]) == y) ++correct;
  }
  s.loss /= static_cast<double>(probs.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(probs.size());
  return s;
}

TrainResult train(const nn::ModelConfig& model, const dataset::LabeledClips& train_set,
                  const dataset::LabeledClips& val, const TrainConfig& cfg,
                  std::optional<nn::ModelParams> start, const EpochCallback& on_epoch) {
  cfg.validate();
  model.validate();
  require_nonempty(train_set, "train");
  require_nonempty(val, "val");

  TrainResult result;
  result.params = start ? std::move(*start) : initial_params(model, train_set, cfg);
  nn::check_params(model, result.params);
  auto& params = result.params;
  auto& history = result.history;

  // Offset so the shuffle/dropout stream differs from the init stream.
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  auto plateau = plateau_init(cfg);
  auto stopper = earlystop_init();
  std::vector<std::size_t> order(train_set.clips.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> labels;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = plateau.lr;
    rng.shuffle(std::span(order));
    double loss_sum = 0;
    int correct = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const auto n = std::min(order.size() - b, static_cast<std::size_t>(cfg.batch_size));
      const auto batch = gather(train_set, std::span(order).subspan(b, n), labels);
      auto step = nn::model_backward<float>(batch, labels, params, model, nn::Mode::train, rng);
      if (!std::isfinite(step.loss)) {
        throw Error(Errc::non_finite_loss, "loss " + std::to_string(step.loss) + " at epoch " +
                                               std::to_string(epoch) + ", batch starting at " +
                                               std::to_string(b) + " (lr " + std::to_string(lr) +
                                               ")");
      }
      loss_sum += static_cast<double>(step.loss) * static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        if (nn::argmax<float>(step.probs[i]) == labels[i]) ++correct;
      }
      sgd_update(params, step.grads, lr);
    }
    const auto v = score_split(model, params, val);
    if (!std::isfinite(v.loss)) {
      throw Error(Errc::non_finite_loss, "validation loss at epoch " + std::to_string(epoch));
    }
    EpochRecord rec{epoch,
                    loss_sum / static_cast<double>(order.size()),
                    static_cast<double>(correct) / static_cast<double>(order.size()),
                    v.loss,
                    v.accuracy,
                    lr};
    history.records.push_back(rec);
    if (on_epoch) on_epoch(rec);

    plateau_step(plateau, cfg, v.loss);
    if (!earlystop_step(stopper, cfg, v.accuracy, params)) {
      history.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  history.best_epoch = stopper.best_epoch;
  if (stopper.snapshot) {
    params = std::move(*stopper.snapshot);
    history.restored_best = true;
  }
  return result;
}

json to_json(const TrainHistory& h) {
  json records = json::array();
  for (const auto& r : h.records) {
    records.push_back({{"epoch", r.epoch},
                       {"loss", r.loss},
                       {"accuracy", r.accuracy},
                       {"val_loss", r.val_loss},
                       {"val_accuracy", r.val_accuracy},
                       {"lr", r.lr}});
  }
  return json{{"records", records},
              {"stopped_early", h.stopped_early},
              {"best_epoch", h.best_epoch},
              {"restored_best", h.restored_best}};
}

TrainHistory history_from_json(const json& j) {
  TrainHistory h;
  try {
    for (const auto& r : j.at("records")) {
      h.records.push_back({r.at("epoch").get<int>(), r.at("loss").get<double>(),
                           r.at("accuracy").get<double>(), r.at("val_loss").get<double>(),
                           r.at("val_accuracy").get<double>(), r.at("lr").get<double>()});
    }
    h.stopped_early = j.at("stopped_early").get<bool>();
    h.best_epoch = j.at("best_epoch").get<int>();
    h.restored_best = j.at("restored_best").get<bool>();
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("history json: ") + e.what());
  }
  return h;
}

namespace {
constexpr const char* kCsvHeader = "epoch,loss,accuracy,val_loss,val_accuracy,lr";
}

void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
  if (h.records.empty()) throw Error(Errc::empty_history, "no epochs recorded");
  std::ofstream out(path);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out << kCsvHeader << '\n';
  char line[256];
  for (const auto& r : h.records) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.loss,
                  r.accuracy, r.val_loss, r.val_accuracy, r.lr);
    out << line;
  }
  if (!out) throw Error(Errc::io_error, "write failed for " + path.string());
}

std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) {
    throw Error(Errc::invalid_argument, "unexpected history header in " + path.string());
  }
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf", &r.epoch, &r.loss, &r.accuracy,
                    &r.val_loss, &r.val_accuracy, &r.lr) != 6) {
      throw Error(Errc::invalid_argument, "bad history row: " + line);
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace clipforge::trainer
