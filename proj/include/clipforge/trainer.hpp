#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "clipforge/dataset.hpp"
#include "clipforge/nn.hpp"

namespace clipforge::trainer {

struct TrainConfig {
  int max_epochs = 50;
  int batch_size = 8;
  double initial_lr = 0.01;
  double plateau_factor = 0.6;
  int plateau_patience = 5;
  double min_lr = 0.00005;
  int earlystop_patience = 10;
  std::uint64_t seed = 0;
  // Unit-RMS rescaling of the encoder on the first batch when training
  // starts from fresh weights.
  bool calibrate_encoder = true;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

inline constexpr double kMinDelta = 1e-4;

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0;
  double accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double lr = 0;  // in effect during the epoch

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> records;
  bool stopped_early = false;
  int best_epoch = 0;
  bool restored_best = false;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

/// Mean over rows of -sum_k y_k log(max(p_k, 1e-7)).
double categorical_crossentropy(const std::vector<std::vector<double>>& probs,
                                const std::vector<std::vector<double>>& onehot);

/// p <- p - lr * g on trainable tensors. `grads` must list exactly the
/// trainable tensors of `params`, in order.
template <typename T>
void sgd_update(nn::ParamSet<T>& params, const nn::ParamSet<T>& grads, double lr);

struct PlateauState {
  double lr = 0;
  double best = 0;  // +inf before the first call
  int wait = 0;
};

PlateauState plateau_init(const TrainConfig& cfg);
/// Returns the lr for the next epoch.
double plateau_step(PlateauState& state, const TrainConfig& cfg, double val_loss);

struct EarlyStopState {
  double best = 0;  // -inf before the first call
  int best_epoch = 0;
  int epoch = 0;
  int wait = 0;
  std::optional<nn::ModelParams> snapshot;
};

EarlyStopState earlystop_init();
/// Returns false once training should stop.
bool earlystop_step(EarlyStopState& state, const TrainConfig& cfg, double val_accuracy,
                    const nn::ModelParams& params);

/// Fresh weights from `cfg.seed`, calibrated on the first batch of `train`
/// when enabled.
nn::ModelParams initial_params(const nn::ModelConfig& model, const dataset::LabeledClips& train,
                               const TrainConfig& cfg);

struct TrainResult {
  nn::ModelParams params;  // best-epoch weights
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Seeded minibatch SGD. Each epoch: shuffle, train, evaluate on `val`,
/// then the plateau and early-stop callbacks. `start` defaults to
/// initial_params(). Throws EmptySplit, NonFiniteLoss.
TrainResult train(const nn::ModelConfig& model, const dataset::LabeledClips& train,
                  const dataset::LabeledClips& val, const TrainConfig& cfg,
                  std::optional<nn::ModelParams> start = std::nullopt,
                  const EpochCallback& on_epoch = {});

struct SplitScore {
  double loss = 0;
  double accuracy = 0;
  std::vector<std::vector<double>> probs;
};

/// Eval-mode loss and argmax accuracy over a labeled set.
SplitScore score_split(const nn::ModelConfig& model, const nn::ModelParams& params,
                       const dataset::LabeledClips& data);

nlohmann::json to_json(const TrainHistory& h);
TrainHistory history_from_json(const nlohmann::json& j);

/// Header `epoch,loss,accuracy,val_loss,val_accuracy,lr`, one row per epoch.
void write_history_csv(const TrainHistory& h, const std::filesystem::path& path);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

}  // namespace clipforge::trainer
