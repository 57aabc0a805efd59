#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "clipforge/dataset.hpp"
#include "clipforge/nn.hpp"
#include "clipforge/trainer.hpp"

namespace clipforge::evaluator {

/// Positive class is Violence (index 1).
struct ConfusionMatrix {
  long tp = 0;
  long fp = 0;
  long tn = 0;
  long fn = 0;

  long total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Throws LengthMismatch, BadLabel, EmptyMatrix (no pairs).
ConfusionMatrix confusion(std::span<const int> predicted, std::span<const int> truth);

/// A ratio whose denominator is zero is reported as 0 with its flag set.
struct MetricsReport {
  double sensitivity = 0;  // TP / (TP + FN)
  double specificity = 0;  // TN / (TN + FP)
  double accuracy = 0;     // (TN + TP) / (TN + TP + FN + FP)
  double precision = 0;    // TP / (TP + FP)
  double f1 = 0;           // 2 PE SE / (PE + SE)
  double loss = 0;         // mean cross-entropy when computed from a model
  bool sensitivity_undefined = false;
  bool specificity_undefined = false;
  bool precision_undefined = false;
  bool f1_undefined = false;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Throws EmptyMatrix when all four counts are zero.
MetricsReport metrics(const ConfusionMatrix& cm);

struct Evaluation {
  ConfusionMatrix cm;
  MetricsReport report;
  std::vector<int> predicted;
  std::vector<std::vector<double>> probs;
};

/// Eval-mode forward over `test`; predictions are argmax (ties to
/// NonViolence). Throws EmptySplit.
Evaluation evaluate_model(const nn::ModelConfig& model, const nn::ModelParams& params,
                          const dataset::LabeledClips& test);

nlohmann::json to_json(const ConfusionMatrix& cm);
nlohmann::json to_json(const MetricsReport& r);

/// 2x2 table, rows = actual class, columns = predicted class.
std::string format_confusion(const ConfusionMatrix& cm);

struct CurveFiles {
  std::filesystem::path csv;
  std::filesystem::path json;
  std::vector<std::filesystem::path> plots;  // empty unless requested
};

/// history.csv and history.json in `out_dir`; with `plots`, also loss.svg
/// and accuracy.svg. Throws EmptyHistory, IOError.
CurveFiles export_curves(const trainer::TrainHistory& history, const std::filesystem::path& out_dir,
                         bool plots = false);

}  // namespace clipforge::evaluator
