#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "clipforge/clip.hpp"
#include "clipforge/rng.hpp"

namespace clipforge::nn {

enum class Mode { train, eval };
enum class OutputMode { sequence, clip };

/// Per-frame encoder: a 3x3 stride-2 stem convolution followed by
/// depthwise-separable stride-2 blocks, then global average pooling.
/// The feature width is the last block's channel count.
struct EncoderSpec {
  int stem_channels = 8;
  std::vector<int> block_channels = {16, 32, 64};
  // Encoder stages below this index are frozen. Stage 0 is the stem,
  // stage i + 1 is block i.
  int freeze_boundary = 0;

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

struct ModelConfig {
  int seq_len = kSequenceLength;
  int image_h = kImageHeight;
  int image_w = kImageWidth;
  int channels = kChannels;
  EncoderSpec encoder;
  int lstm_units = 32;
  std::vector<int> dense_units = {64, 32};
  double dropout_rate = 0.3;
  int num_classes = 2;

  int feature_dim() const;
  int encoder_stages() const { return 1 + static_cast<int>(encoder.block_channels.size()); }
  void validate() const;

  /// T=2, 8x8 frames, D=4, H=3. Small enough for exhaustive gradient checks.
  static ModelConfig tiny();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

template <typename T>
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> values;
  bool trainable = true;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered collection of named tensors. Used for model parameters and for
/// gradients (which hold only the trainable tensors).
template <typename T>
class ParamSet {
 public:
  std::vector<NamedTensor<T>> tensors;

  const NamedTensor<T>* find(std::string_view name) const;
  NamedTensor<T>* find(std::string_view name);
  /// Throws ShapeMismatch naming the tensor when absent.
  const NamedTensor<T>& at(std::string_view name) const;
  NamedTensor<T>& at(std::string_view name);

  std::size_t value_count() const;

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) {
      NamedTensor<U> u{t.name, t.shape, {}, t.trainable};
      u.values.assign(t.values.begin(), t.values.end());
      out.tensors.push_back(std::move(u));
    }
    return out;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;
};

using ModelParams = ParamSet<float>;

struct TensorDecl {
  std::string name;
  std::vector<int> shape;
  int encoder_stage = -1;  // -1 outside the encoder
  bool trainable = true;
};

/// Every parameter tensor the config implies, in storage order.
std::vector<TensorDecl> declare_params(const ModelConfig& config);

struct ParamCounts {
  long total = 0;
  long trainable = 0;
  long non_trainable = 0;
};

ParamCounts count_params(const ModelConfig& config);

/// Weights: truncated normal with stddev gain / sqrt(fan_in) (gain sqrt(2)
/// for convolution and dense layers, 2 for LSTM matrices). Biases zero
/// except the LSTM forget gate, which starts at 1.
template <typename T>
ParamSet<T> init_params(const ModelConfig& config, Rng& rng);

/// Throws ShapeMismatch if `params` does not carry exactly the declared
/// tensors with the declared shapes.
template <typename T>
void check_params(const ModelConfig& config, const ParamSet<T>& params);

/// Rescales each encoder convolution so its post-activation output has
/// unit RMS over `sample`. Applied once after init; keeps the pooled
/// feature scale independent of the random draw.
void calibrate_encoder(ModelParams& params, const ModelConfig& config,
                       std::span<const ClipTensor> sample);

// LSTM gate rows are stacked in the order input, forget, output, candidate.
template <typename T>
struct LstmCellParams {
  std::span<const T> W;  // 4H x D
  std::span<const T> U;  // 4H x H
  std::span<const T> b;  // 4H
  int input_dim = 0;
  int hidden = 0;
};

template <typename T>
LstmCellParams<T> lstm_params(const ParamSet<T>& params, const ModelConfig& config,
                              bool backward_direction);

template <typename T>
struct LstmState {
  std::vector<T> h;
  std::vector<T> c;
};

template <typename T>
LstmState<T> lstm_cell_step(std::span<const T> x, std::span<const T> h_prev,
                            std::span<const T> c_prev, const LstmCellParams<T>& p);

/// `features` is steps x D row-major. Sequence mode returns steps x 2H rows
/// [h_t^fwd; h_t^bwd]; clip mode returns the 2H vector [h_last^fwd; h_first^bwd].
template <typename T>
std::vector<T> bilstm_forward(std::span<const T> features, int steps,
                              const LstmCellParams<T>& fwd, const LstmCellParams<T>& bwd,
                              OutputMode mode);

/// Time-distributed encoder. Returns frames x D row-major. Deterministic.
template <typename T>
std::vector<T> encoder_forward(const ClipTensor& clip, const ParamSet<T>& params,
                               const ModelConfig& config);

/// Dense layers with ReLU and dropout, then the softmax output layer.
/// Train mode uses inverted dropout drawn from `rng`; eval mode never
/// touches it.
template <typename T>
std::vector<T> head_forward(std::span<const T> h, const ParamSet<T>& params,
                            const ModelConfig& config, Mode mode, Rng& rng);

template <typename T>
std::vector<T> softmax(std::span<const T> logits);

/// Index of the largest probability; ties go to the lower index
/// (NonViolence for the two-class model).
template <typename T>
int argmax(std::span<const T> probs) {
  int best = 0;
  for (std::size_t k = 1; k < probs.size(); ++k) {
    if (probs[k] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

/// One probability row per clip.
template <typename T>
std::vector<std::vector<T>> model_forward(std::span<const ClipTensor> batch,
                                          const ParamSet<T>& params, const ModelConfig& config,
                                          Mode mode, Rng& rng);

/// Per-frame class probabilities from sequence-mode BiLSTM output fed
/// through the head (eval mode). Diagnostic only.
template <typename T>
std::vector<std::vector<T>> frame_probabilities(const ClipTensor& clip,
                                                const ParamSet<T>& params,
                                                const ModelConfig& config);

template <typename T>
struct BackwardResult {
  T loss = 0;                           // mean clipped cross-entropy
  ParamSet<T> grads;                    // trainable tensors only
  std::vector<std::vector<T>> probs;    // forward output of the same pass
};

/// Forward and backward pass of the mean categorical cross-entropy over
/// the batch. The dropout masks are drawn from `rng` in the same order as
/// model_forward would draw them.
template <typename T>
BackwardResult<T> model_backward(std::span<const ClipTensor> batch, std::span<const int> labels,
                                 const ParamSet<T>& params, const ModelConfig& config, Mode mode,
                                 Rng& rng);

inline constexpr double kProbabilityFloor = 1e-7;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
  double relu_margin = 0.0;  // see relu_margin()
  std::vector<std::pair<std::string, double>> per_tensor;  // max error per trainable tensor
};

/// Smallest |pre-activation| over every ReLU in the forward pass, with the
/// dropout masks `rng` would produce. Central differences are only
/// meaningful when the step cannot push a ReLU input across zero.
double relu_margin(std::span<const ClipTensor> batch, const ParamSet<double>& params,
                   const ModelConfig& config, Mode mode, const Rng& rng);

/// Central finite differences against model_backward for every trainable
/// value. Each evaluation replays the same dropout masks from a copy of
/// `rng`. Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport gradient_check(std::span<const ClipTensor> batch, std::span<const int> labels,
                               const ParamSet<double>& params, const ModelConfig& config,
                               Mode mode, const Rng& rng, double eps = 1e-5);

// Checkpoint layout (integers little-endian):
//   "CKPT", u32 version, u32 config-json length, config json,
//   u32 tensor count, then per tensor: u32 name length, name, u8 trainable,
//   u32 rank, u32 dims[rank], f32 values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Loads and checks every tensor against `expected`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace clipforge::nn
