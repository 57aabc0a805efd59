#include "clipforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "clipforge/binary_io.hpp"
#include "clipforge/error.hpp"

namespace clipforge::nn {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

int ModelConfig::feature_dim() const {
  return encoder.block_channels.empty() ? encoder.stem_channels : encoder.block_channels.back();
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(Errc::invalid_argument, what); };
  if (seq_len < 1 || image_h < 1 || image_w < 1 || channels < 1) fail("input dims must be positive");
  if (encoder.stem_channels < 1) fail("stem_channels must be >= 1");
  for (int c : encoder.block_channels) {
    if (c < 1) fail("block channel widths must be >= 1");
  }
  if (encoder.freeze_boundary < 0 || encoder.freeze_boundary > encoder_stages()) {
    fail("freeze_boundary must be in [0, encoder stages]");
  }
  if (lstm_units < 1) fail("lstm_units must be >= 1");
  for (int u : dense_units) {
    if (u < 1) fail("dense widths must be >= 1");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (num_classes != 2) fail("num_classes must equal the class list length (2)");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.seq_len = 2;
  c.image_h = 8;
  c.image_w = 8;
  c.encoder.stem_channels = 2;
  c.encoder.block_channels = {4};
  c.lstm_units = 3;
  c.dense_units = {5, 4};
  return c;
}

json to_json(const ModelConfig& c) {
  return json{{"seq_len", c.seq_len},
              {"image_h", c.image_h},
              {"image_w", c.image_w},
              {"channels", c.channels},
              {"encoder",
               {{"stem_channels", c.encoder.stem_channels},
                {"block_channels", c.encoder.block_channels},
                {"freeze_boundary", c.encoder.freeze_boundary}}},
              {"lstm_units", c.lstm_units},
              {"dense_units", c.dense_units},
              {"dropout_rate", c.dropout_rate},
              {"num_classes", c.num_classes}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.seq_len = j.value("seq_len", c.seq_len);
    c.image_h = j.value("image_h", c.image_h);
    c.image_w = j.value("image_w", c.image_w);
    c.channels = j.value("channels", c.channels);
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      c.encoder.stem_channels = e.value("stem_channels", c.encoder.stem_channels);
      c.encoder.block_channels = e.value("block_channels", c.encoder.block_channels);
      c.encoder.freeze_boundary = e.value("freeze_boundary", c.encoder.freeze_boundary);
    }
    c.lstm_units = j.value("lstm_units", c.lstm_units);
    c.dense_units = j.value("dense_units", c.dense_units);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.num_classes = j.value("num_classes", c.num_classes);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter sets

template <typename T>
const NamedTensor<T>* ParamSet<T>::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <typename T>
NamedTensor<T>* ParamSet<T>::find(std::string_view name) {
  for (auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <typename T>
const NamedTensor<T>& ParamSet<T>::at(std::string_view name) const {
  const auto* t = find(name);
  if (!t) throw Error(Errc::shape_mismatch, "missing tensor '" + std::string(name) + "'");
  return *t;
}

template <typename T>
NamedTensor<T>& ParamSet<T>::at(std::string_view name) {
  auto* t = find(name);
  if (!t) throw Error(Errc::shape_mismatch, "missing tensor '" + std::string(name) + "'");
  return *t;
}

template <typename T>
std::size_t ParamSet<T>::value_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

template class ParamSet<float>;
template class ParamSet<double>;

namespace {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

int downsample(int n) { return (n - 1) / 2 + 1; }  // 3x3 kernel, stride 2, pad 1

struct ConvLayer {
  enum Kind { stem, depthwise, pointwise } kind;
  int cin = 0, cout = 0;
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  int stage = 0;
  std::size_t kernel = 0, bias = 0;  // tensor indices
};

std::vector<ConvLayer> conv_layers(const ModelConfig& c) {
  std::vector<ConvLayer> layers;
  int h = c.image_h, w = c.image_w;
  layers.push_back({ConvLayer::stem, c.channels, c.encoder.stem_channels, h, w, downsample(h),
                    downsample(w), 0, 0, 1});
  h = downsample(h);
  w = downsample(w);
  int ch = c.encoder.stem_channels;
  std::size_t idx = 2;
  for (std::size_t b = 0; b < c.encoder.block_channels.size(); ++b) {
    const int stage = static_cast<int>(b) + 1;
    layers.push_back({ConvLayer::depthwise, ch, ch, h, w, downsample(h), downsample(w), stage, idx,
                      idx + 1});
    h = downsample(h);
    w = downsample(w);
    const int out = c.encoder.block_channels[b];
    layers.push_back({ConvLayer::pointwise, ch, out, h, w, h, w, stage, idx + 2, idx + 3});
    ch = out;
    idx += 4;
  }
  return layers;
}

struct Layout {
  std::size_t lstm_fwd = 0;  // index of W; U and b follow
  std::size_t lstm_bwd = 0;
  std::vector<std::size_t> dense;  // index of W; b follows
  std::size_t output = 0;
};

Layout layout_of(const ModelConfig& c) {
  Layout l;
  l.lstm_fwd = 2 + 4 * c.encoder.block_channels.size();
  l.lstm_bwd = l.lstm_fwd + 3;
  std::size_t idx = l.lstm_bwd + 3;
  for (std::size_t j = 0; j < c.dense_units.size(); ++j, idx += 2) l.dense.push_back(idx);
  l.output = idx;
  return l;
}

template <typename T>
T sigmoid(T z) {
  return T(1) / (T(1) + std::exp(-z));
}

}  // namespace

std::vector<TensorDecl> declare_params(const ModelConfig& c) {
  c.validate();
  std::vector<TensorDecl> d;
  const int fb = c.encoder.freeze_boundary;
  auto enc = [&](std::string name, std::vector<int> shape, int stage) {
    d.push_back({std::move(name), std::move(shape), stage, stage >= fb});
  };
  enc("encoder.stem.kernel", {c.encoder.stem_channels, 3, 3, c.channels}, 0);
  enc("encoder.stem.bias", {c.encoder.stem_channels}, 0);
  int ch = c.encoder.stem_channels;
  for (std::size_t b = 0; b < c.encoder.block_channels.size(); ++b) {
    const std::string p = "encoder.block" + std::to_string(b);
    const int stage = static_cast<int>(b) + 1;
    const int out = c.encoder.block_channels[b];
    enc(p + ".depthwise.kernel", {3, 3, ch}, stage);
    enc(p + ".depthwise.bias", {ch}, stage);
    enc(p + ".pointwise.kernel", {out, ch}, stage);
    enc(p + ".pointwise.bias", {out}, stage);
    ch = out;
  }
  const int D = c.feature_dim(), H = c.lstm_units;
  for (const char* dir : {"forward", "backward"}) {
    const std::string p = std::string("bilstm.") + dir;
    d.push_back({p + ".W", {4 * H, D}, -1, true});
    d.push_back({p + ".U", {4 * H, H}, -1, true});
    d.push_back({p + ".b", {4 * H}, -1, true});
  }
  int prev = 2 * H;
  for (std::size_t j = 0; j < c.dense_units.size(); ++j) {
    const std::string p = "head.dense" + std::to_string(j);
    d.push_back({p + ".W", {c.dense_units[j], prev}, -1, true});
    d.push_back({p + ".b", {c.dense_units[j]}, -1, true});
    prev = c.dense_units[j];
  }
  d.push_back({"head.output.W", {c.num_classes, prev}, -1, true});
  d.push_back({"head.output.b", {c.num_classes}, -1, true});
  return d;
}

ParamCounts count_params(const ModelConfig& config) {
  ParamCounts counts;
  for (const auto& d : declare_params(config)) {
    const auto n = static_cast<long>(shape_size(d.shape));
    counts.total += n;
    (d.trainable ? counts.trainable : counts.non_trainable) += n;
  }
  return counts;
}

template <typename T>
ParamSet<T> init_params(const ModelConfig& config, Rng& rng) {
  ParamSet<T> p;
  const int H = config.lstm_units;
  for (const auto& d : declare_params(config)) {
    NamedTensor<T> t{d.name, d.shape, std::vector<T>(shape_size(d.shape), T(0)), d.trainable};
    const bool is_bias = d.shape.size() == 1;
    if (!is_bias) {
      double fan_in = 1.0;
      double gain = std::sqrt(2.0);
      if (d.name.rfind("bilstm.", 0) == 0) {
        fan_in = d.shape[1];
        gain = 2.0;
      } else if (d.name == "encoder.stem.kernel") {
        fan_in = 9.0 * d.shape[3];
      } else if (d.name.find("depthwise") != std::string::npos) {
        fan_in = 9.0;
      } else {
        fan_in = d.shape[1];
      }
      const double stddev = gain / std::sqrt(fan_in);
      for (auto& v : t.values) v = static_cast<T>(rng.truncated_normal(stddev));
    } else if (d.name.rfind("bilstm.", 0) == 0) {
      std::fill(t.values.begin() + H, t.values.begin() + 2 * H, T(1));
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template ParamSet<float> init_params<float>(const ModelConfig&, Rng&);
template ParamSet<double> init_params<double>(const ModelConfig&, Rng&);

template <typename T>
void check_params(const ModelConfig& config, const ParamSet<T>& params) {
  const auto decls = declare_params(config);
  for (const auto& d : decls) {
    const auto* t = params.find(d.name);
    if (!t) throw Error(Errc::shape_mismatch, "missing tensor '" + d.name + "'");
    if (t->shape != d.shape || t->values.size() != shape_size(d.shape)) {
      throw Error(Errc::shape_mismatch, "tensor '" + d.name + "' has the wrong shape");
    }
  }
  if (params.tensors.size() != decls.size()) {
    throw Error(Errc::shape_mismatch, "parameter set has unexpected extra tensors");
  }
  for (std::size_t i = 0; i < decls.size(); ++i) {
    if (params.tensors[i].name != decls[i].name) {
      throw Error(Errc::shape_mismatch, "tensor '" + decls[i].name + "' is out of order");
    }
  }
}

template void check_params<float>(const ModelConfig&, const ParamSet<float>&);
template void check_params<double>(const ModelConfig&, const ParamSet<double>&);

// ---------------------------------------------------------------------------
// Encoder

namespace {

template <typename T>
void conv_forward(const ConvLayer& L, const T* in, const ParamSet<T>& p, T* out,
                  T* margin = nullptr) {
  const T* k = p.tensors[L.kernel].values.data();
  const T* b = p.tensors[L.bias].values.data();
  const int cin = L.cin, cout = L.cout;
  if (L.kind == ConvLayer::pointwise) {
    const int n = L.out_h * L.out_w;
    for (int px = 0; px < n; ++px) {
      const T* x = in + static_cast<std::size_t>(px) * cin;
      T* o = out + static_cast<std::size_t>(px) * cout;
      for (int co = 0; co < cout; ++co) {
        const T* w = k + static_cast<std::size_t>(co) * cin;
        T acc = b[co];
        for (int ci = 0; ci < cin; ++ci) acc += w[ci] * x[ci];
        if (margin) *margin = std::min(*margin, std::abs(acc));
        o[co] = acc > T(0) ? acc : T(0);
      }
    }
    return;
  }
  for (int oy = 0; oy < L.out_h; ++oy) {
    for (int ox = 0; ox < L.out_w; ++ox) {
      T* o = out + (static_cast<std::size_t>(oy) * L.out_w + ox) * cout;
      std::copy(b, b + cout, o);
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * 2 - 1 + ky;
        if (iy < 0 || iy >= L.in_h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * 2 - 1 + kx;
          if (ix < 0 || ix >= L.in_w) continue;
          const T* x = in + (static_cast<std::size_t>(iy) * L.in_w + ix) * cin;
          if (L.kind == ConvLayer::stem) {
            for (int co = 0; co < cout; ++co) {
              const T* w = k + ((static_cast<std::size_t>(co) * 3 + ky) * 3 + kx) * cin;
              T acc = 0;
              for (int ci = 0; ci < cin; ++ci) acc += w[ci] * x[ci];
              o[co] += acc;
            }
          } else {
            const T* w = k + (static_cast<std::size_t>(ky) * 3 + kx) * cin;
            for (int c = 0; c < cin; ++c) o[c] += w[c] * x[c];
          }
        }
      }
      for (int co = 0; co < cout; ++co) {
        if (margin) *margin = std::min(*margin, std::abs(o[co]));
        o[co] = o[co] > T(0) ? o[co] : T(0);
      }
    }
  }
}

// `g` is the gradient w.r.t. the layer's pre-activation output. Adds
// parameter gradients into dk/db and, when `din` is non-null, the input
// gradient into din.
template <typename T>
void conv_backward(const ConvLayer& L, const T* in, const T* g, const ParamSet<T>& p, T* dk,
                   T* db, T* din) {
  const T* k = p.tensors[L.kernel].values.data();
  const int cin = L.cin, cout = L.cout;
  if (L.kind == ConvLayer::pointwise) {
    const int n = L.out_h * L.out_w;
    for (int px = 0; px < n; ++px) {
      const T* x = in + static_cast<std::size_t>(px) * cin;
      const T* go = g + static_cast<std::size_t>(px) * cout;
      T* dx = din ? din + static_cast<std::size_t>(px) * cin : nullptr;
      for (int co = 0; co < cout; ++co) {
        const T gv = go[co];
        if (gv == T(0)) continue;
        db[co] += gv;
        T* dw = dk + static_cast<std::size_t>(co) * cin;
        for (int ci = 0; ci < cin; ++ci) dw[ci] += gv * x[ci];
        if (dx) {
          const T* w = k + static_cast<std::size_t>(co) * cin;
          for (int ci = 0; ci < cin; ++ci) dx[ci] += gv * w[ci];
        }
      }
    }
    return;
  }
  for (int oy = 0; oy < L.out_h; ++oy) {
    for (int ox = 0; ox < L.out_w; ++ox) {
      const T* go = g + (static_cast<std::size_t>(oy) * L.out_w + ox) * cout;
      for (int co = 0; co < cout; ++co) db[co] += go[co];
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * 2 - 1 + ky;
        if (iy < 0 || iy >= L.in_h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * 2 - 1 + kx;
          if (ix < 0 || ix >= L.in_w) continue;
          const std::size_t off = (static_cast<std::size_t>(iy) * L.in_w + ix) * cin;
          const T* x = in + off;
          if (L.kind == ConvLayer::stem) {
            for (int co = 0; co < cout; ++co) {
              const T gv = go[co];
              if (gv == T(0)) continue;
              T* dw = dk + ((static_cast<std::size_t>(co) * 3 + ky) * 3 + kx) * cin;
              for (int ci = 0; ci < cin; ++ci) dw[ci] += gv * x[ci];
            }
          } else {
            const std::size_t koff = (static_cast<std::size_t>(ky) * 3 + kx) * cin;
            for (int c = 0; c < cin; ++c) dk[koff + c] += go[c] * x[c];
            if (din) {
              for (int c = 0; c < cin; ++c) din[off + c] += go[c] * k[koff + c];
            }
          }
        }
      }
    }
  }
}

std::size_t act_size(const ConvLayer& L) {
  return static_cast<std::size_t>(L.out_h) * L.out_w * L.cout;
}

template <typename T>
struct FrameTrace {
  std::vector<T> input;
  std::vector<std::vector<T>> acts;  // post-ReLU output of each conv layer
};

template <typename T>
void encode_frame(const float* frame, const std::vector<ConvLayer>& layers, const ParamSet<T>& p,
                  FrameTrace<T>& tr, T* feature, T* margin = nullptr) {
  const auto& first = layers.front();
  tr.input.assign(frame, frame + static_cast<std::size_t>(first.in_h) * first.in_w * first.cin);
  tr.acts.resize(layers.size());
  const T* in = tr.input.data();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    tr.acts[l].resize(act_size(layers[l]));
    conv_forward(layers[l], in, p, tr.acts[l].data(), margin);
    in = tr.acts[l].data();
  }
  const auto& last = layers.back();
  const int n = last.out_h * last.out_w;
  const T* a = tr.acts.back().data();
  for (int c = 0; c < last.cout; ++c) feature[c] = T(0);
  for (int px = 0; px < n; ++px) {
    for (int c = 0; c < last.cout; ++c) feature[c] += a[static_cast<std::size_t>(px) * last.cout + c];
  }
  for (int c = 0; c < last.cout; ++c) feature[c] /= static_cast<T>(n);
}

// dfeature: gradient w.r.t. the pooled feature of this frame.
template <typename T>
void encode_frame_backward(const FrameTrace<T>& tr, const std::vector<ConvLayer>& layers,
                           const ParamSet<T>& p, int freeze_boundary, const T* dfeature,
                           ParamSet<T>& grads_full) {
  const auto& last = layers.back();
  const int n = last.out_h * last.out_w;
  std::vector<T> g(act_size(last));
  for (int px = 0; px < n; ++px) {
    for (int c = 0; c < last.cout; ++c) {
      g[static_cast<std::size_t>(px) * last.cout + c] = dfeature[c] / static_cast<T>(n);
    }
  }
  std::vector<T> din;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& L = layers[li];
    if (L.stage < freeze_boundary) break;
    const auto& out = tr.acts[li];
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (out[i] <= T(0)) g[i] = T(0);
    }
    const T* in = li == 0 ? tr.input.data() : tr.acts[li - 1].data();
    const bool need_input_grad = li > 0 && layers[li - 1].stage >= freeze_boundary;
    if (need_input_grad) din.assign(tr.acts[li - 1].size(), T(0));
    conv_backward(L, in, g.data(), p, grads_full.tensors[L.kernel].values.data(),
                  grads_full.tensors[L.bias].values.data(),
                  need_input_grad ? din.data() : nullptr);
    if (!need_input_grad) break;
    g.swap(din);
  }
}

void check_clip(const ClipTensor& clip, const ModelConfig& c) {
  if (clip.frames != c.seq_len || clip.height != c.image_h || clip.width != c.image_w ||
      clip.channels != c.channels || clip.data.size() != clip.element_count()) {
    throw Error(Errc::shape_mismatch,
                "clip (" + std::to_string(clip.frames) + ", " + std::to_string(clip.height) +
                    ", " + std::to_string(clip.width) + ", " + std::to_string(clip.channels) +
                    ") does not match the model input (" + std::to_string(c.seq_len) + ", " +
                    std::to_string(c.image_h) + ", " + std::to_string(c.image_w) + ", " +
                    std::to_string(c.channels) + ")");
  }
}

}  // namespace

template <typename T>
std::vector<T> encoder_forward(const ClipTensor& clip, const ParamSet<T>& params,
                               const ModelConfig& config) {
  check_clip(clip, config);
  check_params(config, params);
  const auto layers = conv_layers(config);
  const int D = config.feature_dim();
  std::vector<T> features(static_cast<std::size_t>(clip.frames) * D);
  FrameTrace<T> tr;
  for (int t = 0; t < clip.frames; ++t) {
    encode_frame(clip.frame(t), layers, params, tr, features.data() + static_cast<std::size_t>(t) * D);
  }
  return features;
}

template std::vector<float> encoder_forward(const ClipTensor&, const ParamSet<float>&,
                                            const ModelConfig&);
template std::vector<double> encoder_forward(const ClipTensor&, const ParamSet<double>&,
                                             const ModelConfig&);

void calibrate_encoder(ModelParams& params, const ModelConfig& config,
                       std::span<const ClipTensor> sample) {
  check_params(config, params);
  if (sample.empty()) return;
  for (const auto& c : sample) check_clip(c, config);
  const auto layers = conv_layers(config);
  FrameTrace<float> tr;
  std::vector<float> feature(static_cast<std::size_t>(config.feature_dim()));
  for (std::size_t l = 0; l < layers.size(); ++l) {
    double sumsq = 0.0;
    std::size_t count = 0;
    for (const auto& clip : sample) {
      for (int t = 0; t < clip.frames; ++t) {
        encode_frame(clip.frame(t), layers, params, tr, feature.data());
        for (float v : tr.acts[l]) sumsq += static_cast<double>(v) * v;
        count += tr.acts[l].size();
      }
    }
    const double rms = std::sqrt(sumsq / static_cast<double>(count));
    if (!(rms > 0.0) || !std::isfinite(rms)) continue;
    const auto scale = static_cast<float>(1.0 / rms);
    for (auto& v : params.tensors[layers[l].kernel].values) v *= scale;
    for (auto& v : params.tensors[layers[l].bias].values) v *= scale;
  }
}

// ---------------------------------------------------------------------------
// LSTM

template <typename T>
LstmCellParams<T> lstm_params(const ParamSet<T>& params, const ModelConfig& config,
                              bool backward_direction) {
  const auto lay = layout_of(config);
  const std::size_t i = backward_direction ? lay.lstm_bwd : lay.lstm_fwd;
  return {params.tensors.at(i).values, params.tensors.at(i + 1).values,
          params.tensors.at(i + 2).values, config.feature_dim(), config.lstm_units};
}

template LstmCellParams<float> lstm_params(const ParamSet<float>&, const ModelConfig&, bool);
template LstmCellParams<double> lstm_params(const ParamSet<double>&, const ModelConfig&, bool);

namespace {

template <typename T>
void check_cell(const LstmCellParams<T>& p) {
  const auto D = static_cast<std::size_t>(p.input_dim), H = static_cast<std::size_t>(p.hidden);
  if (p.input_dim < 1 || p.hidden < 1 || p.W.size() != 4 * H * D || p.U.size() != 4 * H * H ||
      p.b.size() != 4 * H) {
    throw Error(Errc::shape_mismatch, "LSTM parameters inconsistent with (D, H)");
  }
}

// Activated gates [i, f, o, g] for one step.
template <typename T>
void lstm_gates(const T* x, const T* h_prev, const LstmCellParams<T>& p, T* gates) {
  const int D = p.input_dim, H = p.hidden;
  for (int r = 0; r < 4 * H; ++r) {
    T z = p.b[r];
    const T* w = p.W.data() + static_cast<std::size_t>(r) * D;
    for (int k = 0; k < D; ++k) z += w[k] * x[k];
    const T* u = p.U.data() + static_cast<std::size_t>(r) * H;
    for (int k = 0; k < H; ++k) z += u[k] * h_prev[k];
    gates[r] = r < 3 * H ? sigmoid(z) : std::tanh(z);
  }
}

template <typename T>
struct LstmStep {
  int row = 0;  // input row this step consumed
  std::vector<T> h_prev, c_prev, gates, c, tanh_c, h;
};

template <typename T>
std::vector<LstmStep<T>> run_lstm(std::span<const T> features, int steps,
                                  const LstmCellParams<T>& p, bool reverse) {
  const int H = p.hidden, D = p.input_dim;
  std::vector<LstmStep<T>> trace(static_cast<std::size_t>(steps));
  std::vector<T> h(H, T(0)), c(H, T(0));
  for (int s = 0; s < steps; ++s) {
    auto& st = trace[static_cast<std::size_t>(s)];
    st.row = reverse ? steps - 1 - s : s;
    st.h_prev = h;
    st.c_prev = c;
    st.gates.resize(4 * H);
    lstm_gates(features.data() + static_cast<std::size_t>(st.row) * D, h.data(), p,
               st.gates.data());
    st.c.resize(H);
    st.tanh_c.resize(H);
    st.h.resize(H);
    for (int k = 0; k < H; ++k) {
      const T i = st.gates[k], f = st.gates[H + k], o = st.gates[2 * H + k],
              g = st.gates[3 * H + k];
      st.c[k] = f * c[k] + i * g;
      st.tanh_c[k] = std::tanh(st.c[k]);
      st.h[k] = o * st.tanh_c[k];
    }
    h = st.h;
    c = st.c;
  }
  return trace;
}

// BPTT from a gradient on the final hidden state only.
template <typename T>
void lstm_backward(const std::vector<LstmStep<T>>& trace, std::span<const T> features,
                   const LstmCellParams<T>& p, std::span<const T> dh_final, T* dW, T* dU, T* db,
                   T* dfeatures) {
  const int H = p.hidden, D = p.input_dim;
  std::vector<T> dh(dh_final.begin(), dh_final.end()), dc(H, T(0)), dz(4 * H);
  for (std::size_t s = trace.size(); s-- > 0;) {
    const auto& st = trace[s];
    for (int k = 0; k < H; ++k) {
      const T i = st.gates[k], f = st.gates[H + k], o = st.gates[2 * H + k],
              g = st.gates[3 * H + k];
      const T tc = st.tanh_c[k];
      const T dct = dc[k] + dh[k] * o * (T(1) - tc * tc);
      dz[k] = dct * g * i * (T(1) - i);
      dz[H + k] = dct * st.c_prev[k] * f * (T(1) - f);
      dz[2 * H + k] = dh[k] * tc * o * (T(1) - o);
      dz[3 * H + k] = dct * i * (T(1) - g * g);
      dc[k] = dct * f;
    }
    const T* x = features.data() + static_cast<std::size_t>(st.row) * D;
    T* dx = dfeatures + static_cast<std::size_t>(st.row) * D;
    std::fill(dh.begin(), dh.end(), T(0));
    for (int r = 0; r < 4 * H; ++r) {
      const T g = dz[r];
      db[r] += g;
      T* dw = dW + static_cast<std::size_t>(r) * D;
      const T* w = p.W.data() + static_cast<std::size_t>(r) * D;
      for (int k = 0; k < D; ++k) {
        dw[k] += g * x[k];
        dx[k] += g * w[k];
      }
      T* du = dU + static_cast<std::size_t>(r) * H;
      const T* u = p.U.data() + static_cast<std::size_t>(r) * H;
      for (int k = 0; k < H; ++k) {
        du[k] += g * st.h_prev[k];
        dh[k] += g * u[k];
      }
    }
  }
}

}  // namespace

template <typename T>
LstmState<T> lstm_cell_step(std::span<const T> x, std::span<const T> h_prev,
                            std::span<const T> c_prev, const LstmCellParams<T>& p) {
  check_cell(p);
  const auto H = static_cast<std::size_t>(p.hidden);
  if (x.size() != static_cast<std::size_t>(p.input_dim) || h_prev.size() != H ||
      c_prev.size() != H) {
    throw Error(Errc::shape_mismatch, "LSTM step inputs inconsistent with (D, H)");
  }
  std::vector<T> gates(4 * H);
  lstm_gates(x.data(), h_prev.data(), p, gates.data());
  LstmState<T> s{std::vector<T>(H), std::vector<T>(H)};
  for (std::size_t k = 0; k < H; ++k) {
    s.c[k] = gates[H + k] * c_prev[k] + gates[k] * gates[3 * H + k];
    s.h[k] = gates[2 * H + k] * std::tanh(s.c[k]);
  }
  return s;
}

template LstmState<float> lstm_cell_step(std::span<const float>, std::span<const float>,
                                         std::span<const float>, const LstmCellParams<float>&);
template LstmState<double> lstm_cell_step(std::span<const double>, std::span<const double>,
                                          std::span<const double>, const LstmCellParams<double>&);

template <typename T>
std::vector<T> bilstm_forward(std::span<const T> features, int steps,
                              const LstmCellParams<T>& fwd, const LstmCellParams<T>& bwd,
                              OutputMode mode) {
  check_cell(fwd);
  check_cell(bwd);
  if (steps < 1) throw Error(Errc::shape_mismatch, "BiLSTM needs at least one step");
  if (fwd.input_dim != bwd.input_dim || fwd.hidden != bwd.hidden ||
      features.size() != static_cast<std::size_t>(steps) * fwd.input_dim) {
    throw Error(Errc::shape_mismatch, "BiLSTM feature matrix inconsistent with parameters");
  }
  const int H = fwd.hidden;
  const auto tf = run_lstm(features, steps, fwd, false);
  const auto tb = run_lstm(features, steps, bwd, true);
  if (mode == OutputMode::clip) {
    std::vector<T> out(tf.back().h);
    out.insert(out.end(), tb.back().h.begin(), tb.back().h.end());
    return out;
  }
  std::vector<T> out(static_cast<std::size_t>(steps) * 2 * H);
  for (int t = 0; t < steps; ++t) {
    T* row = out.data() + static_cast<std::size_t>(t) * 2 * H;
    std::copy(tf[t].h.begin(), tf[t].h.end(), row);
    // backward trace step s consumed row steps-1-s
    const auto& hb = tb[static_cast<std::size_t>(steps - 1 - t)].h;
    std::copy(hb.begin(), hb.end(), row + H);
  }
  return out;
}

template std::vector<float> bilstm_forward(std::span<const float>, int,
                                           const LstmCellParams<float>&,
                                           const LstmCellParams<float>&, OutputMode);
template std::vector<double> bilstm_forward(std::span<const double>, int,
                                            const LstmCellParams<double>&,
                                            const LstmCellParams<double>&, OutputMode);

// ---------------------------------------------------------------------------
// Head

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const T m = *std::max_element(p.begin(), p.end());
  T sum = 0;
  for (auto& v : p) {
    v = std::exp(v - m);
    sum += v;
  }
  for (auto& v : p) v /= sum;
  return p;
}

template std::vector<float> softmax(std::span<const float>);
template std::vector<double> softmax(std::span<const double>);

namespace {

template <typename T>
void draw_dropout_mask(std::vector<T>& mask, std::size_t n, double rate, Mode mode, Rng& rng) {
  mask.assign(n, T(1));
  if (mode == Mode::eval || rate <= 0.0) return;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask) m = rng.uniform() < rate ? T(0) : scale;
}

template <typename T>
struct HeadTrace {
  std::vector<std::vector<T>> inputs;  // input to each dense layer, then to the output layer
  std::vector<std::vector<T>> relu;    // post-ReLU, pre-dropout activation of each dense layer
  std::vector<std::vector<T>> masks;
  std::vector<T> probs;
};

template <typename T>
void dense(const T* W, const T* b, const std::vector<T>& in, int out_dim, std::vector<T>& out) {
  const auto n = in.size();
  out.resize(static_cast<std::size_t>(out_dim));
  for (int r = 0; r < out_dim; ++r) {
    T z = b[r];
    const T* w = W + static_cast<std::size_t>(r) * n;
    for (std::size_t k = 0; k < n; ++k) z += w[k] * in[k];
    out[static_cast<std::size_t>(r)] = z;
  }
}

template <typename T>
void head_run(std::span<const T> h, const ParamSet<T>& p, const ModelConfig& c, Mode mode,
              Rng& rng, HeadTrace<T>& tr, T* margin = nullptr) {
  const auto lay = layout_of(c);
  const auto nd = c.dense_units.size();
  tr.inputs.assign(nd + 1, {});
  tr.relu.assign(nd, {});
  tr.masks.assign(nd, {});
  tr.inputs[0].assign(h.begin(), h.end());
  for (std::size_t j = 0; j < nd; ++j) {
    auto& z = tr.relu[j];
    dense(p.tensors[lay.dense[j]].values.data(), p.tensors[lay.dense[j] + 1].values.data(),
          tr.inputs[j], c.dense_units[j], z);
    for (auto& v : z) {
      if (margin) *margin = std::min(*margin, std::abs(v));
      v = v > T(0) ? v : T(0);
    }
    draw_dropout_mask(tr.masks[j], z.size(), c.dropout_rate, mode, rng);
    auto& next = tr.inputs[j + 1];
    next.resize(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) next[k] = z[k] * tr.masks[j][k];
  }
  std::vector<T> logits;
  dense(p.tensors[lay.output].values.data(), p.tensors[lay.output + 1].values.data(),
        tr.inputs[nd], c.num_classes, logits);
  tr.probs = softmax<T>(logits);
}

// dlogits in, parameter gradients accumulated, returns dL/dh.
template <typename T>
std::vector<T> head_backward(const HeadTrace<T>& tr, const ParamSet<T>& p, const ModelConfig& c,
                             const std::vector<T>& dlogits, ParamSet<T>& g) {
  const auto lay = layout_of(c);
  auto back = [&](std::size_t widx, const std::vector<T>& in, const std::vector<T>& dz) {
    const auto n = in.size();
    std::vector<T> din(n, T(0));
    const T* W = p.tensors[widx].values.data();
    T* dW = g.tensors[widx].values.data();
    T* db = g.tensors[widx + 1].values.data();
    for (std::size_t r = 0; r < dz.size(); ++r) {
      db[r] += dz[r];
      for (std::size_t k = 0; k < n; ++k) {
        dW[r * n + k] += dz[r] * in[k];
        din[k] += dz[r] * W[r * n + k];
      }
    }
    return din;
  };
  const auto nd = c.dense_units.size();
  std::vector<T> d = back(lay.output, tr.inputs[nd], dlogits);
  for (std::size_t j = nd; j-- > 0;) {
    for (std::size_t k = 0; k < d.size(); ++k) {
      d[k] *= tr.masks[j][k];
      if (tr.relu[j][k] <= T(0)) d[k] = T(0);
    }
    d = back(lay.dense[j], tr.inputs[j], d);
  }
  return d;
}

}  // namespace

template <typename T>
std::vector<T> head_forward(std::span<const T> h, const ParamSet<T>& params,
                            const ModelConfig& config, Mode mode, Rng& rng) {
  check_params(config, params);
  if (h.size() != static_cast<std::size_t>(2 * config.lstm_units)) {
    throw Error(Errc::shape_mismatch, "head input width must be 2H");
  }
  HeadTrace<T> tr;
  head_run(h, params, config, mode, rng, tr);
  return tr.probs;
}

template std::vector<float> head_forward(std::span<const float>, const ParamSet<float>&,
                                         const ModelConfig&, Mode, Rng&);
template std::vector<double> head_forward(std::span<const double>, const ParamSet<double>&,
                                          const ModelConfig&, Mode, Rng&);

// ---------------------------------------------------------------------------
// Full model

namespace {

template <typename T>
struct ClipTrace {
  std::vector<FrameTrace<T>> frames;
  std::vector<T> features;  // pre-dropout, frames x D
  std::vector<T> mask;
  std::vector<T> lstm_in;
  std::vector<LstmStep<T>> fwd, bwd;
  HeadTrace<T> head;
};

template <typename T>
void forward_clip(const ClipTensor& clip, const ParamSet<T>& p, const ModelConfig& c,
                  const std::vector<ConvLayer>& layers, Mode mode, Rng& rng, ClipTrace<T>& tr,
                  T* margin = nullptr) {
  const int D = c.feature_dim();
  const auto TD = static_cast<std::size_t>(clip.frames) * D;
  tr.frames.resize(static_cast<std::size_t>(clip.frames));
  tr.features.assign(TD, T(0));
  for (int t = 0; t < clip.frames; ++t) {
    encode_frame(clip.frame(t), layers, p, tr.frames[static_cast<std::size_t>(t)],
                 tr.features.data() + static_cast<std::size_t>(t) * D, margin);
  }
  draw_dropout_mask(tr.mask, TD, c.dropout_rate, mode, rng);
  tr.lstm_in.resize(TD);
  for (std::size_t i = 0; i < TD; ++i) tr.lstm_in[i] = tr.features[i] * tr.mask[i];
  const auto fp = lstm_params(p, c, false), bp = lstm_params(p, c, true);
  tr.fwd = run_lstm<T>(tr.lstm_in, clip.frames, fp, false);
  tr.bwd = run_lstm<T>(tr.lstm_in, clip.frames, bp, true);
  std::vector<T> h(tr.fwd.back().h);
  h.insert(h.end(), tr.bwd.back().h.begin(), tr.bwd.back().h.end());
  head_run<T>(h, p, c, mode, rng, tr.head, margin);
}

}  // namespace

template <typename T>
std::vector<std::vector<T>> model_forward(std::span<const ClipTensor> batch,
                                          const ParamSet<T>& params, const ModelConfig& config,
                                          Mode mode, Rng& rng) {
  check_params(config, params);
  for (const auto& clip : batch) check_clip(clip, config);
  const auto layers = conv_layers(config);
  std::vector<std::vector<T>> out;
  out.reserve(batch.size());
  ClipTrace<T> tr;
  for (const auto& clip : batch) {
    forward_clip(clip, params, config, layers, mode, rng, tr);
    out.push_back(tr.head.probs);
  }
  return out;
}

template std::vector<std::vector<float>> model_forward(std::span<const ClipTensor>,
                                                       const ParamSet<float>&, const ModelConfig&,
                                                       Mode, Rng&);
template std::vector<std::vector<double>> model_forward(std::span<const ClipTensor>,
                                                        const ParamSet<double>&,
                                                        const ModelConfig&, Mode, Rng&);

template <typename T>
std::vector<std::vector<T>> frame_probabilities(const ClipTensor& clip, const ParamSet<T>& params,
                                                const ModelConfig& config) {
  const auto features = encoder_forward(clip, params, config);
  const auto seq = bilstm_forward<T>(features, clip.frames, lstm_params(params, config, false),
                                     lstm_params(params, config, true), OutputMode::sequence);
  const auto W = static_cast<std::size_t>(2 * config.lstm_units);
  Rng unused(0);
  std::vector<std::vector<T>> out;
  for (int t = 0; t < clip.frames; ++t) {
    out.push_back(head_forward<T>(std::span<const T>(seq).subspan(t * W, W), params, config,
                                  Mode::eval, unused));
  }
  return out;
}

template std::vector<std::vector<float>> frame_probabilities(const ClipTensor&,
                                                             const ParamSet<float>&,
                                                             const ModelConfig&);
template std::vector<std::vector<double>> frame_probabilities(const ClipTensor&,
                                                              const ParamSet<double>&,
                                                              const ModelConfig&);

template <typename T>
BackwardResult<T> model_backward(std::span<const ClipTensor> batch, std::span<const int> labels,
                                 const ParamSet<T>& params, const ModelConfig& config, Mode mode,
                                 Rng& rng) {
  check_params(config, params);
  if (batch.size() != labels.size() || batch.empty()) {
    throw Error(Errc::shape_mismatch, "batch and labels must be nonempty and equal in length");
  }
  for (const auto& clip : batch) check_clip(clip, config);
  for (int l : labels) {
    if (l < 0 || l >= config.num_classes) throw Error(Errc::bad_label, std::to_string(l));
  }
  const auto layers = conv_layers(config);
  const auto lay = layout_of(config);
  const int D = config.feature_dim();
  const int freeze = config.encoder.freeze_boundary;

  ParamSet<T> g_full;
  for (const auto& t : params.tensors) {
    g_full.tensors.push_back({t.name, t.shape, std::vector<T>(t.values.size(), T(0)), t.trainable});
  }

  BackwardResult<T> result;
  const T inv_batch = T(1) / static_cast<T>(batch.size());
  const auto fp = lstm_params(params, config, false), bp = lstm_params(params, config, true);
  ClipTrace<T> tr;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& clip = batch[b];
    forward_clip(clip, params, config, layers, mode, rng, tr);
    const auto& probs = tr.head.probs;
    result.probs.push_back(probs);
    const int y = labels[b];
    const T py = probs[static_cast<std::size_t>(y)];
    const auto floor = static_cast<T>(kProbabilityFloor);
    result.loss += -std::log(std::max(py, floor)) * inv_batch;

    // d/dz of -log(max(p_y, floor)); zero once the floor is active.
    std::vector<T> dlogits(probs.size(), T(0));
    if (py > floor) {
      for (std::size_t k = 0; k < probs.size(); ++k) {
        dlogits[k] = (probs[k] - (static_cast<int>(k) == y ? T(1) : T(0))) * inv_batch;
      }
    }
    const auto dh = head_backward(tr.head, params, config, dlogits, g_full);
    const auto H = static_cast<std::size_t>(config.lstm_units);

    std::vector<T> dlstm_in(tr.lstm_in.size(), T(0));
    lstm_backward<T>(tr.fwd, tr.lstm_in, fp, std::span<const T>(dh).subspan(0, H),
                     g_full.tensors[lay.lstm_fwd].values.data(),
                     g_full.tensors[lay.lstm_fwd + 1].values.data(),
                     g_full.tensors[lay.lstm_fwd + 2].values.data(), dlstm_in.data());
    lstm_backward<T>(tr.bwd, tr.lstm_in, bp, std::span<const T>(dh).subspan(H, H),
                     g_full.tensors[lay.lstm_bwd].values.data(),
                     g_full.tensors[lay.lstm_bwd + 1].values.data(),
                     g_full.tensors[lay.lstm_bwd + 2].values.data(), dlstm_in.data());

    if (freeze < config.encoder_stages()) {
      for (std::size_t i = 0; i < dlstm_in.size(); ++i) dlstm_in[i] *= tr.mask[i];
      for (int t = 0; t < clip.frames; ++t) {
        encode_frame_backward(tr.frames[static_cast<std::size_t>(t)], layers, params, freeze,
                              dlstm_in.data() + static_cast<std::size_t>(t) * D, g_full);
      }
    }
  }
  for (auto& t : g_full.tensors) {
    if (t.trainable) result.grads.tensors.push_back(std::move(t));
  }
  return result;
}

template BackwardResult<float> model_backward(std::span<const ClipTensor>, std::span<const int>,
                                              const ParamSet<float>&, const ModelConfig&, Mode,
                                              Rng&);
template BackwardResult<double> model_backward(std::span<const ClipTensor>, std::span<const int>,
                                               const ParamSet<double>&, const ModelConfig&, Mode,
                                               Rng&);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::filesystem::path& path) {
  check_params(config, params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::io_error, "cannot write " + path.string());
  out.write("CKPT", 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = to_json(config).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& t : params.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    out.put(t.trainable ? 1 : 0);
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    detail::put_f32_array(out, t.values);
  }
  if (!out) throw Error(Errc::io_error, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::checkpoint_missing, path.string());
  auto truncated = [&] { return Error(Errc::truncated_payload, path.string()); };
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "CKPT") {
    throw Error(Errc::bad_magic, path.string());
  }
  std::uint32_t version = 0, cfg_len = 0, count = 0;
  if (!detail::get_u32(in, version)) throw truncated();
  if (version != kCheckpointVersion) {
    throw Error(Errc::version_mismatch, "checkpoint version " + std::to_string(version));
  }
  if (!detail::get_u32(in, cfg_len) || cfg_len > (1u << 20)) throw truncated();
  std::string cfg(cfg_len, '\0');
  if (!in.read(cfg.data(), cfg_len)) throw truncated();
  Checkpoint ck;
  try {
    ck.config = config_from_json(json::parse(cfg));
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("checkpoint config: ") + e.what());
  }
  if (!detail::get_u32(in, count)) throw truncated();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0, rank = 0;
    if (!detail::get_u32(in, name_len) || name_len > 4096) throw truncated();
    NamedTensor<float> t;
    t.name.resize(name_len);
    if (!in.read(t.name.data(), name_len)) throw truncated();
    const int flag = in.get();
    if (flag == EOF) throw truncated();
    t.trainable = flag != 0;
    if (!detail::get_u32(in, rank) || rank > 8) throw truncated();
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint32_t d = 0;
      if (!detail::get_u32(in, d)) throw truncated();
      t.shape.push_back(static_cast<int>(d));
      n *= d;
    }
    t.values.resize(n);
    if (!detail::get_f32_array(in, t.values)) throw truncated();
    ck.params.tensors.push_back(std::move(t));
  }
  return ck;
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  auto ck = load_checkpoint(path);
  check_params(expected, ck.params);
  return std::move(ck.params);
}


double relu_margin(std::span<const ClipTensor> batch, const ParamSet<double>& params,
                   const ModelConfig& config, Mode mode, const Rng& rng) {
  check_params(config, params);
  for (const auto& clip : batch) check_clip(clip, config);
  const auto layers = conv_layers(config);
  Rng r = rng;
  double margin = std::numeric_limits<double>::infinity();
  ClipTrace<double> tr;
  for (const auto& clip : batch) forward_clip(clip, params, config, layers, mode, r, tr, &margin);
  return margin;
}

GradCheckReport gradient_check(std::span<const ClipTensor> batch, std::span<const int> labels,
                               const ParamSet<double>& params, const ModelConfig& config,
                               Mode mode, const Rng& rng, double eps) {
  Rng r = rng;
  const auto analytic = model_backward(batch, labels, params, config, mode, r);
  auto loss_at = [&](const ParamSet<double>& p) {
    Rng replay = rng;
    return model_backward(batch, labels, p, config, mode, replay).loss;
  };
  GradCheckReport report;
  report.relu_margin = relu_margin(batch, params, config, mode, rng);
  ParamSet<double> probe = params;
  for (const auto& g : analytic.grads.tensors) {
    auto& values = probe.at(g.name).values;
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss_at(probe);
      values[i] = saved - eps;
      const double down = loss_at(probe);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = g.values[i];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
      ++report.checked;
    }
    report.per_tensor.emplace_back(g.name, worst);
    if (worst >= report.max_rel_error) {
      report.max_rel_error = worst;
      report.worst_tensor = g.name;
    }
  }
  return report;
}

}  // namespace clipforge::nn
