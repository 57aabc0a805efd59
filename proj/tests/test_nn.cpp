#include <doctest.h>

#include <cmath>
#include <fstream>

#include "clipforge/error.hpp"
#include "clipforge/nn.hpp"
#include "test_util.hpp"

using namespace clipforge;
using namespace clipforge::nn;

namespace {

std::vector<ClipTensor> tiny_batch(Rng& rng, const ModelConfig& c, int n) {
  std::vector<ClipTensor> batch;
  for (int i = 0; i < n; ++i) {
    batch.push_back(testutil::random_clip(rng, c.seq_len, c.image_h, c.image_w, c.channels));
  }
  return batch;
}

std::vector<double> reversed_rows(const std::vector<double>& x, int steps, int width) {
  std::vector<double> out(x.size());
  for (int t = 0; t < steps; ++t) {
    std::copy_n(x.begin() + t * width, width, out.begin() + (steps - 1 - t) * width);
  }
  return out;
}

// Zero biases put ReLU inputs exactly on the kink wherever a whole input
// patch is dead, and central differences there see half a derivative.
ParamSet<double> off_kink(ParamSet<double> p, Rng& rng) {
  for (auto& t : p.tensors) {
    if (t.shape.size() == 1) {
      for (auto& v : t.values) v += rng.uniform(-0.1, 0.1);
    }
  }
  return p;
}

}  // namespace

TEST_CASE("default config parameter count") {
  const ModelConfig c;
  const auto counts = count_params(c);
  // encoder 224 + 224 + 704 + 2432, BiLSTM 2 * 4 * 32 * (64 + 32 + 1), head 4160 + 2080 + 66
  CHECK(counts.total == 34722);
  CHECK(counts.trainable == 34722);
  CHECK(counts.non_trainable == 0);

  Rng rng(1);
  CHECK(init_params<float>(c, rng).value_count() == 34722u);
}

TEST_CASE("freeze boundary moves encoder stages to non-trainable") {
  ModelConfig c;
  c.encoder.freeze_boundary = 2;  // stem and first block
  const auto counts = count_params(c);
  CHECK(counts.non_trainable == 224 + 224);
  CHECK(counts.trainable + counts.non_trainable == 34722);

  c.encoder.freeze_boundary = 5;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("config json round trip") {
  ModelConfig c = ModelConfig::tiny();
  c.dropout_rate = 0.1;
  c.encoder.freeze_boundary = 1;
  CHECK(config_from_json(to_json(c)) == c);
}

TEST_CASE("gradients match central differences in the tiny config") {
  const auto c = ModelConfig::tiny();
  Rng rng(1);
  const auto params = off_kink(init_params<double>(c, rng), rng);
  const auto batch = tiny_batch(rng, c, 3);
  const std::vector<int> labels{1, 0, 1};

  SUBCASE("train mode, dropout masks replayed") {
    const auto report = gradient_check(batch, labels, params, c, Mode::train, Rng(99));
    CHECK(report.checked == params.value_count());
    REQUIRE(report.relu_margin > 1e-4);
    INFO("worst tensor: " << report.worst_tensor);
    CHECK(report.max_rel_error < 1e-4);
  }
  SUBCASE("eval mode") {
    const auto report = gradient_check(batch, labels, params, c, Mode::eval, Rng(0));
    REQUIRE(report.relu_margin > 1e-4);
    INFO("worst tensor: " << report.worst_tensor);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("frozen stages get no gradient and block backprop below the boundary") {
  auto c = ModelConfig::tiny();
  c.encoder.freeze_boundary = 1;
  Rng rng(3);
  const auto params = off_kink(init_params<double>(c, rng), rng);
  const auto batch = tiny_batch(rng, c, 2);
  const std::vector<int> labels{0, 1};
  Rng r(5);
  const auto result = model_backward(batch, labels, params, c, Mode::train, r);
  CHECK(result.grads.find("encoder.stem.kernel") == nullptr);
  CHECK(result.grads.find("encoder.block0.depthwise.kernel") != nullptr);
  const auto report = gradient_check(batch, labels, params, c, Mode::train, Rng(5));
  REQUIRE(report.relu_margin > 1e-4);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("loss is the mean clipped cross-entropy of the returned probabilities") {
  const auto c = ModelConfig::tiny();
  Rng rng(11);
  const auto params = init_params<double>(c, rng);
  const auto batch = tiny_batch(rng, c, 4);
  const std::vector<int> labels{0, 1, 1, 0};
  Rng r(0);
  const auto result = model_backward(batch, labels, params, c, Mode::eval, r);
  double expected = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    expected -= std::log(std::max(result.probs[i][labels[i]], kProbabilityFloor));
  }
  CHECK(result.loss == doctest::Approx(expected / 4).epsilon(1e-12));
}

TEST_CASE("BiLSTM backward direction is the forward recurrence on the reversed sequence") {
  Rng rng(21);
  const int steps = 5, D = 4, H = 3;
  auto draw = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const auto Wf = draw(4 * H * D), Uf = draw(4 * H * H), bf = draw(4 * H);
    const auto Wb = draw(4 * H * D), Ub = draw(4 * H * H), bb = draw(4 * H);
    const auto x = draw(steps * D);
    LstmCellParams<double> fwd{Wf, Uf, bf, D, H}, bwd{Wb, Ub, bb, D, H};

    const auto seq = bilstm_forward<double>(x, steps, fwd, bwd, OutputMode::sequence);
    const auto xr = reversed_rows(x, steps, D);
    const auto rev = bilstm_forward<double>(xr, steps, bwd, fwd, OutputMode::sequence);
    for (int t = 0; t < steps; ++t) {
      for (int k = 0; k < H; ++k) {
        CHECK(seq[t * 2 * H + H + k] == doctest::Approx(rev[(steps - 1 - t) * 2 * H + k]).epsilon(1e-12));
      }
    }
    const auto clip = bilstm_forward<double>(x, steps, fwd, bwd, OutputMode::clip);
    REQUIRE(clip.size() == static_cast<std::size_t>(2 * H));
    for (int k = 0; k < H; ++k) {
      CHECK(clip[k] == seq[(steps - 1) * 2 * H + k]);
      CHECK(clip[H + k] == seq[H + k]);
    }
  }
}

TEST_CASE("LSTM cell step by hand") {
  // D = 1, H = 1, gate rows i, f, o, g
  const std::vector<double> W{0.5, -0.25, 1.0, 0.75}, U{0.1, 0.2, -0.3, 0.4}, b{0.0, 1.0, 0.0, -0.5};
  const std::vector<double> x{2.0}, h{0.5}, c{-1.0};
  const auto s = lstm_cell_step<double>(x, h, c, {W, U, b, 1, 1});
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  const double i = sig(1.0 + 0.05), f = sig(-0.5 + 0.1 + 1.0), o = sig(2.0 - 0.15),
               g = std::tanh(1.5 + 0.2 - 0.5);
  const double cn = f * -1.0 + i * g;
  CHECK(s.c[0] == doctest::Approx(cn).epsilon(1e-14));
  CHECK(s.h[0] == doctest::Approx(o * std::tanh(cn)).epsilon(1e-14));
}

TEST_CASE("softmax sums to one and survives large logits") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> z(2 + rng.below(6));
    for (auto& v : z) v = rng.uniform(-500, 500);
    const auto p = softmax<double>(z);
    double sum = 0;
    for (double v : p) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("eval mode is deterministic and ignores the dropout generator") {
  const auto c = ModelConfig::tiny();
  Rng rng(4);
  const auto params = init_params<float>(c, rng);
  const auto batch = tiny_batch(rng, c, 3);
  Rng a(1), b(2);
  CHECK(model_forward<float>(batch, params, c, Mode::eval, a) ==
        model_forward<float>(batch, params, c, Mode::eval, b));

  auto c0 = c;
  c0.dropout_rate = 0.0;
  Rng d(3), e(4);
  CHECK(model_forward<float>(batch, params, c0, Mode::train, d) ==
        model_forward<float>(batch, params, c0, Mode::eval, e));
}

TEST_CASE("train mode dropout depends on the generator state") {
  const auto c = ModelConfig::tiny();
  Rng rng(4);
  const auto params = init_params<double>(c, rng);
  const auto batch = tiny_batch(rng, c, 2);
  Rng a(10), a2(10), b(11);
  const auto pa = model_forward<double>(batch, params, c, Mode::train, a);
  CHECK(pa == model_forward<double>(batch, params, c, Mode::train, a2));
  CHECK(pa != model_forward<double>(batch, params, c, Mode::train, b));
}

TEST_CASE("clip shape is checked against the config") {
  const auto c = ModelConfig::tiny();
  Rng rng(4);
  const auto params = init_params<float>(c, rng);
  std::vector<ClipTensor> batch{testutil::random_clip(rng, 3, 8, 8)};
  Rng r(0);
  try {
    model_forward<float>(batch, params, c, Mode::eval, r);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
}

TEST_CASE("frame probabilities come from the sequence output") {
  const auto c = ModelConfig::tiny();
  Rng rng(8);
  const auto params = init_params<double>(c, rng);
  const auto clip = testutil::random_clip(rng, c.seq_len, c.image_h, c.image_w);
  const auto rows = frame_probabilities(clip, params, c);
  REQUIRE(rows.size() == 2u);
  // the last frame's forward state and the first frame's backward state form
  // the clip vector, so no row has to equal the clip output; rows still sum to 1
  for (const auto& r : rows) CHECK(r[0] + r[1] == doctest::Approx(1.0));
}

TEST_CASE("encoder calibration gives a fixed point") {
  const ModelConfig c;
  Rng rng(5);
  auto params = init_params<float>(c, rng);
  std::vector<ClipTensor> sample{testutil::random_clip(rng, 16, 64, 64),
                                 testutil::random_clip(rng, 16, 64, 64)};
  calibrate_encoder(params, c, sample);
  const auto once = params;
  calibrate_encoder(params, c, sample);
  for (std::size_t t = 0; t < params.tensors.size(); ++t) {
    for (std::size_t i = 0; i < params.tensors[t].values.size(); ++i) {
      CHECK(params.tensors[t].values[i] ==
            doctest::Approx(once.tensors[t].values[i]).epsilon(1e-4));
    }
  }
  const auto features = encoder_forward(sample[0], params, c);
  double sumsq = 0;
  for (float v : features) sumsq += v * v;
  CHECK(sumsq > 0.0);
}

TEST_CASE("checkpoint round trip and failure modes") {
  testutil::TempDir dir("ckpt");
  const auto c = ModelConfig::tiny();
  Rng rng(6);
  const auto params = init_params<float>(c, rng);
  const auto path = dir / "model.ckpt";
  save_checkpoint(params, c, path);

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.config == c);
  CHECK(loaded.params == params);
  CHECK(load_checkpoint(path, c) == params);

  auto expect_code = [](Errc code, auto&& fn) {
    try {
      fn();
      FAIL("expected " << to_string(code));
    } catch (const Error& e) {
      CHECK(e.code() == code);
    }
  };

  SUBCASE("missing file") {
    expect_code(Errc::checkpoint_missing, [&] { load_checkpoint(dir / "nope.ckpt"); });
  }
  SUBCASE("truncated") {
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 3);
    expect_code(Errc::truncated_payload, [&] { load_checkpoint(path); });
  }
  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
    f.close();
    expect_code(Errc::bad_magic, [&] { load_checkpoint(path); });
  }
  SUBCASE("config mismatch names the tensor") {
    auto other = c;
    other.lstm_units = 4;
    try {
      load_checkpoint(path, other);
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::shape_mismatch);
      CHECK(std::string(e.what()).find("bilstm.forward.W") != std::string::npos);
    }
  }
  SUBCASE("missing tensor") {
    auto partial = params;
    partial.tensors.erase(partial.tensors.begin() + 7);  // bilstm.forward.U
    try {
      check_params(c, partial);
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("bilstm.forward.U") != std::string::npos);
    }
  }
}

TEST_CASE("zero encoder weights give zero features") {
  const auto c = ModelConfig::tiny();
  Rng rng(11);
  auto p = init_params<double>(c, rng);
  for (auto& t : p.tensors) {
    if (t.name.rfind("encoder.", 0) == 0) std::fill(t.values.begin(), t.values.end(), 0.0);
  }
  const auto f = encoder_forward(testutil::random_clip(rng, c.seq_len, c.image_h, c.image_w), p, c);
  CHECK(f.size() == static_cast<std::size_t>(c.seq_len * c.feature_dim()));
  for (double v : f) CHECK(v == 0.0);
}

TEST_CASE("encoder is applied frame by frame") {
  auto c = ModelConfig::tiny();
  c.seq_len = 4;
  Rng rng(12);
  const auto p = init_params<double>(c, rng);
  const auto clip = testutil::random_clip(rng, c.seq_len, c.image_h, c.image_w);
  const int perm[] = {2, 0, 3, 1};
  auto shuffled = clip;
  const auto frame = static_cast<std::size_t>(c.image_h * c.image_w * c.channels);
  for (int t = 0; t < c.seq_len; ++t) {
    std::copy_n(clip.data.begin() + static_cast<long>(perm[t] * frame), frame,
                shuffled.data.begin() + static_cast<long>(t * frame));
  }
  const auto a = encoder_forward(clip, p, c);
  const auto b = encoder_forward(shuffled, p, c);
  const int d = c.feature_dim();
  for (int t = 0; t < c.seq_len; ++t) {
    for (int k = 0; k < d; ++k) CHECK(b[t * d + k] == a[perm[t] * d + k]);
  }
}

TEST_CASE("zero head gives even odds, duplicates give duplicate rows") {
  const auto c = ModelConfig::tiny();
  Rng rng(13);
  auto p = init_params<double>(c, rng);
  auto batch = tiny_batch(rng, c, 2);
  batch.push_back(batch[0]);
  const auto rows = model_forward<double>(batch, p, c, Mode::eval, rng);
  CHECK(rows[2] == rows[0]);
  for (auto& t : p.tensors) {
    if (t.name.rfind("head.output", 0) == 0) std::fill(t.values.begin(), t.values.end(), 0.0);
  }
  for (const auto& r : model_forward<double>(batch, p, c, Mode::eval, rng)) {
    CHECK(r[0] == 0.5);
    CHECK(r[1] == 0.5);
  }
}

TEST_CASE("trainable and frozen counts add up") {
  for (int boundary = 0; boundary <= 4; ++boundary) {
    ModelConfig c;
    c.encoder.freeze_boundary = boundary;
    const auto n = count_params(c);
    CHECK(n.trainable + n.non_trainable == n.total);
  }
}
