#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "synthetic.hpp"
#include "tsal/encoders.hpp"
#include "tsal/tensor_io.hpp"

using namespace tsal;
using namespace tsal::testing;

namespace {

TangentStack constant_stack(int frames, int views, int patch, float value) {
  TangentStack s;
  s.frames = frames;
  s.views = views;
  s.channels = 3;
  s.patch = patch;
  s.data.assign(static_cast<std::size_t>(frames) * views * 3 * patch * patch, value);
  return s;
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  return d / std::sqrt(na * nb);
}

std::filesystem::path scratch(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "tsal_encoders";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("visual features have the three local scales") {
  EncoderConfig cfg;
  cfg.scale_channels = {8, 8, 8};
  cfg.global_dim = 16;
  ToyEncoder enc(cfg);
  Rng rng(3);
  auto stack = constant_stack(1, 2, 224, 0.0f);
  for (auto& v : stack.data) v = static_cast<float>(rng.uniform());
  const auto f = enc.encode_visual(stack);
  CHECK(f.global_visual.shape() == Shape{1, 2, 16});
  CHECK(f.local_visual[0].shape() == Shape{1, 2, 8, 28, 28});
  CHECK(f.local_visual[1].shape() == Shape{1, 2, 8, 14, 14});
  CHECK(f.local_visual[2].shape() == Shape{1, 2, 8, 7, 7});
}

TEST_CASE("patch size must be a multiple of 32") {
  EncoderConfig cfg;
  cfg.patch = 200;
  CHECK_THROWS_AS(ToyEncoder{cfg}, ConfigError);
  cfg.patch = 0;
  CHECK_THROWS_AS(ToyEncoder{cfg}, ConfigError);
}

TEST_CASE("identical tangent images give identical feature columns") {
  const auto cfg = tiny_encoder();
  ToyEncoder enc(cfg);
  Rng rng(5);
  auto stack = constant_stack(2, 3, 32, 0.0f);
  const std::size_t img = 3 * 32 * 32;
  for (std::size_t i = 0; i < img; ++i) stack.data[i] = static_cast<float>(rng.uniform());
  // copy image (0,0) into (1,2)
  std::copy(stack.data.begin(), stack.data.begin() + img, stack.data.begin() + 5 * img);
  const auto f = enc.encode_visual(stack);
  const std::size_t cg = cfg.global_dim;
  for (std::size_t c = 0; c < cg; ++c) CHECK(f.global_visual.data()[c] == f.global_visual.data()[5 * cg + c]);
  for (int m = 0; m < kNumScales; ++m) {
    const auto& v = f.local_visual[m];
    const std::size_t per = v.numel() / 6;
    CHECK(std::equal(v.data().begin(), v.data().begin() + per, v.data().begin() + 5 * per));
  }
  // and a second call reproduces everything
  const auto g = enc.encode_visual(stack);
  CHECK(std::equal(f.global_visual.data().begin(), f.global_visual.data().end(), g.global_visual.data().begin()));
}

TEST_CASE("zero and one inputs give distinct global features") {
  ToyEncoder enc(tiny_encoder());
  const auto z = enc.encode_visual(constant_stack(1, 1, 32, 0.0f)).global_visual;
  const auto o = enc.encode_visual(constant_stack(1, 1, 32, 1.0f)).global_visual;
  double diff = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) diff += std::abs(z.data()[i] - o.data()[i]);
  CHECK(diff > 1e-3);
}

TEST_CASE("cell statistics of a constant cell") {
  auto s = constant_stack(1, 1, 32, 0.25f);
  std::vector<double> out(cell_stat_dim(3));
  cell_statistics(s, 0, 0, 8, 8, 8, out);
  for (int c = 0; c < 3; ++c) {
    CHECK(out[2 * c] == doctest::Approx(0.25));
    CHECK(out[2 * c + 1] == doctest::Approx(0.0));
  }
  for (int b = 0; b < 4; ++b) CHECK(out[6 + b] == 0.0);
  CHECK(out[10] == 1.0);
}

TEST_CASE("cell gradient histogram of a horizontal ramp lands in the first bin") {
  auto s = constant_stack(1, 1, 32, 0.0f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) s.data[s.offset(0, 0, c, y, x)] = x / 32.0f;
  std::vector<double> out(cell_stat_dim(3));
  cell_statistics(s, 0, 0, 8, 8, 8, out);
  CHECK(out[6] == doctest::Approx(2.0 / 32.0));
  CHECK(out[7] == 0.0);
  CHECK(out[8] == 0.0);
  CHECK(out[9] == 0.0);
}

TEST_CASE("text features with default config") {
  ToyEncoder enc(EncoderConfig{});
  const auto t = enc.encode_text("a grey cat sitting on a sofa");
  CHECK(t.local_text.shape() == Shape{77, 1024});
  CHECK(t.global_text.shape() == Shape{1, 1024});
  double n = 0;
  for (float v : t.global_text.data()) n += double(v) * v;
  CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("text features are deterministic and prompt dependent") {
  ToyEncoder enc(tiny_encoder());
  const auto a = enc.encode_text("grey cat");
  const auto b = enc.encode_text("grey cat");
  const auto c = enc.encode_text("orange cat");
  CHECK(std::equal(a.local_text.data().begin(), a.local_text.data().end(), b.local_text.data().begin()));
  CHECK(std::equal(a.global_text.data().begin(), a.global_text.data().end(), b.global_text.data().begin()));
  CHECK(cosine(a.global_text.data(), c.global_text.data()) < 1.0 - 1e-6);
  CHECK_THROWS_AS(enc.encode_text(""), Error);
}

TEST_CASE("global text feature is the normalized mean of token rows") {
  const auto cfg = tiny_encoder();
  ToyEncoder enc(cfg);
  const auto t = enc.encode_text("Two Birds, singing!");
  CHECK(ToyEncoder::tokenize("Two Birds, singing!") == std::vector<std::string>{"two", "birds", "singing"});
  const std::size_t C = cfg.global_dim;
  std::vector<double> mean(C, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < C; ++c) mean[c] += t.local_text.data()[i * C + c];
  double n = 0;
  for (double v : mean) n += v * v;
  for (std::size_t c = 0; c < C; ++c)
    CHECK(t.global_text.data()[c] == doctest::Approx(mean[c] / std::sqrt(n)).epsilon(1e-6));
  // padding rows are identical to each other
  for (std::size_t i = 4; i < static_cast<std::size_t>(cfg.text_length); ++i)
    for (std::size_t c = 0; c < C; ++c) CHECK(t.local_text.data()[i * C + c] == t.local_text.data()[3 * C + c]);
}

TEST_CASE("long text is truncated to the token length") {
  const auto cfg = tiny_encoder();
  ToyEncoder enc(cfg);
  const auto t = enc.encode_text("one two three four five six seven eight nine ten");
  CHECK(t.local_text.dim(0) == static_cast<std::size_t>(cfg.text_length));
  const auto u = enc.encode_text("one two three four five six");
  CHECK(std::equal(t.local_text.data().begin(), t.local_text.data().end(), u.local_text.data().begin()));
}

TEST_CASE("feature file round trip is bit exact") {
  const auto model = tiny_model();
  const auto data = two_prompt_dataset(model, tiny_encoder(), 1, 4);
  const auto& b = data[0].features;
  const auto path = scratch("bundle.tsft");
  save_features(path, b);
  const auto back = load_features(path);
  auto same = [](const Tensor& x, const Tensor& y) {
    return x.shape() == y.shape() && std::equal(x.data().begin(), x.data().end(), y.data().begin());
  };
  CHECK(same(back.global_visual, b.global_visual));
  for (int m = 0; m < kNumScales; ++m) CHECK(same(back.local_visual[m], b.local_visual[m]));
  CHECK(same(back.global_text, b.global_text));
  CHECK(same(back.local_text, b.local_text));
}

TEST_CASE("feature file errors are distinct") {
  const auto model = tiny_model();
  const auto data = two_prompt_dataset(model, tiny_encoder(), 1, 4);
  const auto& b = data[0].features;
  const auto path = scratch("bad.tsft");

  save_features(path, b);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  CHECK_THROWS_AS(load_features(path), TruncatedFileError);

  // V_L1 with the wrong spatial size
  std::vector<NamedTensor> recs{{"V_G", b.global_visual},
                                {"V_L0", b.local_visual[0]},
                                {"V_L1", b.local_visual[0]},
                                {"V_L2", b.local_visual[2]},
                                {"T_G", b.global_text},
                                {"T_L", b.local_text}};
  write_feature_file(path, recs);
  CHECK_THROWS_AS(load_features(path), ShapeMismatchError);

  // T_L width disagreeing with C_G
  recs[2].tensor = b.local_visual[1];
  recs[5].tensor = Tensor({6, 5}, 0.0f);
  write_feature_file(path, recs);
  CHECK_THROWS_AS(load_features(path), ShapeMismatchError);

  recs.pop_back();
  write_feature_file(path, recs);
  CHECK_THROWS_AS(load_features(path), ShapeMismatchError);

  try {
    load_features(path);
  } catch (const TruncatedFileError&) {
    FAIL("missing tensor reported as truncation");
  } catch (const ShapeMismatchError&) {
  }
}
