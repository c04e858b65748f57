#include "tsal/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "tsal/random.hpp"
#include "tsal/tensor_io.hpp"

namespace tsal {

void EncoderConfig::validate() const {
  if (global_dim <= 0) throw ConfigError("encoder global_dim must be positive");
  for (int c : scale_channels)
    if (c <= 0) throw ConfigError("encoder scale channels must be positive");
  if (text_length <= 0) throw ConfigError("encoder text_length must be positive");
  if (patch <= 0 || patch % 32 != 0)
    throw ConfigError("patch size " + std::to_string(patch) + " is not divisible by 32");
}

std::uint64_t EncoderConfig::hash() const {
  std::uint64_t h = fnv1a(&global_dim, sizeof global_dim);
  h = fnv1a(scale_channels.data(), sizeof(int) * scale_channels.size(), h);
  h = fnv1a(&text_length, sizeof text_length, h);
  h = fnv1a(&patch, sizeof patch, h);
  return fnv1a(&seed, sizeof seed, h);
}

void FeatureBundle::validate() const {
  auto fail = [](const std::string& msg) { throw ShapeMismatchError("feature bundle: " + msg); };
  if (!global_visual.defined() || !global_text.defined() || !local_text.defined())
    fail("missing tensors");
  if (global_visual.rank() != 3) fail("V_G must be (F,T,C_G), got " + shape_str(global_visual.shape()));
  const std::size_t f = global_visual.dim(0), t = global_visual.dim(1), cg = global_visual.dim(2);
  std::size_t base = 0;
  for (int m = 0; m < kNumScales; ++m) {
    const Tensor& v = local_visual[m];
    const std::string name = "V_L" + std::to_string(m);
    if (!v.defined()) fail(name + " missing");
    if (v.rank() != 5) fail(name + " must be rank 5, got " + shape_str(v.shape()));
    if (v.dim(0) != f || v.dim(1) != t)
      fail(name + " " + shape_str(v.shape()) + " disagrees with V_G " + shape_str(global_visual.shape()));
    if (v.dim(3) != v.dim(4)) fail(name + " is not square: " + shape_str(v.shape()));
    if (m == 0) {
      base = v.dim(3);
      if (base % 4 != 0) fail("V_L0 spatial size " + std::to_string(base) + " is not divisible by 4");
    } else if (v.dim(3) != base >> m) {
      fail(name + " spatial size " + std::to_string(v.dim(3)) + ", expected " + std::to_string(base >> m));
    }
  }
  if (global_text.rank() != 2 || global_text.dim(0) != 1 || global_text.dim(1) != cg)
    fail("T_G must be (1," + std::to_string(cg) + "), got " + shape_str(global_text.shape()));
  if (local_text.rank() != 2 || local_text.dim(1) != cg)
    fail("T_L must be (L_t," + std::to_string(cg) + "), got " + shape_str(local_text.shape()));
}

std::size_t cell_stat_dim(int channels) { return 2 * static_cast<std::size_t>(channels) + 5; }

void cell_statistics(const TangentStack& stack, int f, int t, int y0, int x0, int size,
                     std::span<double> out) {
  const int ch = stack.channels;
  const double n = static_cast<double>(size) * size;
  for (int c = 0; c < ch; ++c) {
    double s = 0.0, s2 = 0.0;
    for (int y = y0; y < y0 + size; ++y)
      for (int x = x0; x < x0 + size; ++x) {
        const double v = stack.at(f, t, c, y, x);
        s += v;
        s2 += v * v;
      }
    const double m = s / n;
    out[2 * c] = m;
    out[2 * c + 1] = std::sqrt(std::max(0.0, s2 / n - m * m));
  }
  // gradient orientation histogram of the channel-mean image
  auto gray = [&](int y, int x) {
    y = std::clamp(y, 0, stack.patch - 1);
    x = std::clamp(x, 0, stack.patch - 1);
    double g = 0.0;
    for (int c = 0; c < ch; ++c) g += stack.at(f, t, c, y, x);
    return g / ch;
  };
  double hist[4] = {0, 0, 0, 0};
  for (int y = y0; y < y0 + size; ++y)
    for (int x = x0; x < x0 + size; ++x) {
      const double gx = gray(y, x + 1) - gray(y, x - 1);
      const double gy = gray(y + 1, x) - gray(y - 1, x);
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double a = std::atan2(gy, gx);
      if (a < 0) a += kPi;
      const int bin = std::min(3, static_cast<int>(a / (kPi / 4)));
      hist[bin] += mag;
    }
  for (int b = 0; b < 4; ++b) out[2 * ch + b] = hist[b] / n;
  out[2 * ch + 4] = 1.0;
}

namespace {

std::vector<float> projection(std::uint64_t seed, std::size_t rows, std::size_t cols) {
  Rng rng(seed);
  std::vector<float> w(rows * cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(cols));
  for (auto& v : w) v = static_cast<float>(rng.normal() * s);
  return w;
}

std::uint64_t mix(std::uint64_t h, const std::string& tag) { return fnv1a(tag.data(), tag.size(), h); }

}  // namespace

ToyEncoder::ToyEncoder(EncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

VisualFeatures ToyEncoder::encode_visual(const TangentStack& stack) const {
  if (stack.patch != cfg_.patch)
    throw ShapeError("encode_visual: stack patch " + std::to_string(stack.patch) +
                     " differs from encoder patch " + std::to_string(cfg_.patch));
  const std::size_t F = stack.frames, T = stack.views;
  const std::size_t d = cell_stat_dim(stack.channels);
  const std::uint64_t h = cfg_.hash();
  VisualFeatures out;

  auto project_cells = [&](std::size_t channels, int cells, const std::vector<float>& w,
                           std::vector<float>& dst) {
    const int size = stack.patch / cells;
    const std::size_t hw = static_cast<std::size_t>(cells) * cells;
    parallel_for(F * T, [&](std::size_t ft) {
      const int f = static_cast<int>(ft / T), t = static_cast<int>(ft % T);
      std::vector<double> stats(d);
      for (int cy = 0; cy < cells; ++cy)
        for (int cx = 0; cx < cells; ++cx) {
          cell_statistics(stack, f, t, cy * size, cx * size, size, stats);
          const std::size_t cell = static_cast<std::size_t>(cy) * cells + cx;
          for (std::size_t c = 0; c < channels; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += w[c * d + k] * stats[k];
            dst[(ft * channels + c) * hw + cell] = static_cast<float>(acc);
          }
        }
    });
  };

  {
    const std::size_t cg = cfg_.global_dim;
    std::vector<float> v(F * T * cg);
    project_cells(cg, 1, projection(mix(h, "global"), cg, d), v);
    out.global_visual = Tensor({F, T, cg}, std::move(v));
  }
  for (int m = 0; m < kNumScales; ++m) {
    const std::size_t cm = cfg_.scale_channels[m];
    const int cells = cfg_.scale_size(m);
    const std::size_t hw = static_cast<std::size_t>(cells) * cells;
    std::vector<float> v(F * T * cm * hw);
    project_cells(cm, cells, projection(mix(h, "local" + std::to_string(m)), cm, d), v);
    out.local_visual[m] =
        Tensor({F, T, cm, static_cast<std::size_t>(cells), static_cast<std::size_t>(cells)}, std::move(v));
  }
  return out;
}

std::vector<std::string> ToyEncoder::tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  if (tokens.empty()) tokens.push_back(text);
  return tokens;
}

std::vector<float> ToyEncoder::token_embedding(const std::string& token) const {
  return projection(mix(cfg_.hash(), "token:" + token), 1, cfg_.global_dim);
}

TextFeatures ToyEncoder::encode_text(const std::string& text) const {
  if (text.empty()) throw Error("encode_text: empty text");
  const std::size_t L = cfg_.text_length, C = cfg_.global_dim;
  auto tokens = tokenize(text);
  if (tokens.size() > L) tokens.resize(L);
  std::vector<float> local(L * C);
  std::vector<double> mean(C, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto e = token_embedding(tokens[i]);
    for (std::size_t c = 0; c < C; ++c) {
      local[i * C + c] = e[c];
      mean[c] += e[c];
    }
  }
  const auto pad = token_embedding("<pad>");
  for (std::size_t i = tokens.size(); i < L; ++i)
    std::copy(pad.begin(), pad.end(), local.begin() + static_cast<std::ptrdiff_t>(i * C));
  double norm = 0.0;
  for (double v : mean) norm += v * v;
  norm = std::sqrt(norm);
  std::vector<float> global(C);
  for (std::size_t c = 0; c < C; ++c) global[c] = static_cast<float>(norm > 0 ? mean[c] / norm : 0.0);
  return {Tensor({1, C}, std::move(global)), Tensor({L, C}, std::move(local))};
}

FeatureBundle ToyEncoder::encode(const TangentStack& stack, const std::string& text) const {
  auto v = encode_visual(stack);
  auto t = encode_text(text);
  FeatureBundle b{v.global_visual, v.local_visual, t.global_text, t.local_text};
  b.validate();
  return b;
}

namespace {
const char* const kFeatureNames[] = {"V_G", "V_L0", "V_L1", "V_L2", "T_G", "T_L"};
}

FeatureBundle load_features(const std::filesystem::path& path) {
  auto records = read_feature_records(path);
  std::map<std::string, Tensor> byname;
  for (auto& r : records) {
    if (!byname.emplace(r.name, r.tensor).second)
      throw FormatError(path.string() + ": duplicate tensor " + r.name);
  }
  for (const char* n : kFeatureNames)
    if (!byname.count(n)) throw ShapeMismatchError(path.string() + ": missing tensor " + n);
  FeatureBundle b;
  b.global_visual = byname["V_G"];
  for (int m = 0; m < kNumScales; ++m) b.local_visual[m] = byname["V_L" + std::to_string(m)];
  b.global_text = byname["T_G"];
  b.local_text = byname["T_L"];
  try {
    b.validate();
  } catch (const ShapeMismatchError& e) {
    throw ShapeMismatchError(path.string() + ": " + e.what());
  }
  return b;
}

void save_features(const std::filesystem::path& path, const FeatureBundle& bundle) {
  bundle.validate();
  std::vector<NamedTensor> recs{{"V_G", bundle.global_visual}};
  for (int m = 0; m < kNumScales; ++m) recs.push_back({"V_L" + std::to_string(m), bundle.local_visual[m]});
  recs.push_back({"T_G", bundle.global_text});
  recs.push_back({"T_L", bundle.local_text});
  write_feature_file(path, recs);
}

}  // namespace tsal
