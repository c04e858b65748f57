#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "gradcheck.hpp"
#include "synthetic.hpp"
#include "tsal/model.hpp"
#include "tsal/train.hpp"

using namespace tsal;
using namespace tsal::testing;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor64& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t.data()[offset + r * cols + c];
  return m;
}

Mat matmul_ref(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

Mat layer_norm_ref(const Mat& x, const Tensor64& gamma, const Tensor64& beta) {
  Mat out = x;
  for (auto& row : out) {
    double m = 0, v = 0;
    for (double e : row) m += e;
    m /= row.size();
    for (double e : row) v += (e - m) * (e - m);
    v /= row.size();
    for (std::size_t c = 0; c < row.size(); ++c)
      row[c] = (row[c] - m) / std::sqrt(v + 1e-5) * gamma.data()[c] + beta.data()[c];
  }
  return out;
}

// Straightforward multi-head attention on row matrices.
Mat mha_ref(const Mat& q, const Mat& kv, const AttentionParams<double>& p, int heads, Mat* probs = nullptr) {
  const std::size_t C = p.wq.dim(1), cin_q = p.wq.dim(0), cin_kv = p.wk.dim(0), dk = C / heads;
  const Mat Q = matmul_ref(q, to_mat(p.wq, cin_q, C));
  const Mat K = matmul_ref(kv, to_mat(p.wk, cin_kv, C));
  const Mat V = matmul_ref(kv, to_mat(p.wv, cin_kv, C));
  Mat ctx(q.size(), std::vector<double>(C, 0.0));
  if (probs) probs->clear();
  for (int h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s(kv.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < kv.size(); ++j) {
        double d = 0;
        for (std::size_t c = 0; c < dk; ++c) d += Q[i][h * dk + c] * K[j][h * dk + c];
        s[j] = d / std::sqrt(double(dk));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (auto& e : s) e /= z;
      if (probs) probs->push_back(s);
      for (std::size_t j = 0; j < kv.size(); ++j)
        for (std::size_t c = 0; c < dk; ++c) ctx[i][h * dk + c] += s[j] * V[j][h * dk + c];
    }
  return matmul_ref(ctx, to_mat(p.wo, C, C));
}

AttentionParams<double> random_attn(Rng& rng, std::size_t cin_kv, std::size_t c) {
  return {random_tensor(rng, {c, c}, -0.5, 0.5), random_tensor(rng, {cin_kv, c}, -0.5, 0.5),
          random_tensor(rng, {cin_kv, c}, -0.5, 0.5), random_tensor(rng, {c, c}, -0.5, 0.5)};
}

NormParams<double> random_norm(Rng& rng, std::size_t c) {
  return {random_tensor(rng, {c}, 0.5, 1.5), random_tensor(rng, {c}, -0.2, 0.2)};
}

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// ---- SimEst and relevance ------------------------------------------------------

TEST_CASE("sim_est closed forms") {
  Tensor64 tg({1, 3}, std::vector<double>{1, 2, 2});
  Tensor64 vg({1, 3, 3}, std::vector<double>{2, 4, 4, -2, 1, 0, 3, 0, 0});
  const auto s = sim_est(vg, tg);
  CHECK(s.shape() == Shape{1, 3});
  CHECK(s.data()[0] == doctest::Approx(1.0));
  CHECK(s.data()[1] == doctest::Approx(0.0));
  CHECK(s.data()[2] == doctest::Approx(1.0 / 3.0));
  // positive rescaling of either input
  const auto s2 = sim_est(scale(vg, 7.5), scale(tg, 0.01));
  CHECK(max_diff(s.data(), s2.data()) < 1e-12);
  Tensor64 zero({1, 1, 3}, 0.0);
  CHECK_THROWS_AS(sim_est(zero, tg), Error);
  CHECK_THROWS_AS(sim_est(vg, Tensor64({1, 3}, 0.0)), Error);
}

TEST_CASE("apply_relevance") {
  Rng rng(2);
  std::array<Tensor64, kNumScales> vl;
  for (int m = 0; m < kNumScales; ++m) vl[m] = random_tensor(rng, {2, 3, 2, std::size_t{4} >> m, std::size_t{4} >> m});
  const auto same = apply_relevance(vl, Tensor64({2, 3}, 1.0));
  for (int m = 0; m < kNumScales; ++m) CHECK(max_diff(same[m].data(), vl[m].data()) == 0.0);

  auto s = random_tensor(rng, {2, 3});
  s.mutable_data()[4] = 0.0;  // (f=1, t=1)
  const auto w = apply_relevance(vl, s);
  for (int m = 0; m < kNumScales; ++m) {
    const std::size_t per = vl[m].numel() / 6;
    for (std::size_t ft = 0; ft < 6; ++ft)
      for (std::size_t i = 0; i < per; ++i) {
        const double expect = vl[m].data()[ft * per + i] * s.data()[ft];
        CHECK(w[m].data()[ft * per + i] == doctest::Approx(expect).epsilon(1e-12));
        if (ft == 4) CHECK(w[m].data()[ft * per + i] == 0.0);
      }
  }
}

TEST_CASE("downsample is the spatial mean") {
  Tensor64 c({1, 2, 3, 4, 4}, 0.75);
  const auto d = downsample(c);
  CHECK(d.shape() == Shape{1, 2, 3});
  for (double v : d.data()) CHECK(v == doctest::Approx(0.75));

  Rng rng(4);
  const auto x = random_tensor(rng, {2, 2, 3, 5, 5});
  const auto y = downsample(x);
  for (std::size_t i = 0; i < 12; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 25; ++k) s += x.data()[i * 25 + k];
    CHECK(y.data()[i] == doctest::Approx(s / 25).epsilon(1e-12));
  }
}

TEST_CASE("downsample and fuse shapes at full scale") {
  Tensor vl({8, 18, 512, 28, 28}, 0.5f);
  const auto vd = downsample(vl);
  CHECK(vd.shape() == Shape{8, 18, 512});
  const auto zf = residual_fuse_and_retain(vd, vl);
  CHECK(zf.shape() == Shape{18, 512, 28, 28});
}

// ---- attention -------------------------------------------------------------------

TEST_CASE("temporal attention matches a loop oracle") {
  Rng rng(6);
  const std::size_t F = 3, T = 2, C = 8;
  const int heads = 2;
  const auto x = random_tensor(rng, {F, T, C});
  const auto emb = random_tensor(rng, {F, C});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, C, C);
  const auto z = temporal_attention(x, emb, n, a, heads);
  REQUIRE(z.shape() == Shape{F, T, C});
  for (std::size_t t = 0; t < T; ++t) {
    Mat seq(F, std::vector<double>(C));
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c) seq[f][c] = x.data()[(f * T + t) * C + c] + emb.data()[f * C + c];
    const Mat h = layer_norm_ref(seq, n.gamma, n.beta);
    const Mat att = mha_ref(h, h, a, heads);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c)
        CHECK(z.data()[(f * T + t) * C + c] == doctest::Approx(seq[f][c] + att[f][c]).epsilon(1e-10));
  }
}

TEST_CASE("spatial attention matches a loop oracle") {
  Rng rng(7);
  const std::size_t F = 2, T = 3, C = 8;
  const int heads = 4;
  const auto x = random_tensor(rng, {F, T, C});
  const auto emb = random_tensor(rng, {T, C});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, C, C);
  const auto z = spatial_attention(x, emb, n, a, heads);
  for (std::size_t f = 0; f < F; ++f) {
    Mat seq(T, std::vector<double>(C));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) seq[t][c] = x.data()[(f * T + t) * C + c] + emb.data()[t * C + c];
    const Mat att = mha_ref(layer_norm_ref(seq, n.gamma, n.beta), layer_norm_ref(seq, n.gamma, n.beta), a, heads);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        CHECK(z.data()[(f * T + t) * C + c] == doctest::Approx(seq[t][c] + att[t][c]).epsilon(1e-10));
  }
}

TEST_CASE("single frame temporal attention is the value path") {
  Rng rng(8);
  const std::size_t T = 3, C = 4;
  const auto x = random_tensor(rng, {1, T, C});
  const auto emb = random_tensor(rng, {1, C});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, C, C);
  Tensor64 w;
  const auto z = temporal_attention(x, emb, n, a, 2, &w);
  for (double p : w.data()) CHECK(p == 1.0);
  for (std::size_t t = 0; t < T; ++t) {
    Mat row(1, std::vector<double>(C));
    for (std::size_t c = 0; c < C; ++c) row[0][c] = x.data()[t * C + c] + emb.data()[c];
    const Mat v = matmul_ref(matmul_ref(layer_norm_ref(row, n.gamma, n.beta), to_mat(a.wv, C, C)), to_mat(a.wo, C, C));
    for (std::size_t c = 0; c < C; ++c) CHECK(z.data()[t * C + c] == doctest::Approx(row[0][c] + v[0][c]).epsilon(1e-10));
  }
}

TEST_CASE("temporal attention is per viewport, spatial attention is per frame") {
  Rng rng(9);
  const std::size_t F = 3, T = 4, C = 8;
  const auto x = random_tensor(rng, {F, T, C});
  const auto embF = random_tensor(rng, {F, C});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, C, C);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permute_axis = [&](const Tensor64& t, std::size_t axis) {
    std::vector<Tensor64> parts;
    for (std::size_t p : perm) parts.push_back(reshape(select(t, axis, p), axis == 1 ? Shape{F, 1, C} : Shape{1, T, C}));
    return concat(parts, axis);
  };
  const auto z = temporal_attention(x, embF, n, a, 2);
  const auto zp = temporal_attention(permute_axis(x, 1), embF, n, a, 2);
  CHECK(max_diff(permute_axis(z, 1).data(), zp.data()) < 1e-12);

  // spatial: permuting frames permutes the output
  const auto embT = random_tensor(rng, {T, C});
  const std::size_t F4 = 4;
  const auto x4 = random_tensor(rng, {F4, T, C});
  auto permute_frames = [&](const Tensor64& t) {
    std::vector<Tensor64> parts;
    for (std::size_t p : perm) parts.push_back(reshape(select(t, 0, p), Shape{1, T, C}));
    return concat(parts, 0);
  };
  const auto s = spatial_attention(x4, embT, n, a, 2);
  const auto sp = spatial_attention(permute_frames(x4), embT, n, a, 2);
  CHECK(max_diff(permute_frames(s).data(), sp.data()) < 1e-12);
}

TEST_CASE("attention rejects widths not divisible by heads") {
  Rng rng(10);
  const auto x = random_tensor(rng, {2, 2, 6});
  CHECK_THROWS_AS(temporal_attention(x, random_tensor(rng, {2, 6}), random_norm(rng, 6), random_attn(rng, 6, 6), 4),
                  ShapeError);
}

TEST_CASE("cross attention matches a loop oracle") {
  Rng rng(11);
  const std::size_t F = 2, T = 2, C = 8, L = 3, CL = 5;
  const int heads = 2;
  const auto x = random_tensor(rng, {F, T, C});
  const auto text = random_tensor(rng, {L, CL});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, CL, C);
  Tensor64 w;
  const auto z = cross_attention(x, text, n, a, heads, &w);
  REQUIRE(z.shape() == Shape{F, T, C});
  const Mat q = to_mat(x, F * T, C);
  Mat probs;
  const Mat att = mha_ref(layer_norm_ref(q, n.gamma, n.beta), to_mat(text, L, CL), a, heads, &probs);
  for (std::size_t i = 0; i < F * T; ++i)
    for (std::size_t c = 0; c < C; ++c)
      CHECK(z.data()[i * C + c] == doctest::Approx(q[i][c] + att[i][c]).epsilon(1e-10));
  // every attention row is a distribution
  REQUIRE(w.shape() == Shape{static_cast<std::size_t>(heads), F * T, L});
  for (std::size_t r = 0; r < heads * F * T; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < L; ++j) s += w.data()[r * L + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  // key width mismatch
  CHECK_THROWS_AS(cross_attention(x, random_tensor(rng, {L, CL + 1}), n, a, heads), ShapeError);
}

TEST_CASE("single token cross attention ignores the queries") {
  Rng rng(12);
  const std::size_t C = 4, CL = 6;
  const auto text = random_tensor(rng, {1, CL});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, CL, C);
  const Mat v = matmul_ref(matmul_ref(to_mat(text, 1, CL), to_mat(a.wv, CL, C)), to_mat(a.wo, C, C));
  for (int trial = 0; trial < 3; ++trial) {
    const auto x = random_tensor(rng, {2, 3, C});
    const auto z = cross_attention(x, text, n, a, 2);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t c = 0; c < C; ++c)
        CHECK(z.data()[i * C + c] - x.data()[i * C + c] == doctest::Approx(v[0][c]).epsilon(1e-10));
  }
}

TEST_CASE("shifting every key logit of a query leaves the weights unchanged") {
  Rng rng(13);
  const std::size_t C = 4, CL = 4, L = 5;
  const auto x = random_tensor(rng, {1, 3, C});
  const auto text = random_tensor(rng, {L, CL});
  const auto n = random_norm(rng, C);
  const auto a = random_attn(rng, CL, C);
  // adding u to every token adds u.W^K to every key, shifting each query's
  // logits by the same amount
  const auto u = random_tensor(rng, {CL});
  Tensor64 w1, w2;
  cross_attention(x, text, n, a, 2, &w1);
  cross_attention(x, add(text, u), n, a, 2, &w2);
  CHECK(max_diff(w1.data(), w2.data()) < 1e-12);
}

// ---- block, fuse, decoder ---------------------------------------------------------

namespace {

VstcaParams<double> random_vstca(Rng& rng, std::size_t F, std::size_t T, std::size_t C, std::size_t CL) {
  VstcaParams<double> p;
  p.temporal_embedding = random_tensor(rng, {F, C});
  p.spherical_embedding = random_tensor(rng, {T, C});
  p.temporal_norm = random_norm(rng, C);
  p.spatial_norm = random_norm(rng, C);
  p.cross_norm = random_norm(rng, C);
  p.ffn_norm = random_norm(rng, C);
  p.temporal = random_attn(rng, C, C);
  p.spatial = random_attn(rng, C, C);
  p.cross = random_attn(rng, CL, C);
  p.ffn = {random_tensor(rng, {C, 2 * C}), random_tensor(rng, {2 * C}), random_tensor(rng, {2 * C, C}),
           random_tensor(rng, {C})};
  return p;
}

}  // namespace

TEST_CASE("vstca block equals its composed steps") {
  Rng rng(14);
  const std::size_t F = 2, T = 3, C = 8, CL = 6, L = 4;
  const auto p = random_vstca(rng, F, T, C, CL);
  const auto vd = random_tensor(rng, {F, T, C});
  const auto text = random_tensor(rng, {L, CL});
  StageTensors<double> st;
  const auto zo = vstca_block(vd, text, p, 2, AttentionMode::kVstca, &st);
  CHECK(zo.shape() == Shape{F, T, C});

  const auto z = temporal_attention(vd, p.temporal_embedding, p.temporal_norm, p.temporal, 2);
  const auto z1 = spatial_attention(z, p.spherical_embedding, p.spatial_norm, p.spatial, 2);
  const auto z2 = cross_attention(z1, text, p.cross_norm, p.cross, 2);
  // FFN by hand
  const Mat h = layer_norm_ref(to_mat(z2, F * T, C), p.ffn_norm.gamma, p.ffn_norm.beta);
  Mat hid = matmul_ref(h, to_mat(p.ffn.w1, C, 2 * C));
  for (auto& row : hid)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::max(0.0, row[j] + p.ffn.b1.data()[j]);
  const Mat o = matmul_ref(hid, to_mat(p.ffn.w2, 2 * C, C));
  for (std::size_t i = 0; i < F * T; ++i)
    for (std::size_t c = 0; c < C; ++c)
      CHECK(zo.data()[i * C + c] ==
            doctest::Approx(z2.data()[i * C + c] + o[i][c] + p.ffn.b2.data()[c]).epsilon(1e-10));
  CHECK(max_diff(st.temporal.data(), z.data()) == 0.0);
  CHECK(max_diff(st.spatial.data(), z1.data()) == 0.0);
  CHECK(max_diff(st.cross.data(), z2.data()) == 0.0);
}

TEST_CASE("vsta block ignores the text") {
  Rng rng(15);
  const auto p = random_vstca(rng, 2, 3, 8, 6);
  const auto vd = random_tensor(rng, {2, 3, 8});
  const auto a = vstca_block(vd, random_tensor(rng, {4, 6}), p, 2, AttentionMode::kVsta);
  const auto b = vstca_block(vd, random_tensor(rng, {2, 6}), p, 2, AttentionMode::kVsta);
  CHECK(max_diff(a.data(), b.data()) == 0.0);
  CHECK(a.shape() == Shape{2, 3, 8});
}

TEST_CASE("residual fuse and retain") {
  Rng rng(16);
  const std::size_t F = 3, T = 2, C = 4, H = 3;
  const auto vl = random_tensor(rng, {F, T, C, H, H});
  const auto zero = residual_fuse_and_retain(Tensor64({F, T, C}, 0.0), vl);
  CHECK(zero.shape() == Shape{T, C, H, H});
  const std::size_t per = T * C * H * H;
  for (std::size_t i = 0; i < per; ++i) CHECK(zero.data()[i] == vl.data()[(F - 1) * per + i]);

  const auto zo = random_tensor(rng, {F, T, C});
  const auto z = residual_fuse_and_retain(zo, vl);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < H * H; ++k) {
        const std::size_t i = (t * C + c) * H * H + k;
        CHECK(z.data()[i] == doctest::Approx(vl.data()[(F - 1) * per + i] + zo.data()[((F - 1) * T + t) * C + c]));
      }
}

TEST_CASE("decoder upsamples 7 to 56 and respects its switches") {
  EncoderConfig enc;
  enc.global_dim = 8;
  enc.scale_channels = {4, 4, 8};
  enc.text_length = 4;
  ModelConfig cfg;
  cfg.frames = 1;
  cfg.views = 4;
  cfg.fov = deg2rad(160.0);
  cfg.blend_height = 8;
  cfg.blend_width = 16;
  cfg.output_height = 8;
  cfg.output_width = 16;
  cfg.heads = 2;
  cfg.decoder_channels = {8, 8, 4, 4};
  Rng rng(17);
  std::array<Tensor, kNumScales> fused;
  for (int m = 0; m < kNumScales; ++m) {
    const std::size_t s = enc.scale_size(m);
    fused[m] = random_tensor(rng, {1, static_cast<std::size_t>(enc.scale_channels[m]), s, s}).cast<float>();
  }
  CHECK(fused[2].dim(2) == 7);
  Network<float> on(cfg, enc, 1);
  const auto y = decode(fused, on.decoder(), true, OutputHead::kSigmoid);
  CHECK(y.shape() == Shape{1, 1, 56, 56});
  for (float v : y.data()) CHECK((v > 0.0f && v < 1.0f));

  auto off_cfg = cfg;
  off_cfg.skips = false;
  Network<float> off(off_cfg, enc, 1);
  const auto y2 = decode(fused, off.decoder(), false, OutputHead::kSigmoid);
  CHECK(y2.shape() == y.shape());
  double d = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) d += std::abs(y.data()[i] - y2.data()[i]);
  CHECK(d > 0.0);

  const auto r = decode(fused, on.decoder(), true, OutputHead::kRelu);
  for (float v : r.data()) CHECK(v >= 0.0f);
}

// ---- network ---------------------------------------------------------------------

namespace {

FeatureBundle tiny_features(const ModelConfig& m, const EncoderConfig& e, std::uint64_t seed, const char* text) {
  ToyEncoder enc(e);
  Rng rng(seed);
  const auto stack = project_to_tangents(random_window(rng, m.frames, e.patch), build_layout(m.views, m.fov, e.patch));
  return enc.encode(stack, text);
}

}  // namespace

TEST_CASE("forward shapes and output resolution") {
  auto m = tiny_model();
  m.output_height = 480;
  m.output_width = 960;
  const auto e = tiny_encoder();
  Network<float> net(m, e, 1);
  const auto r = net.forward(tiny_features(m, e, 2, "a cat"));
  CHECK(r.relevance.shape() == Shape{2, 4});
  for (float s : r.relevance.data()) CHECK((s >= -1.0f && s <= 1.0f));
  CHECK(r.stages[0].output.shape() == Shape{2, 4, 8});
  CHECK(r.stages[0].fused.shape() == Shape{4, 8, 4, 4});
  CHECK(r.tangent_maps.shape() == Shape{4, 1, 8, 8});
  CHECK(r.blended.shape() == Shape{16, 32});
  CHECK(r.output.shape() == Shape{480, 960});
}

TEST_CASE("model config validation") {
  auto m = tiny_model();
  const auto e = tiny_encoder();
  m.patch_out = 16;
  CHECK_THROWS_AS(Network<float>(m, e, 1), ConfigError);
  m = tiny_model();
  m.heads = 3;
  CHECK_THROWS_AS(Network<float>(m, e, 1), ConfigError);
  m = tiny_model();
  m.fov = deg2rad(60.0);
  CHECK_THROWS_AS(Network<float>(m, e, 1), GeometryError);
}

TEST_CASE("text changes the prediction and the forward pass is deterministic") {
  const auto m = tiny_model();
  const auto e = tiny_encoder();
  Network<float> net(m, e, 3);
  const auto a = net.forward(tiny_features(m, e, 5, "grey cat")).output;
  const auto b = net.forward(tiny_features(m, e, 5, "orange dog")).output;
  const auto a2 = Network<float>(m, e, 3).forward(tiny_features(m, e, 5, "grey cat")).output;
  double d = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) d += std::abs(a.data()[i] - b.data()[i]);
  CHECK(d > 0.0);
  CHECK(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
}

TEST_CASE("text-blind configuration is bit-identical across prompts") {
  auto m = tiny_model();
  m.attention = AttentionMode::kVsta;
  m.sim_est = false;
  const auto e = tiny_encoder();
  Network<float> net(m, e, 3);
  const auto a = net.forward(tiny_features(m, e, 5, "grey cat")).output;
  const auto b = net.forward(tiny_features(m, e, 5, "a completely different prompt")).output;
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("clamped relevance is nonnegative") {
  auto m = tiny_model();
  m.clamp_relevance = true;
  const auto e = tiny_encoder();
  Network<float> net(m, e, 3);
  bool any_clamped = false;
  for (std::uint64_t s = 0; s < 6; ++s) {
    const auto r = net.forward(tiny_features(m, e, s, "grey cat")).relevance;
    for (float v : r.data()) {
      CHECK(v >= 0.0f);
      any_clamped = any_clamped || v == 0.0f;
    }
  }
  (void)any_clamped;
}

TEST_CASE("loss closed forms and agreement with the metric") {
  const auto m = tiny_model();
  Network<float> net(m, tiny_encoder(), 1);
  Tensor gt({2, 2}, std::vector<float>{0, 0, 1, 0});
  CHECK(net.loss(gt, gt).item() == doctest::Approx(0.0).epsilon(1e-6));
  const double l = net.loss(Tensor({2, 2}, 0.25f), gt).item();
  CHECK(std::abs(l - std::log(4.0)) < 1e-5);
  Rng rng(3);
  const auto p = random_tensor(rng, {4, 8}, 0.0, 1.0).cast<float>();
  const auto q = random_tensor(rng, {4, 8}, 0.0, 1.0).cast<float>();
  CHECK(net.loss(p, q).item() == doctest::Approx(kld(p.data(), q.data())).epsilon(1e-6));
}

TEST_CASE("end-to-end gradient check on the tiny model") {
  const auto m = tiny_model();
  const auto e = tiny_encoder();
  const auto feats = tiny_features(m, e, 9, "a grey cat");
  const auto net = Network<float>(m, e, 4).cast<double>();
  Rng rng(5);
  const auto gt = random_tensor(rng, {16, 32}, 0.0, 1.0);
  const auto params = net.parameters();
  auto fn = [&](const std::vector<Tensor64>&) { return net.loss(net.forward(feats).output, gt); };
  const auto r = check_gradients(fn, params, 1e-5, 0.01, 21);
  INFO("checked " << r.checked << " worst " << r.worst_rel);
  CHECK(r.checked > 100);
  CHECK(r.worst_rel < 1e-2);
}

TEST_CASE("permuting viewports with their embeddings leaves the blend unchanged") {
  const auto m = tiny_model();
  const auto e = tiny_encoder();
  const auto layout = build_layout(m.views, m.fov, e.patch);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<SphPoint> centers;
  for (std::size_t p : perm) centers.push_back(layout.centers[p]);
  const auto permuted = make_layout(centers, m.fov, e.patch);

  Rng rng(6);
  const auto frames = random_window(rng, m.frames, 32);
  ToyEncoder enc(e);
  const auto fa = enc.encode(project_to_tangents(frames, layout), "a cat");
  const auto fb = enc.encode(project_to_tangents(frames, permuted), "a cat");

  Network<float> a(m, e, 7, layout);
  Network<float> b(m, e, 7, permuted);
  b.load_state(a.state());
  for (int s = 0; s < kNumScales; ++s) {
    const auto src = a.vstca()[s].spherical_embedding;
    auto dst = b.vstca()[s].spherical_embedding;
    const std::size_t C = src.dim(1);
    for (std::size_t t = 0; t < perm.size(); ++t)
      for (std::size_t c = 0; c < C; ++c) dst.mutable_data()[t * C + c] = src.data()[perm[t] * C + c];
  }
  const auto ya = a.forward(fa).blended;
  const auto yb = b.forward(fb).blended;
  double d = 0;
  for (std::size_t i = 0; i < ya.numel(); ++i) d = std::max(d, double(std::abs(ya.data()[i] - yb.data()[i])));
  CHECK(d < 1e-5);
}

TEST_CASE("checkpoint round trip reproduces predictions") {
  const auto m = tiny_model();
  const auto e = tiny_encoder();
  Network<float> net(m, e, 8);
  const auto path = std::filesystem::temp_directory_path() / "tsal_model_ckpt.tsal";
  save_network(path, net);
  const auto back = load_network(path, m, e);
  const auto f = tiny_features(m, e, 1, "dog");
  const auto a = net.forward(f).output, b = back.forward(f).output;
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  auto other = m;
  other.skips = false;
  CHECK_THROWS_AS(load_network(path, other, e), ShapeMismatchError);
}

TEST_CASE("training reduces the loss and rejects empty data") {
  const auto m = tiny_model();
  const auto e = tiny_encoder();
  auto data = two_prompt_dataset(m, e, 2, 3);
  Network<float> net(m, e, 2);
  TrainOptions o;
  o.epochs = 30;
  o.batch = 4;
  o.optimizer.lr = 1e-3;
  Trainer tr(net, o);
  std::vector<StepLog> steps;
  std::vector<EpochLog> epochs;
  tr.fit(data, [&](const StepLog& s) { steps.push_back(s); }, [&](const EpochLog& l) { epochs.push_back(l); });
  REQUIRE(steps.size() == 30);
  CHECK(steps.back().step == 30);
  CHECK(steps.back().loss < steps.front().loss);
  CHECK(epochs.size() == 30);
  CHECK(epochs.back().metrics.n == data.size());

  Trainer t2(net, o);
  CHECK_THROWS_AS(t2.fit({}), Error);
}
