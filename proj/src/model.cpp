#include "tsal/model.hpp"

#include <cmath>
#include <numeric>
#include <unordered_set>

#include "tsal/random.hpp"

namespace tsal {

void ModelConfig::validate(const EncoderConfig& enc) const {
  enc.validate();
  if (frames <= 0) throw ConfigError("frames must be positive");
  if (views <= 0) throw ConfigError("views must be positive");
  if (heads <= 0) throw ConfigError("heads must be positive");
  if (!(fov > 0.0 && fov < kPi)) throw ConfigError("fov must lie in (0, 180) degrees");
  for (int m = 0; m < kNumScales; ++m)
    if (enc.scale_channels[m] % heads != 0)
      throw ConfigError("scale " + std::to_string(m) + " channels " + std::to_string(enc.scale_channels[m]) +
                        " not divisible by " + std::to_string(heads) + " heads");
  if (patch_out * 4 != enc.patch)
    throw ConfigError("patch_out " + std::to_string(patch_out) + " must equal patch / 4 = " +
                      std::to_string(enc.patch / 4));
  if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
  for (int c : decoder_channels)
    if (c <= 0) throw ConfigError("decoder channels must be positive");
  if (blend_height <= 0 || blend_width != 2 * blend_height)
    throw ConfigError("blend grid must be H x 2H");
  if (output_height <= 0 || output_width != 2 * output_height)
    throw ConfigError("output grid must be H x 2H");
}

// ---- building blocks ---------------------------------------------------------

template <typename Real>
BasicTensor<Real> sim_est(const BasicTensor<Real>& vg, const BasicTensor<Real>& tg) {
  if (vg.rank() != 3 || tg.rank() != 2 || tg.dim(0) != 1 || tg.dim(1) != vg.dim(2))
    throw ShapeError("sim_est: expected (F,T,C) and (1,C), got " + shape_str(vg.shape()) + " and " +
                     shape_str(tg.shape()));
  const std::size_t F = vg.dim(0), T = vg.dim(1), C = vg.dim(2);
  double tn = 0.0;
  for (std::size_t c = 0; c < C; ++c) tn += double(tg.data()[c]) * tg.data()[c];
  if (tn == 0.0) throw Error("sim_est: global text feature has zero norm");
  tn = std::sqrt(tn);
  std::vector<Real> s(F * T);
  for (std::size_t i = 0; i < F * T; ++i) {
    double dot = 0.0, vn = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double v = vg.data()[i * C + c];
      dot += v * tg.data()[c];
      vn += v * v;
    }
    if (vn == 0.0)
      throw Error("sim_est: visual feature (" + std::to_string(i / T) + "," + std::to_string(i % T) +
                  ") has zero norm");
    s[i] = static_cast<Real>(std::clamp(dot / (std::sqrt(vn) * tn), -1.0, 1.0));
  }
  return BasicTensor<Real>({F, T}, std::move(s));
}

template <typename Real>
std::array<BasicTensor<Real>, kNumScales> apply_relevance(
    const std::array<BasicTensor<Real>, kNumScales>& vl, const BasicTensor<Real>& s) {
  std::array<BasicTensor<Real>, kNumScales> out;
  for (int m = 0; m < kNumScales; ++m) out[m] = mul_prefix(vl[m], s);
  return out;
}

template <typename Real>
BasicTensor<Real> downsample(const BasicTensor<Real>& x) {
  if (x.rank() != 5 || x.dim(3) != x.dim(4))
    throw ShapeError("downsample: expected (F,T,C,H,H), got " + shape_str(x.shape()));
  return reshape(avg_pool2d(x, x.dim(3)), Shape{x.dim(0), x.dim(1), x.dim(2)});
}

template <typename Real>
BasicTensor<Real> multi_head_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& kv,
                                       const AttentionParams<Real>& p, int heads,
                                       BasicTensor<Real>* weights) {
  if (q.rank() != 3 || kv.rank() != 3 || q.dim(0) != kv.dim(0))
    throw ShapeError("attention: expected (B,Lq,C) and (B,Lk,Ckv), got " + shape_str(q.shape()) + " and " +
                     shape_str(kv.shape()));
  const std::size_t C = p.wq.dim(1);
  if (p.wk.dim(1) != C || p.wv.dim(1) != C)
    throw ShapeError("attention: query width " + std::to_string(C) + " vs key/value widths " +
                     shape_str(p.wk.shape()) + " " + shape_str(p.wv.shape()));
  const std::size_t h = static_cast<std::size_t>(heads);
  if (C % h != 0)
    throw ShapeError("attention: width " + std::to_string(C) + " not divisible by " + std::to_string(h) +
                     " heads");
  const std::size_t B = q.dim(0), Lq = q.dim(1), Lk = kv.dim(1), dk = C / h;
  auto split = [&](const BasicTensor<Real>& x, std::size_t L) {
    return reshape(permute(reshape(x, Shape{B, L, h, dk}), {0, 2, 1, 3}), Shape{B * h, L, dk});
  };
  const auto Q = split(matmul(q, p.wq), Lq);
  const auto K = split(matmul(kv, p.wk), Lk);
  const auto V = split(matmul(kv, p.wv), Lk);
  auto att = softmax(scale(matmul(Q, K, true), 1.0 / std::sqrt(static_cast<double>(dk))), 2);
  if (weights) *weights = att;
  auto ctx = matmul(att, V);
  auto merged = reshape(permute(reshape(ctx, Shape{B, h, Lq, dk}), {0, 2, 1, 3}), Shape{B, Lq, C});
  return matmul(merged, p.wo);
}

namespace {

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

template <typename Real>
BasicTensor<Real> norm(const BasicTensor<Real>& x, const NormParams<Real>& p) {
  return layer_norm(x, x.shape().back(), p.gamma, p.beta);
}

template <typename Real>
void check_tokens(const char* op, const BasicTensor<Real>& x) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected (F,T,C), got " + shape_str(x.shape()));
}

}  // namespace

template <typename Real>
BasicTensor<Real> temporal_attention(const BasicTensor<Real>& x, const BasicTensor<Real>& embedding,
                                     const NormParams<Real>& n, const AttentionParams<Real>& attn,
                                     int heads, BasicTensor<Real>* weights) {
  check_tokens("temporal_attention", x);
  const auto idx = iota_indices(x.dim(0));
  auto xt = add(permute(x, {1, 0, 2}), embed(embedding, std::span<const std::size_t>(idx)));
  const auto h = norm(xt, n);
  auto z = add(xt, multi_head_attention(h, h, attn, heads, weights));
  return permute(z, {1, 0, 2});
}

template <typename Real>
BasicTensor<Real> spatial_attention(const BasicTensor<Real>& x, const BasicTensor<Real>& embedding,
                                    const NormParams<Real>& n, const AttentionParams<Real>& attn,
                                    int heads, BasicTensor<Real>* weights) {
  check_tokens("spatial_attention", x);
  const auto idx = iota_indices(x.dim(1));
  auto y = add(x, embed(embedding, std::span<const std::size_t>(idx)));
  const auto h = norm(y, n);
  return add(y, multi_head_attention(h, h, attn, heads, weights));
}

template <typename Real>
BasicTensor<Real> cross_attention(const BasicTensor<Real>& x, const BasicTensor<Real>& local_text,
                                  const NormParams<Real>& n, const AttentionParams<Real>& attn,
                                  int heads, BasicTensor<Real>* weights) {
  check_tokens("cross_attention", x);
  if (local_text.rank() != 2)
    throw ShapeError("cross_attention: expected T_L (L_t,C_L), got " + shape_str(local_text.shape()));
  const std::size_t N = x.dim(0) * x.dim(1), C = x.dim(2);
  auto flat = reshape(x, Shape{1, N, C});
  auto kv = reshape(local_text, Shape{1, local_text.dim(0), local_text.dim(1)});
  auto out = add(flat, multi_head_attention(norm(flat, n), kv, attn, heads, weights));
  return reshape(out, x.shape());
}

template <typename Real>
BasicTensor<Real> feed_forward(const BasicTensor<Real>& x, const NormParams<Real>& n, const FfnParams<Real>& f) {
  auto h = relu(add(matmul(norm(x, n), f.w1), f.b1));
  return add(x, add(matmul(h, f.w2), f.b2));
}

template <typename Real>
BasicTensor<Real> vstca_block(const BasicTensor<Real>& vd, const BasicTensor<Real>& local_text,
                              const VstcaParams<Real>& p, int heads, AttentionMode mode,
                              StageTensors<Real>* stages) {
  auto z = temporal_attention(vd, p.temporal_embedding, p.temporal_norm, p.temporal, heads);
  auto zs = spatial_attention(z, p.spherical_embedding, p.spatial_norm, p.spatial, heads);
  auto zc = mode == AttentionMode::kVstca ? cross_attention(zs, local_text, p.cross_norm, p.cross, heads) : zs;
  auto zo = feed_forward(zc, p.ffn_norm, p.ffn);
  if (stages) {
    stages->downsampled = vd;
    stages->temporal = z;
    stages->spatial = zs;
    stages->cross = zc;
    stages->output = zo;
  }
  return zo;
}

template <typename Real>
BasicTensor<Real> residual_fuse_and_retain(const BasicTensor<Real>& zo, const BasicTensor<Real>& vl) {
  if (zo.rank() != 3 || vl.rank() != 5 || zo.dim(0) != vl.dim(0) || zo.dim(1) != vl.dim(1) ||
      zo.dim(2) != vl.dim(2))
    throw ShapeError("residual_fuse_and_retain: " + shape_str(zo.shape()) + " vs " + shape_str(vl.shape()));
  const std::size_t last = zo.dim(0) - 1;
  return add_prefix(select(vl, 0, last), select(zo, 0, last));
}

template <typename Real>
BasicTensor<Real> decode(const std::array<BasicTensor<Real>, kNumScales>& fused, const DecoderParams<Real>& p,
                         bool skips, OutputHead head) {
  auto block = [&](const BasicTensor<Real>& x, int i, bool up) {
    auto y = conv2d(x, p.blocks[i].weight, p.blocks[i].bias);
    y = relu(layer_norm(y, y.dim(1) * y.dim(2) * y.dim(3)));
    return up ? bilinear_upsample(y, 2 * y.dim(2), 2 * y.dim(3)) : y;
  };
  auto x = block(fused[2], 0, true);
  if (skips) x = concat<Real>({x, fused[1]}, 1);
  x = block(x, 1, true);
  if (skips) x = concat<Real>({x, fused[0]}, 1);
  x = block(x, 2, true);
  x = block(x, 3, false);
  auto y = conv2d(x, p.blocks[4].weight, p.blocks[4].bias);
  return head == OutputHead::kSigmoid ? sigmoid(y) : relu(y);
}

// ---- network -----------------------------------------------------------------

template <typename Real>
BasicTensor<Real> Network<Real>::add_param(const std::string& name, Shape shape, double init_std, double fill,
                                           std::uint64_t seed) {
  const std::size_t n = shape_numel(shape);
  std::vector<Real> v(n, static_cast<Real>(fill));
  if (init_std > 0.0) {
    Rng rng(fnv1a(name.data(), name.size(), seed ^ 0x9e3779b97f4a7c15ULL));
    for (auto& x : v) x = static_cast<Real>(static_cast<float>(rng.truncated_normal(init_std)));
  }
  BasicTensor<Real> t(std::move(shape), std::move(v), true);
  params_.emplace_back(name, t);
  return t;
}

template <typename Real>
Network<Real>::Network(const ModelConfig& model, const EncoderConfig& encoder, std::uint64_t seed)
    : Network(model, encoder, seed, build_layout(model.views, model.fov, encoder.patch)) {}

template <typename Real>
Network<Real>::Network(const ModelConfig& model, const EncoderConfig& encoder, std::uint64_t seed,
                       ViewportLayout layout)
    : cfg_(model), enc_(encoder), layout_(std::move(layout)) {
  cfg_.validate(enc_);
  if (layout_.count() != static_cast<std::size_t>(cfg_.views) || layout_.fov != cfg_.fov ||
      layout_.patch != enc_.patch)
    throw ConfigError("layout does not match the model config");
  plan_ = std::make_shared<const ResamplePlan>(
      build_blend_plan(layout_, cfg_.patch_out, ErpGrid{cfg_.blend_height, cfg_.blend_width}));

  constexpr double kStd = 0.02;
  const std::size_t F = cfg_.frames, T = cfg_.views, CL = enc_.global_dim;
  for (int m = 0; m < kNumScales; ++m) {
    const std::size_t C = enc_.scale_channels[m], H = C * cfg_.mlp_ratio;
    const std::string pre = "vstca" + std::to_string(m) + ".";
    auto& p = vstca_[m];
    p.temporal_embedding = add_param(pre + "temporal_embedding", {F, C}, kStd, 0, seed);
    p.spherical_embedding = add_param(pre + "spherical_embedding", {T, C}, kStd, 0, seed);
    auto make_norm = [&](const std::string& n) {
      return NormParams<Real>{add_param(pre + n + ".gamma", {C}, 0, 1, seed),
                              add_param(pre + n + ".beta", {C}, 0, 0, seed)};
    };
    auto make_attn = [&](const std::string& n, std::size_t cin) {
      return AttentionParams<Real>{add_param(pre + n + ".wq", {C, C}, kStd, 0, seed),
                                   add_param(pre + n + ".wk", {cin, C}, kStd, 0, seed),
                                   add_param(pre + n + ".wv", {cin, C}, kStd, 0, seed),
                                   add_param(pre + n + ".wo", {C, C}, kStd, 0, seed)};
    };
    p.temporal_norm = make_norm("temporal_norm");
    p.temporal = make_attn("temporal", C);
    p.spatial_norm = make_norm("spatial_norm");
    p.spatial = make_attn("spatial", C);
    if (cfg_.attention == AttentionMode::kVstca) {
      p.cross_norm = make_norm("cross_norm");
      p.cross = make_attn("cross", CL);
    }
    p.ffn_norm = make_norm("ffn_norm");
    p.ffn.w1 = add_param(pre + "ffn.w1", {C, H}, kStd, 0, seed);
    p.ffn.b1 = add_param(pre + "ffn.b1", {H}, 0, 0, seed);
    p.ffn.w2 = add_param(pre + "ffn.w2", {H, C}, kStd, 0, seed);
    p.ffn.b2 = add_param(pre + "ffn.b2", {C}, 0, 0, seed);
  }

  const auto& dc = cfg_.decoder_channels;
  const std::size_t c0 = enc_.scale_channels[0], c1 = enc_.scale_channels[1], c2 = enc_.scale_channels[2];
  const std::size_t in[5] = {c2, dc[0] + (cfg_.skips ? c1 : 0), dc[1] + (cfg_.skips ? c0 : 0),
                             static_cast<std::size_t>(dc[2]), static_cast<std::size_t>(dc[3])};
  const std::size_t out[5] = {static_cast<std::size_t>(dc[0]), static_cast<std::size_t>(dc[1]),
                              static_cast<std::size_t>(dc[2]), static_cast<std::size_t>(dc[3]), 1};
  for (int i = 0; i < 5; ++i) {
    const std::string pre = "decoder.block" + std::to_string(i + 1) + ".";
    decoder_.blocks[i].weight = add_param(pre + "weight", {out[i], in[i], 3, 3}, kStd, 0, seed);
    decoder_.blocks[i].bias = add_param(pre + "bias", {out[i]}, 0, 0, seed);
  }
}

template <typename Real>
ForwardResult<Real> Network<Real>::forward(const FeatureBundle& features) const {
  features.validate();
  const std::size_t F = cfg_.frames, T = cfg_.views;
  if (features.global_visual.dim(0) != F || features.global_visual.dim(1) != T)
    throw ShapeError("forward: features " + shape_str(features.global_visual.shape()) + " do not match F=" +
                     std::to_string(F) + " T=" + std::to_string(T));
  for (int m = 0; m < kNumScales; ++m) {
    const auto& v = features.local_visual[m];
    if (v.dim(2) != static_cast<std::size_t>(enc_.scale_channels[m]) ||
        v.dim(3) != static_cast<std::size_t>(enc_.scale_size(m)))
      throw ShapeError("forward: V_L" + std::to_string(m) + " " + shape_str(v.shape()) +
                       " does not match the encoder config");
  }
  if (features.global_text.dim(1) != static_cast<std::size_t>(enc_.global_dim) ||
      features.local_text.dim(0) != static_cast<std::size_t>(enc_.text_length))
    throw ShapeError("forward: text features " + shape_str(features.local_text.shape()) +
                     " do not match the encoder config");

  auto cv = [](const Tensor& t) { return t.template cast<Real>(); };
  ForwardResult<Real> r;
  std::array<BasicTensor<Real>, kNumScales> local;
  for (int m = 0; m < kNumScales; ++m) local[m] = cv(features.local_visual[m]);
  const auto text = cv(features.local_text);

  if (cfg_.sim_est) {
    r.relevance = sim_est(cv(features.global_visual), cv(features.global_text));
    if (cfg_.clamp_relevance)
      for (auto& s : r.relevance.mutable_data()) s = std::max(s, Real(0));
    local = apply_relevance(local, r.relevance);
  } else {
    r.relevance = BasicTensor<Real>({F, T}, Real(1));
  }

  std::array<BasicTensor<Real>, kNumScales> fused;
  for (int m = 0; m < kNumScales; ++m) {
    auto zo = vstca_block(downsample(local[m]), text, vstca_[m], cfg_.heads, cfg_.attention, &r.stages[m]);
    fused[m] = residual_fuse_and_retain(zo, local[m]);
    r.stages[m].fused = fused[m];
  }
  r.tangent_maps = decode(fused, decoder_, cfg_.skips, cfg_.head);
  r.blended = reshape(resample(reshape(r.tangent_maps, Shape{r.tangent_maps.numel()}), *plan_),
                      Shape{static_cast<std::size_t>(cfg_.blend_height), static_cast<std::size_t>(cfg_.blend_width)});
  r.output = bilinear_upsample(r.blended, cfg_.output_height, cfg_.output_width);
  return r;
}

template <typename Real>
BasicTensor<Real> Network<Real>::loss(const BasicTensor<Real>& pred, const BasicTensor<Real>& gt) const {
  auto l = kld_loss(pred, gt);
  if (cfg_.loss == LossKind::kKldCc) l = add(l, cc_loss(pred, gt));
  return l;
}

template <typename Real>
std::vector<BasicTensor<Real>> Network<Real>::parameters() const {
  std::vector<BasicTensor<Real>> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename Real>
BasicTensor<Real> Network<Real>::parameter(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw Error("no parameter named " + name);
}

template <typename Real>
std::size_t Network<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename Real>
std::vector<NamedTensor> Network<Real>::state() const {
  std::vector<NamedTensor> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back({name, t.template cast<float>()});
  return out;
}

template <typename Real>
void Network<Real>::load_state(const std::vector<NamedTensor>& records) {
  if (records.size() != params_.size())
    throw ShapeMismatchError("checkpoint has " + std::to_string(records.size()) + " tensors, model expects " +
                             std::to_string(params_.size()));
  std::unordered_set<std::string> seen;
  for (const auto& rec : records) {
    if (!seen.insert(rec.name).second) throw FormatError("checkpoint repeats tensor " + rec.name);
    BasicTensor<Real> dst;
    for (auto& [n, t] : params_)
      if (n == rec.name) dst = t;
    if (!dst.defined()) throw ShapeMismatchError("checkpoint tensor " + rec.name + " is not a model parameter");
    if (dst.shape() != rec.tensor.shape())
      throw ShapeMismatchError("checkpoint tensor " + rec.name + " has shape " + shape_str(rec.tensor.shape()) +
                               ", model expects " + shape_str(dst.shape()));
    auto d = dst.mutable_data();
    const auto s = rec.tensor.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<Real>(s[i]);
  }
}

SaliencyMap to_saliency_map(const Tensor& output) {
  if (output.rank() != 2) throw ShapeError("to_saliency_map: expected (H,W), got " + shape_str(output.shape()));
  SaliencyMap map(static_cast<int>(output.dim(0)), static_cast<int>(output.dim(1)));
  std::copy(output.data().begin(), output.data().end(), map.values.begin());
  max_normalize(map);
  return map;
}

void save_network(const std::filesystem::path& path, const Network<float>& net) {
  write_checkpoint(path, net.state());
}

Network<float> load_network(const std::filesystem::path& path, const ModelConfig& model,
                            const EncoderConfig& encoder) {
  auto records = read_checkpoint(path);
  Network<float> net(model, encoder, 0);
  net.load_state(records);
  return net;
}

#define TSAL_INSTANTIATE(R)                                                                                   \
  template BasicTensor<R> sim_est(const BasicTensor<R>&, const BasicTensor<R>&);                              \
  template std::array<BasicTensor<R>, kNumScales> apply_relevance(const std::array<BasicTensor<R>, kNumScales>&, \
                                                                  const BasicTensor<R>&);                     \
  template BasicTensor<R> downsample(const BasicTensor<R>&);                                                  \
  template BasicTensor<R> multi_head_attention(const BasicTensor<R>&, const BasicTensor<R>&,                  \
                                               const AttentionParams<R>&, int, BasicTensor<R>*);              \
  template BasicTensor<R> temporal_attention(const BasicTensor<R>&, const BasicTensor<R>&,                    \
                                             const NormParams<R>&, const AttentionParams<R>&, int,            \
                                             BasicTensor<R>*);                                                \
  template BasicTensor<R> spatial_attention(const BasicTensor<R>&, const BasicTensor<R>&,                     \
                                            const NormParams<R>&, const AttentionParams<R>&, int,             \
                                            BasicTensor<R>*);                                                 \
  template BasicTensor<R> cross_attention(const BasicTensor<R>&, const BasicTensor<R>&, const NormParams<R>&, \
                                          const AttentionParams<R>&, int, BasicTensor<R>*);                   \
  template BasicTensor<R> feed_forward(const BasicTensor<R>&, const NormParams<R>&, const FfnParams<R>&);     \
  template BasicTensor<R> vstca_block(const BasicTensor<R>&, const BasicTensor<R>&, const VstcaParams<R>&,    \
                                      int, AttentionMode, StageTensors<R>*);                                  \
  template BasicTensor<R> residual_fuse_and_retain(const BasicTensor<R>&, const BasicTensor<R>&);             \
  template BasicTensor<R> decode(const std::array<BasicTensor<R>, kNumScales>&, const DecoderParams<R>&,      \
                                 bool, OutputHead);                                                           \
  template class Network<R>;

TSAL_INSTANTIATE(float)
TSAL_INSTANTIATE(double)

#undef TSAL_INSTANTIATE

}  // namespace tsal
