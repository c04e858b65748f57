#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tsal/encoders.hpp"
#include "tsal/geometry.hpp"
#include "tsal/image.hpp"
#include "tsal/tensor.hpp"
#include "tsal/tensor_io.hpp"

namespace tsal {

enum class AttentionMode { kVstca, kVsta };
enum class OutputHead { kSigmoid, kRelu };
enum class LossKind { kKld, kKldCc };

struct ModelConfig {
  int frames = 8;                 // F
  int views = 18;                 // T
  int heads = 8;
  double fov = deg2rad(80.0);
  int patch_out = 56;             // P_out, must equal P_in / 4
  OutputHead head = OutputHead::kSigmoid;
  AttentionMode attention = AttentionMode::kVstca;
  bool sim_est = true;
  bool skips = true;
  int mlp_ratio = 4;
  std::array<int, 4> decoder_channels{256, 128, 64, 32};
  bool clamp_relevance = false;
  LossKind loss = LossKind::kKld;
  int blend_height = 240;         // H_out
  int blend_width = 480;          // W_out
  int output_height = 480;        // ground-truth resolution
  int output_width = 960;

  void validate(const EncoderConfig& enc) const;
};

// ---- building blocks ---------------------------------------------------------

/// S[f,t] = cos(V_G[f,t], T_G). Not differentiated: features are inputs.
template <typename Real>
BasicTensor<Real> sim_est(const BasicTensor<Real>& global_visual, const BasicTensor<Real>& global_text);

/// Scales V_L^(m)[f,t] by S[f,t] at every scale.
template <typename Real>
std::array<BasicTensor<Real>, kNumScales> apply_relevance(
    const std::array<BasicTensor<Real>, kNumScales>& local_visual, const BasicTensor<Real>& relevance);

/// Spatial mean: (F,T,C,H,W) -> (F,T,C).
template <typename Real>
BasicTensor<Real> downsample(const BasicTensor<Real>& local_visual);

template <typename Real>
struct AttentionParams {
  BasicTensor<Real> wq, wk, wv, wo;  // (C_in, C) each; wo (C, C)
};

template <typename Real>
struct NormParams {
  BasicTensor<Real> gamma, beta;
};

/// q (B, Lq, C), kv (B, Lk, Ckv) -> (B, Lq, C). If weights is given it
/// receives the attention probabilities, shape (B*heads, Lq, Lk).
template <typename Real>
BasicTensor<Real> multi_head_attention(const BasicTensor<Real>& q, const BasicTensor<Real>& kv,
                                       const AttentionParams<Real>& p, int heads,
                                       BasicTensor<Real>* weights = nullptr);

/// x (F,T,C) plus temporal embeddings, then pre-norm self-attention over F
/// for each viewport, with residual.
template <typename Real>
BasicTensor<Real> temporal_attention(const BasicTensor<Real>& x, const BasicTensor<Real>& embedding,
                                     const NormParams<Real>& norm, const AttentionParams<Real>& attn,
                                     int heads, BasicTensor<Real>* weights = nullptr);

/// x (F,T,C) plus spherical embeddings, then pre-norm self-attention over T
/// within each frame, with residual.
template <typename Real>
BasicTensor<Real> spatial_attention(const BasicTensor<Real>& x, const BasicTensor<Real>& embedding,
                                    const NormParams<Real>& norm, const AttentionParams<Real>& attn,
                                    int heads, BasicTensor<Real>* weights = nullptr);

/// Queries from the N = F*T visual tokens, keys and values from T_L (L_t, C_L).
template <typename Real>
BasicTensor<Real> cross_attention(const BasicTensor<Real>& x, const BasicTensor<Real>& local_text,
                                  const NormParams<Real>& norm, const AttentionParams<Real>& attn,
                                  int heads, BasicTensor<Real>* weights = nullptr);

template <typename Real>
struct FfnParams {
  BasicTensor<Real> w1, b1, w2, b2;
};

template <typename Real>
BasicTensor<Real> feed_forward(const BasicTensor<Real>& x, const NormParams<Real>& norm,
                               const FfnParams<Real>& ffn);

template <typename Real>
struct VstcaParams {
  BasicTensor<Real> temporal_embedding;   // (F, C_m)
  BasicTensor<Real> spherical_embedding;  // (T, C_m)
  NormParams<Real> temporal_norm, spatial_norm, cross_norm, ffn_norm;
  AttentionParams<Real> temporal, spatial, cross;  // cross undefined under VSTA
  FfnParams<Real> ffn;
};

template <typename Real>
struct StageTensors {
  BasicTensor<Real> downsampled;  // V_D (F,T,C)
  BasicTensor<Real> temporal;     // Z
  BasicTensor<Real> spatial;      // Z'
  BasicTensor<Real> cross;        // Z'' (equal to Z' under VSTA)
  BasicTensor<Real> output;       // Z_o
  BasicTensor<Real> fused;        // Z_F (T,C,H,W)
};

/// temporal -> spatial -> cross (skipped under VSTA) -> FFN.
template <typename Real>
BasicTensor<Real> vstca_block(const BasicTensor<Real>& downsampled, const BasicTensor<Real>& local_text,
                              const VstcaParams<Real>& p, int heads, AttentionMode mode,
                              StageTensors<Real>* stages = nullptr);

/// Z_o (F,T,C) broadcast over space and added to V_L (F,T,C,H,W); returns the last frame.
template <typename Real>
BasicTensor<Real> residual_fuse_and_retain(const BasicTensor<Real>& block_output,
                                           const BasicTensor<Real>& local_visual);

template <typename Real>
struct ConvParams {
  BasicTensor<Real> weight, bias;
};

template <typename Real>
struct DecoderParams {
  std::array<ConvParams<Real>, 5> blocks;
};

/// Z_F for scales 0..2 (finest first) -> per-tangent maps (T, 1, P_out, P_out).
template <typename Real>
BasicTensor<Real> decode(const std::array<BasicTensor<Real>, kNumScales>& fused,
                         const DecoderParams<Real>& p, bool skips, OutputHead head);

// ---- network -----------------------------------------------------------------

template <typename Real>
struct ForwardResult {
  BasicTensor<Real> relevance;      // S (F,T)
  std::array<StageTensors<Real>, kNumScales> stages;
  BasicTensor<Real> tangent_maps;   // (T,1,P_out,P_out)
  BasicTensor<Real> blended;        // (H_out, W_out)
  BasicTensor<Real> output;         // (output_height, output_width), not max-normalized
};

template <typename Real>
class Network {
 public:
  Network(const ModelConfig& model, const EncoderConfig& encoder, std::uint64_t seed);
  /// Uses the given layout instead of build_layout (same count and fov).
  Network(const ModelConfig& model, const EncoderConfig& encoder, std::uint64_t seed, ViewportLayout layout);

  const ModelConfig& config() const { return cfg_; }
  const EncoderConfig& encoder_config() const { return enc_; }
  const ViewportLayout& layout() const { return layout_; }

  ForwardResult<Real> forward(const FeatureBundle& features) const;

  /// KLD between sum-normalized maps, optionally plus (1 - CC).
  BasicTensor<Real> loss(const BasicTensor<Real>& pred, const BasicTensor<Real>& gt) const;

  const std::vector<std::pair<std::string, BasicTensor<Real>>>& named_parameters() const { return params_; }
  std::vector<BasicTensor<Real>> parameters() const;
  BasicTensor<Real> parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  const std::array<VstcaParams<Real>, kNumScales>& vstca() const { return vstca_; }
  const DecoderParams<Real>& decoder() const { return decoder_; }

  /// Parameter values as float records, in creation order.
  std::vector<NamedTensor> state() const;
  /// Copies values in; names and shapes must match exactly.
  void load_state(const std::vector<NamedTensor>& records);

  template <typename Other>
  Network<Other> cast() const {
    Network<Other> out(cfg_, enc_, 0, layout_);
    out.load_state(state());
    return out;
  }

 private:
  BasicTensor<Real> add_param(const std::string& name, Shape shape, double init_std, double fill,
                              std::uint64_t seed);

  ModelConfig cfg_;
  EncoderConfig enc_;
  ViewportLayout layout_;
  std::shared_ptr<const ResamplePlan> plan_;
  std::vector<std::pair<std::string, BasicTensor<Real>>> params_;
  std::array<VstcaParams<Real>, kNumScales> vstca_;
  DecoderParams<Real> decoder_;
};

/// Max-normalized float map from a network output.
SaliencyMap to_saliency_map(const Tensor& output);

/// Checkpoints hold parameters only; configs come from the run configuration.
void save_network(const std::filesystem::path& path, const Network<float>& net);
Network<float> load_network(const std::filesystem::path& path, const ModelConfig& model,
                            const EncoderConfig& encoder);

}  // namespace tsal
