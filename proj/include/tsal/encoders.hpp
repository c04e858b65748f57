#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tsal/common.hpp"
#include "tsal/geometry.hpp"
#include "tsal/tensor.hpp"

namespace tsal {

inline constexpr int kNumScales = 3;

struct EncoderConfig {
  int global_dim = 1024;                         // C_G, also C_L
  std::array<int, kNumScales> scale_channels{512, 1024, 2048};
  int text_length = 77;                          // L_t
  int patch = 224;                               // P_in
  std::uint64_t seed = 0;

  /// Spatial size of local scale m: P_in / 8, / 16, / 32.
  int scale_size(int m) const { return patch >> (3 + m); }
  void validate() const;
  std::uint64_t hash() const;
};

/// Visual and textual features for one (frame window, text) pair.
///   global_visual: (F, T, C_G)           V_G
///   local_visual[m]: (F, T, C_m, H_m, W_m)  V_L^(m)
///   global_text: (1, C_G)                T_G
///   local_text: (L_t, C_L)               T_L
struct FeatureBundle {
  Tensor global_visual;
  std::array<Tensor, kNumScales> local_visual;
  Tensor global_text;
  Tensor local_text;

  /// Throws ShapeMismatchError unless all shapes are mutually consistent.
  void validate() const;
  int frames() const { return static_cast<int>(global_visual.dim(0)); }
  int views() const { return static_cast<int>(global_visual.dim(1)); }
};

struct VisualFeatures {
  Tensor global_visual;
  std::array<Tensor, kNumScales> local_visual;
};

struct TextFeatures {
  Tensor global_text;
  Tensor local_text;
};

/// Deterministic stand-in for a vision-language encoder: fixed random
/// projections (seeded by the config hash) of per-cell image statistics, and
/// hashed token embeddings for text.
class ToyEncoder {
 public:
  explicit ToyEncoder(EncoderConfig cfg);

  const EncoderConfig& config() const { return cfg_; }

  VisualFeatures encode_visual(const TangentStack& stack) const;
  TextFeatures encode_text(const std::string& text) const;
  FeatureBundle encode(const TangentStack& stack, const std::string& text) const;

  /// Lowercased alphanumeric runs; the whole string if there are none.
  static std::vector<std::string> tokenize(const std::string& text);

 private:
  std::vector<float> token_embedding(const std::string& token) const;

  EncoderConfig cfg_;
};

/// Number of statistics per cell for an image with `channels` channels:
/// per-channel mean and std, a 4-bin gradient orientation histogram, and a
/// constant 1.
std::size_t cell_stat_dim(int channels);

/// Fills `out` with the statistics of the square cell [y0, y0+size) x [x0, x0+size)
/// of tangent image (f, t).
void cell_statistics(const TangentStack& stack, int f, int t, int y0, int x0, int size,
                     std::span<double> out);

/// Reads a "TSFT" feature file. Missing names and inconsistent shapes raise
/// ShapeMismatchError; short reads raise TruncatedFileError.
FeatureBundle load_features(const std::filesystem::path& path);
void save_features(const std::filesystem::path& path, const FeatureBundle& bundle);

}  // namespace tsal
