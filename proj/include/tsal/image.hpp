#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace tsal {

/// Planar float image, channel-major (C x H x W), values nominally in [0,1].
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

/// Single-channel map over an ERP grid (row-major H x W).
struct SaliencyMap {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  SaliencyMap() = default;
  SaliencyMap(int h, int w, float fill = 0.0f)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return values.size(); }
};

/// Scales values so the maximum is 1. All-zero maps are left untouched.
void max_normalize(SaliencyMap& map);

/// Bilinear resize with half-pixel centers (matches the tensor upsample op).
SaliencyMap resize_bilinear(const SaliencyMap& map, int height, int width);

// 8-bit PNG I/O. Values are mapped v/255 on read and round(clamp(v)*255) on write.
Image read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const Image& image);
SaliencyMap read_png_gray(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const SaliencyMap& map);

}  // namespace tsal
