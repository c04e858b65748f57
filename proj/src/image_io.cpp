#include "tsal/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "tsal/common.hpp"

namespace tsal {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw FormatError("cannot open " + path.string());
  return f;
}

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Decodes any PNG into 8-bit rows with the requested channel count (1 or 3).
std::vector<std::uint8_t> decode(const std::filesystem::path& path, int want_channels,
                                 int& height, int& width) {
  auto file = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("invalid PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  const bool is_gray = !(color & PNG_COLOR_MASK_COLOR) && color != PNG_COLOR_TYPE_PALETTE;
  if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
  if (want_channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * static_cast<std::size_t>(height));
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = pixels.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

void encode(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
            int channels, int height, int width) {
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw FormatError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("failed writing PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + stride * y));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void max_normalize(SaliencyMap& map) {
  float peak = 0.0f;
  for (float v : map.values) peak = std::max(peak, v);
  if (peak <= 0.0f) return;
  for (float& v : map.values) v /= peak;
}

SaliencyMap resize_bilinear(const SaliencyMap& map, int height, int width) {
  SaliencyMap out(height, width);
  const double sy = static_cast<double>(map.height) / height;
  const double sx = static_cast<double>(map.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), map.height - 1);
    const int y1 = std::min(y0 + 1, map.height - 1);
    const double ay = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), map.width - 1);
      const int x1 = std::min(x0 + 1, map.width - 1);
      const double ax = fx - x0;
      const double top = map.at(y0, x0) + ax * (map.at(y0, x1) - map.at(y0, x0));
      const double bot = map.at(y1, x0) + ax * (map.at(y1, x1) - map.at(y1, x0));
      out.at(y, x) = static_cast<float>(top + ay * (bot - top));
    }
  }
  return out;
}

Image read_png_rgb(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto px = decode(path, 3, h, w);
  Image img(3, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = px[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
  return img;
}

void write_png_rgb(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3 && image.channels != 1)
    throw FormatError("write_png_rgb expects 1 or 3 channels");
  std::vector<std::uint8_t> px(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c)
        px[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] =
            to_byte(image.at(image.channels == 3 ? c : 0, y, x));
  encode(path, px, 3, image.height, image.width);
}

SaliencyMap read_png_gray(const std::filesystem::path& path) {
  int h = 0, w = 0;
  const auto px = decode(path, 1, h, w);
  SaliencyMap map(h, w);
  for (std::size_t i = 0; i < map.values.size(); ++i) map.values[i] = px[i] / 255.0f;
  return map;
}

void write_png_gray(const std::filesystem::path& path, const SaliencyMap& map) {
  std::vector<std::uint8_t> px(map.values.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(map.values[i]);
  encode(path, px, 1, map.height, map.width);
}

}  // namespace tsal
