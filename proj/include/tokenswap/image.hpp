#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace tokenswap {

using Rgb = std::array<double, 3>;

// RGB raster, row-major, interleaved channels, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(int h, int w, Rgb fill = {0.0, 0.0, 0.0});

  double& at(int row, int col, int channel) {
    return rgb[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  double at(int row, int col, int channel) const {
    return rgb[(static_cast<std::size_t>(row) * width + col) * 3 + channel];
  }
  Rgb pixel(int row, int col) const {
    return {at(row, col, 0), at(row, col, 1), at(row, col, 2)};
  }
  void set_pixel(int row, int col, const Rgb& c) {
    for (int ch = 0; ch < 3; ++ch) at(row, col, ch) = c[ch];
  }
  bool operator==(const Image&) const = default;
};

enum class ImageFormat { png, ppm };

// 8-bit quantization happens on write; reading yields multiples of 1/255.
void write_image(const std::filesystem::path& path, const Image& img, ImageFormat format);
// Detects PNG or binary PPM (P6) from the file signature.
Image read_image(const std::filesystem::path& path);

// Encodes to an in-memory PNG. Output bytes are a pure function of pixels.
std::vector<unsigned char> encode_png(const Image& img);

double pixel_mse(const Image& a, const Image& b);
// Per-channel median over the one-pixel image border.
Rgb border_median(const Image& img);

}  // namespace tokenswap
