#include "tokenswap/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "tokenswap/binary_io.hpp"
#include "tokenswap/errors.hpp"

namespace tokenswap {

Image::Image(int h, int w, Rgb fill) : height(h), width(w) {
  if (h <= 0 || w <= 0) throw ParameterError(fmt::format("image extents {}x{} invalid", h, w));
  rgb.resize(static_cast<std::size_t>(h) * w * 3);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = fill[i % 3];
}

namespace {

unsigned char quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::lround(c * 255.0));
}

void png_append(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_noop_flush(png_structp) {}

struct PngReadState {
  const std::vector<unsigned char>* data;
  std::size_t pos;
};

void png_consume(png_structp png, png_bytep out, png_size_t length) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->pos + length > st->data->size()) png_error(png, "truncated PNG");
  std::memcpy(out, st->data->data() + st->pos, length);
  st->pos += length;
}

[[noreturn]] void png_throw(png_structp, png_const_charp msg) { throw FormatError(msg); }
void png_ignore_warning(png_structp, png_const_charp) {}

Image decode_png(const std::vector<unsigned char>& bytes) {
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_ignore_warning);
  if (!png) throw FormatError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  PngReadState st{&bytes, 0};
  Image img;
  try {
    png_set_read_fn(png, &st, png_consume);
    png_read_info(png, info);
    const auto w = png_get_image_width(png, info);
    const auto h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
      png_set_gray_to_rgb(png);
    }
    if (png_get_bit_depth(png, info) < 8) png_set_expand(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    std::vector<unsigned char> raster(static_cast<std::size_t>(w) * h * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 r = 0; r < h; ++r) rows[r] = raster.data() + static_cast<std::size_t>(r) * w * 3;
    png_read_image(png, rows.data());
    img = Image(static_cast<int>(h), static_cast<int>(w));
    for (std::size_t i = 0; i < raster.size(); ++i) img.rgb[i] = raster[i] / 255.0;
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

std::vector<unsigned char> encode_ppm(const Image& img) {
  const std::string header = fmt::format("P6\n{} {}\n255\n", img.width, img.height);
  std::vector<unsigned char> out(header.begin(), header.end());
  for (double v : img.rgb) out.push_back(quantize(v));
  return out;
}

Image decode_ppm(const std::vector<unsigned char>& data) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    std::string tok;
    while (pos < data.size()) {
      const char ch = static_cast<char>(data[pos]);
      if (ch == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t') {
        if (!tok.empty()) break;
        ++pos;
      } else {
        tok.push_back(ch);
        ++pos;
      }
    }
    return tok;
  };
  if (next_token() != "P6") throw FormatError("not a binary PPM");
  int w = 0;
  int h = 0;
  int maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw FormatError("malformed PPM header");
  }
  if (maxval != 255) throw FormatError("only 8-bit PPM is supported");
  ++pos;
  if (data.size() < pos + static_cast<std::size_t>(w) * h * 3) throw FormatError("truncated PPM");
  Image img(h, w);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = data[pos + i] / 255.0;
  return img;
}

}  // namespace

std::vector<unsigned char> encode_png(const Image& img) {
  std::vector<unsigned char> out;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_throw, png_ignore_warning);
  if (!png) throw FormatError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<unsigned char> raster(img.rgb.size());
  for (std::size_t i = 0; i < raster.size(); ++i) raster[i] = quantize(img.rgb[i]);
  try {
    png_set_write_fn(png, &out, png_append, png_noop_flush);
    png_set_compression_level(png, 9);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.height; ++r) {
      png_write_row(png, raster.data() + static_cast<std::size_t>(r) * img.width * 3);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_image(const std::filesystem::path& path, const Image& img, ImageFormat format) {
  const auto bytes = format == ImageFormat::png ? encode_png(img) : encode_ppm(img);
  detail::write_file(path, bytes);
}

Image read_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  throw FormatError(fmt::format("{}: unrecognized image format", path.string()));
}

double pixel_mse(const Image& a, const Image& b) {
  if (a.height != b.height || a.width != b.width) {
    throw DimensionError(fmt::format("image sizes differ: {}x{} vs {}x{}", a.height, a.width,
                                     b.height, b.width));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.rgb.size());
}

Rgb border_median(const Image& img) {
  if (img.height < 1 || img.width < 1) throw DimensionError("border_median of an empty image");
  Rgb out{};
  for (int ch = 0; ch < 3; ++ch) {
    std::vector<double> vals;
    for (int r = 0; r < img.height; ++r) {
      for (int c = 0; c < img.width; ++c) {
        if (r == 0 || c == 0 || r == img.height - 1 || c == img.width - 1) {
          vals.push_back(img.at(r, c, ch));
        }
      }
    }
    const auto mid = vals.begin() + static_cast<long>(vals.size() / 2);
    std::nth_element(vals.begin(), mid, vals.end());
    out[ch] = *mid;
  }
  return out;
}

}  // namespace tokenswap
