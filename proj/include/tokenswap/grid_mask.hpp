#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tokenswap/image.hpp"

namespace tokenswap {

struct GridShape {
  int height = 0;
  int width = 0;
  int cells() const { return height * width; }
  bool operator==(const GridShape&) const = default;
};

// Row/column displacement on the token grid.
struct GridOffset {
  int rows = 0;
  int cols = 0;
  GridOffset inverse() const { return {-rows, -cols}; }
  bool operator==(const GridOffset&) const = default;
};

// h x w grid of d-dimensional tokens, row-major. Tokens carry no position.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(int height, int width, int dim);
  TokenGrid(int height, int width, int dim, std::vector<double> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int dim() const { return dim_; }
  int cells() const { return height_ * width_; }
  GridShape shape() const { return {height_, width_}; }

  std::span<double> token(int cell) {
    return {data_.data() + static_cast<std::size_t>(cell) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<const double> token(int cell) const {
    return {data_.data() + static_cast<std::size_t>(cell) * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> token(int row, int col) { return token(row * width_ + col); }
  std::span<const double> token(int row, int col) const { return token(row * width_ + col); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_layout(const TokenGrid& other) const {
    return height_ == other.height_ && width_ == other.width_ && dim_ == other.dim_;
  }
  bool all_finite() const;
  std::string shape_string() const;

  bool operator==(const TokenGrid&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int dim_ = 0;
  std::vector<double> data_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width, bool fill = false);

  static BinaryMask full(int height, int width) { return BinaryMask(height, width, true); }

  int height() const { return height_; }
  int width() const { return width_; }
  int cells() const { return height_ * width_; }
  GridShape shape() const { return {height_, width_}; }

  bool at(int cell) const { return bits_[cell] != 0; }
  bool at(int row, int col) const { return bits_[row * width_ + col] != 0; }
  void set(int cell, bool v) { bits_[cell] = v ? 1 : 0; }
  void set(int row, int col, bool v) { bits_[row * width_ + col] = v ? 1 : 0; }

  int popcount() const;
  bool none() const { return popcount() == 0; }
  BinaryMask complement() const;
  bool is_subset_of(const BinaryMask& other) const;
  // Cell indices of set bits in row-major order.
  std::vector<int> set_cells() const;
  std::string shape_string() const;

  bool operator==(const BinaryMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

// Token replacement: reference token where m is set, x's token elsewhere.
TokenGrid replace_tokens(const TokenGrid& x, const TokenGrid& x_ref, const BinaryMask& m);

// Output bit (r, c) equals input bit (r - delta.rows, c - delta.cols).
// Throws OutOfBoundsError instead of clipping.
BinaryMask translate_mask(const BinaryMask& m, GridOffset delta);

// Square structuring element of odd side `kernel`, clipped at the grid border.
BinaryMask dilate(const BinaryMask& m, int kernel = 5);
BinaryMask erode(const BinaryMask& m, int kernel = 5);

// Tiles the grid into window x window cells anchored at the origin and
// permutes the masked tokens inside each cell. The permutation depends only
// on (seed, window index, mask), never on token values.
TokenGrid shuffle_windows(const TokenGrid& x, const BinaryMask& m, int window, std::uint64_t seed);

bool check_disjoint(std::span<const BinaryMask> masks);

// Token cell is set iff some pixel in its patch differs from `background`
// by more than `threshold` in Euclidean RGB distance.
BinaryMask mask_from_sprite(const Image& image, const Rgb& background, int patch = 2,
                            double threshold = 0.1);

// Binary PBM (P4).
void write_pbm(const std::filesystem::path& path, const BinaryMask& m);
BinaryMask read_pbm(const std::filesystem::path& path);

// Little-endian "TGRD" blob: magic, u32 version, u32 h, w, d, f32 data.
inline constexpr std::uint32_t kTokenGridVersion = 1;
std::vector<unsigned char> encode_token_grid(const TokenGrid& g);
TokenGrid decode_token_grid(std::span<const unsigned char> bytes);
void write_token_grid(const std::filesystem::path& path, const TokenGrid& g);
TokenGrid read_token_grid(const std::filesystem::path& path);

}  // namespace tokenswap
