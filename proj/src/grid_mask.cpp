#include "tokenswap/grid_mask.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "tokenswap/errors.hpp"
#include "tokenswap/rng.hpp"

namespace tokenswap {

TokenGrid::TokenGrid(int height, int width, int dim)
    : TokenGrid(height, width, dim,
                std::vector<double>(static_cast<std::size_t>(std::max(height, 0)) *
                                    std::max(width, 0) * std::max(dim, 0))) {}

TokenGrid::TokenGrid(int height, int width, int dim, std::vector<double> data)
    : height_(height), width_(width), dim_(dim), data_(std::move(data)) {
  if (height <= 0 || width <= 0 || dim <= 0) {
    throw ParameterError(fmt::format("token grid extents must be positive, got {}x{}x{}",
                                     height, width, dim));
  }
  const auto expected = static_cast<std::size_t>(height) * width * dim;
  if (data_.size() != expected) {
    throw DimensionError(fmt::format("token grid {}x{}x{} needs {} values, got {}", height,
                                     width, dim, expected, data_.size()));
  }
  if (!all_finite()) throw NonFiniteError("token grid contains non-finite values");
}

bool TokenGrid::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string TokenGrid::shape_string() const {
  return fmt::format("{}x{}x{}", height_, width_, dim_);
}

BinaryMask::BinaryMask(int height, int width, bool fill)
    : height_(height), width_(width) {
  if (height <= 0 || width <= 0) {
    throw ParameterError(fmt::format("mask extents must be positive, got {}x{}", height, width));
  }
  bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
}

int BinaryMask::popcount() const {
  return static_cast<int>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

BinaryMask BinaryMask::complement() const {
  BinaryMask out = *this;
  for (auto& b : out.bits_) b = b ? 0 : 1;
  return out;
}

bool BinaryMask::is_subset_of(const BinaryMask& other) const {
  if (shape() != other.shape()) {
    throw DimensionError(fmt::format("mask shapes differ: {} vs {}", shape_string(),
                                     other.shape_string()));
  }
  for (std::size_t i = 0; i < bits_.size(); ++i) {
    if (bits_[i] && !other.bits_[i]) return false;
  }
  return true;
}

std::vector<int> BinaryMask::set_cells() const {
  std::vector<int> out;
  for (int i = 0; i < cells(); ++i) {
    if (bits_[i]) out.push_back(i);
  }
  return out;
}

std::string BinaryMask::shape_string() const { return fmt::format("{}x{}", height_, width_); }

TokenGrid replace_tokens(const TokenGrid& x, const TokenGrid& x_ref, const BinaryMask& m) {
  if (!x.same_layout(x_ref) || x.shape() != m.shape()) {
    throw DimensionError(fmt::format("replace_tokens: x is {}, x_ref is {}, mask is {}",
                                     x.shape_string(), x_ref.shape_string(), m.shape_string()));
  }
  TokenGrid out = x;
  for (int cell = 0; cell < m.cells(); ++cell) {
    if (!m.at(cell)) continue;
    auto src = x_ref.token(cell);
    std::copy(src.begin(), src.end(), out.token(cell).begin());
  }
  return out;
}

BinaryMask translate_mask(const BinaryMask& m, GridOffset delta) {
  BinaryMask out(m.height(), m.width());
  for (int r = 0; r < m.height(); ++r) {
    for (int c = 0; c < m.width(); ++c) {
      if (!m.at(r, c)) continue;
      const int nr = r + delta.rows;
      const int nc = c + delta.cols;
      if (nr < 0 || nr >= m.height() || nc < 0 || nc >= m.width()) {
        throw OutOfBoundsError(fmt::format(
            "translating by ({}, {}) moves cell ({}, {}) outside the {} grid", delta.rows,
            delta.cols, r, c, m.shape_string()));
      }
      out.set(nr, nc, true);
    }
  }
  return out;
}

namespace {

void check_kernel(int kernel) {
  if (kernel < 1 || kernel % 2 == 0) {
    throw ParameterError(fmt::format("morphology kernel must be odd and >= 1, got {}", kernel));
  }
}

// any == true: set iff some in-grid neighbour is set.
// any == false: set iff every in-grid neighbour is set.
BinaryMask neighbourhood(const BinaryMask& m, int kernel, bool any) {
  check_kernel(kernel);
  const int r = kernel / 2;
  BinaryMask out(m.height(), m.width());
  for (int row = 0; row < m.height(); ++row) {
    for (int col = 0; col < m.width(); ++col) {
      bool hit = !any;
      for (int dr = -r; dr <= r && hit != any; ++dr) {
        const int nr = row + dr;
        if (nr < 0 || nr >= m.height()) continue;
        for (int dc = -r; dc <= r; ++dc) {
          const int nc = col + dc;
          if (nc < 0 || nc >= m.width()) continue;
          if (m.at(nr, nc) == any) {
            hit = any;
            break;
          }
        }
      }
      out.set(row, col, hit);
    }
  }
  return out;
}

}  // namespace

BinaryMask dilate(const BinaryMask& m, int kernel) { return neighbourhood(m, kernel, true); }

BinaryMask erode(const BinaryMask& m, int kernel) { return neighbourhood(m, kernel, false); }

TokenGrid shuffle_windows(const TokenGrid& x, const BinaryMask& m, int window,
                          std::uint64_t seed) {
  if (window < 1) throw ParameterError(fmt::format("window must be >= 1, got {}", window));
  if (x.shape() != m.shape()) {
    throw DimensionError(fmt::format("shuffle_windows: grid is {}, mask is {}",
                                     x.shape_string(), m.shape_string()));
  }
  TokenGrid out = x;
  const int tiles_x = (x.width() + window - 1) / window;
  const int tiles_y = (x.height() + window - 1) / window;
  std::vector<int> members;
  std::vector<int> perm;
  for (int ty = 0; ty < tiles_y; ++ty) {
    for (int tx = 0; tx < tiles_x; ++tx) {
      members.clear();
      for (int r = ty * window; r < std::min((ty + 1) * window, x.height()); ++r) {
        for (int c = tx * window; c < std::min((tx + 1) * window, x.width()); ++c) {
          if (m.at(r, c)) members.push_back(r * x.width() + c);
        }
      }
      if (members.size() < 2) continue;
      const auto tile = static_cast<std::uint64_t>(ty * tiles_x + tx);
      CounterRng rng(seed, stream_id(streams::kShuffle, tile));
      perm.resize(members.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
      for (std::size_t i = perm.size() - 1; i > 0; --i) {
        std::swap(perm[i], perm[rng.below(i + 1)]);
      }
      for (std::size_t k = 0; k < members.size(); ++k) {
        auto src = x.token(members[perm[k]]);
        std::copy(src.begin(), src.end(), out.token(members[k]).begin());
      }
    }
  }
  return out;
}

bool check_disjoint(std::span<const BinaryMask> masks) {
  if (masks.empty()) return true;
  std::vector<int> owners(masks.front().cells(), 0);
  for (const auto& m : masks) {
    if (m.shape() != masks.front().shape()) {
      throw DimensionError(fmt::format("check_disjoint: mask shapes {} and {} differ",
                                       masks.front().shape_string(), m.shape_string()));
    }
    for (int cell = 0; cell < m.cells(); ++cell) {
      if (m.at(cell) && ++owners[cell] > 1) return false;
    }
  }
  return true;
}

BinaryMask mask_from_sprite(const Image& image, const Rgb& background, int patch,
                            double threshold) {
  if (patch < 1 || image.height % patch != 0 || image.width % patch != 0) {
    throw ParameterError(fmt::format("image {}x{} is not divisible into {}px patches",
                                     image.height, image.width, patch));
  }
  BinaryMask out(image.height / patch, image.width / patch);
  const double t2 = threshold * threshold;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      double d2 = 0.0;
      for (int ch = 0; ch < 3; ++ch) {
        const double d = image.at(r, c, ch) - background[ch];
        d2 += d * d;
      }
      if (d2 > t2) out.set(r / patch, c / patch, true);
    }
  }
  return out;
}

}  // namespace tokenswap
