#include <cctype>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "tokenswap/binary_io.hpp"
#include "tokenswap/errors.hpp"
#include "tokenswap/grid_mask.hpp"

namespace tokenswap {

namespace detail {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open {} for reading", path.string()));
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return data;
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

}  // namespace detail

void write_pbm(const std::filesystem::path& path, const BinaryMask& m) {
  const std::string header = fmt::format("P4\n{} {}\n", m.width(), m.height());
  std::vector<unsigned char> bytes(header.begin(), header.end());
  const int row_bytes = (m.width() + 7) / 8;
  for (int r = 0; r < m.height(); ++r) {
    for (int b = 0; b < row_bytes; ++b) {
      unsigned char byte = 0;
      for (int bit = 0; bit < 8; ++bit) {
        const int c = b * 8 + bit;
        if (c < m.width() && m.at(r, c)) byte |= static_cast<unsigned char>(0x80 >> bit);
      }
      bytes.push_back(byte);
    }
  }
  detail::write_file(path, bytes);
}

BinaryMask read_pbm(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  std::size_t pos = 0;
  // Header tokens separated by whitespace; '#' starts a comment line.
  auto next_token = [&]() {
    std::string tok;
    while (pos < data.size()) {
      const char ch = static_cast<char>(data[pos]);
      if (ch == '#') {
        while (pos < data.size() && data[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        ++pos;
      } else {
        tok.push_back(ch);
        ++pos;
      }
    }
    return tok;
  };
  if (next_token() != "P4") throw FormatError(fmt::format("{} is not a binary PBM", path.string()));
  int width = 0;
  int height = 0;
  try {
    width = std::stoi(next_token());
    height = std::stoi(next_token());
  } catch (const std::exception&) {
    throw FormatError(fmt::format("{}: malformed PBM header", path.string()));
  }
  ++pos;  // single whitespace before raster
  const int row_bytes = (width + 7) / 8;
  if (data.size() < pos + static_cast<std::size_t>(row_bytes) * height) {
    throw FormatError(fmt::format("{}: truncated PBM raster", path.string()));
  }
  BinaryMask m(height, width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const unsigned char byte = data[pos + r * row_bytes + c / 8];
      m.set(r, c, (byte & (0x80 >> (c % 8))) != 0);
    }
  }
  return m;
}

std::vector<unsigned char> encode_token_grid(const TokenGrid& g) {
  detail::ByteWriter w;
  w.bytes("TGRD", 4);
  w.u32(kTokenGridVersion);
  w.u32(static_cast<std::uint32_t>(g.height()));
  w.u32(static_cast<std::uint32_t>(g.width()));
  w.u32(static_cast<std::uint32_t>(g.dim()));
  for (double v : g.values()) w.f32(static_cast<float>(v));
  return std::move(w.buffer());
}

TokenGrid decode_token_grid(std::span<const unsigned char> bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != "TGRD") throw FormatError("token grid: bad magic");
  const auto version = r.u32();
  if (version != kTokenGridVersion) {
    throw FormatError(fmt::format("token grid: unsupported version {}", version));
  }
  const auto h = r.u32();
  const auto w = r.u32();
  const auto d = r.u32();
  if (h == 0 || w == 0 || d == 0 || h > 65536 || w > 65536 || d > 65536) {
    throw FormatError("token grid: implausible extents");
  }
  std::vector<double> data(static_cast<std::size_t>(h) * w * d);
  for (auto& v : data) v = r.f32();
  if (!r.done()) throw FormatError("token grid: trailing bytes");
  return TokenGrid(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d),
                   std::move(data));
}

void write_token_grid(const std::filesystem::path& path, const TokenGrid& g) {
  detail::write_file(path, encode_token_grid(g));
}

TokenGrid read_token_grid(const std::filesystem::path& path) {
  return decode_token_grid(detail::read_file(path));
}

}  // namespace tokenswap
