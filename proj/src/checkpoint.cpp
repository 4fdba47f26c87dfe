#include <cmath>
#include <map>

#include <fmt/format.h>

#include "tokenswap/binary_io.hpp"
#include "tokenswap/errors.hpp"
#include "tokenswap/toy_dit.hpp"

namespace tokenswap {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'I', 'T'};
constexpr std::uint32_t kMaxExtent = 1u << 16;

void write_tensor(detail::ByteWriter& w, const std::string& name, std::uint32_t rows,
                  std::uint32_t cols, const float* data) {
  w.str(name);
  w.u32(rows);
  w.u32(cols);
  for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * cols; ++i) w.f32(data[i]);
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  const auto& p = ckpt.params;
  const auto& c = p.config();
  const std::size_t n = p.values().size();
  if (ckpt.adam_m.has_value() != ckpt.adam_v.has_value()) {
    throw ParameterError("checkpoint must carry both Adam moments or neither");
  }
  if (ckpt.adam_m && (ckpt.adam_m->size() != n || ckpt.adam_v->size() != n)) {
    throw DimensionError("Adam state does not match parameter count");
  }
  detail::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  for (int v : {c.layers, c.dim, c.heads, c.patch, c.vocab, c.image_size, c.channels, c.mlp_ratio,
                c.time_freq_dim}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.f32(static_cast<float>(c.rope_base));
  w.u32(ckpt.step);
  const std::uint32_t count =
      static_cast<std::uint32_t>(p.layout().tensors.size() * (ckpt.adam_m ? 3 : 1));
  w.u32(count);
  for (const auto& t : p.layout().tensors) {
    write_tensor(w, t.name, t.rows, t.cols, p.values().data() + t.offset);
  }
  if (ckpt.adam_m) {
    for (const auto& t : p.layout().tensors) {
      write_tensor(w, "adam.m." + t.name, t.rows, t.cols, ckpt.adam_m->data() + t.offset);
    }
    for (const auto& t : p.layout().tensors) {
      write_tensor(w, "adam.v." + t.name, t.rows, t.cols, ckpt.adam_v->data() + t.offset);
    }
  }
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a TDIT checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("unsupported checkpoint version {}", version));
  }
  DiTConfig c;
  int* fields[] = {&c.layers, &c.dim, &c.heads, &c.patch, &c.vocab, &c.image_size, &c.channels,
                   &c.mlp_ratio, &c.time_freq_dim};
  for (int* f : fields) {
    const auto v = r.u32();
    if (v > kMaxExtent) throw FormatError("checkpoint config field out of range");
    *f = static_cast<int>(v);
  }
  c.rope_base = r.f32();
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw FormatError(fmt::format("checkpoint config invalid: {}", e.what()));
  }
  Checkpoint ckpt{DiTParams<float>(c), std::nullopt, std::nullopt, 0};
  ckpt.step = r.u32();
  const auto count = r.u32();
  const auto& layout = ckpt.params.layout();

  std::map<std::string, std::vector<float>> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rows = r.u32();
    const auto cols = r.u32();
    std::string base = name;
    if (base.starts_with("adam.m.") || base.starts_with("adam.v.")) base = base.substr(7);
    const TensorInfo* info = layout.find(base);
    if (!info) throw FormatError(fmt::format("unknown tensor '{}'", name));
    if (static_cast<int>(rows) != info->rows || static_cast<int>(cols) != info->cols) {
      throw FormatError(fmt::format("tensor '{}' is {}x{}, expected {}x{}", name, rows, cols,
                                    info->rows, info->cols));
    }
    std::vector<float> data(info->size());
    for (auto& v : data) {
      v = r.f32();
      if (!std::isfinite(v)) throw NonFiniteError(fmt::format("tensor '{}' holds non-finite values", name));
    }
    if (!seen.emplace(name, std::move(data)).second) {
      throw FormatError(fmt::format("duplicate tensor '{}'", name));
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint tensors");

  auto gather = [&](const std::string& prefix, std::vector<float>& out) {
    out.assign(layout.total, 0.0f);
    for (const auto& t : layout.tensors) {
      auto it = seen.find(prefix + t.name);
      if (it == seen.end()) throw FormatError(fmt::format("missing tensor '{}'", prefix + t.name));
      std::copy(it->second.begin(), it->second.end(), out.begin() + static_cast<long>(t.offset));
    }
  };
  gather("", ckpt.params.values());
  const bool has_m = seen.contains("adam.m." + layout.tensors.front().name);
  const bool has_v = seen.contains("adam.v." + layout.tensors.front().name);
  if (has_m != has_v) throw FormatError("checkpoint carries only one Adam moment");
  if (has_m) {
    ckpt.adam_m.emplace();
    ckpt.adam_v.emplace();
    gather("adam.m.", *ckpt.adam_m);
    gather("adam.v.", *ckpt.adam_v);
  }
  const std::size_t expected = layout.tensors.size() * (has_m ? 3 : 1);
  if (seen.size() != expected) throw FormatError("checkpoint tensor count mismatch");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  detail::write_file(path, bytes);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return decode_checkpoint(bytes);
}

}  // namespace tokenswap
