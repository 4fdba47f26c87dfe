#include "tokenswap/rope_attention.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "tokenswap/attention_kernels.hpp"
#include "tokenswap/errors.hpp"

namespace tokenswap {

std::string to_string(PositionStrategy s) {
  switch (s) {
    case PositionStrategy::original: return "original";
    case PositionStrategy::zero: return "zero";
    case PositionStrategy::shifted: return "shifted";
  }
  return "unknown";
}

PositionStrategy parse_position_strategy(const std::string& s) {
  if (s == "original") return PositionStrategy::original;
  if (s == "zero") return PositionStrategy::zero;
  if (s == "shifted") return PositionStrategy::shifted;
  throw ParameterError(fmt::format("unknown position strategy '{}'", s));
}

PositionAssignment assign_positions(GridShape shape, PositionStrategy strategy,
                                    GridCoord offset) {
  if (shape.height <= 0 || shape.width <= 0) {
    throw ParameterError(fmt::format("invalid grid shape {}x{}", shape.height, shape.width));
  }
  PositionAssignment out;
  out.strategy = strategy;
  out.offset = strategy == PositionStrategy::shifted ? offset : GridCoord{};
  out.coords.reserve(shape.cells());
  for (int row = 0; row < shape.height; ++row) {
    for (int col = 0; col < shape.width; ++col) {
      switch (strategy) {
        case PositionStrategy::original: out.coords.push_back({col, row}); break;
        case PositionStrategy::zero: out.coords.push_back({0, 0}); break;
        case PositionStrategy::shifted:
          out.coords.push_back({col + offset.i, row + offset.j});
          break;
      }
    }
  }
  return out;
}

std::vector<GridCoord> anchor_positions(int count) {
  return std::vector<GridCoord>(static_cast<std::size_t>(count), GridCoord{});
}

std::vector<double> rope_rotate(std::span<const double> token, GridCoord coord, double base) {
  if (token.empty() || token.size() % 4 != 0) {
    throw ParameterError(fmt::format("rope_rotate needs a dimension divisible by 4, got {}",
                                     token.size()));
  }
  const int d = static_cast<int>(token.size());
  Mat<double> m(1, d);
  for (int c = 0; c < d; ++c) m(0, c) = token[c];
  const GridCoord coords[1] = {coord};
  const auto table = kernels::build_rope_table<double>(coords, d, base);
  kernels::rope_apply(m, table, false);
  return {m.data(), m.data() + d};
}

void AttentionRecord::reset(int n_layers, int n_heads, int seq_length,
                            std::vector<Segment> segs) {
  layers = n_layers;
  heads = n_heads;
  length = seq_length;
  segments = std::move(segs);
  weights.assign(static_cast<std::size_t>(n_layers) * n_heads * seq_length * seq_length, 0.0f);
}

const Segment* AttentionRecord::find(SegmentKind kind, int nth) const {
  for (const auto& s : segments) {
    if (s.kind == kind && nth-- == 0) return &s;
  }
  return nullptr;
}

void AttentionRecord::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  out << "layer,head,query,key,weight\n";
  for (int l = 0; l < layers; ++l) {
    for (int h = 0; h < heads; ++h) {
      for (int q = 0; q < length; ++q) {
        for (int k = 0; k < length; ++k) {
          out << fmt::format("{},{},{},{},{:.9g}\n", l, h, q, k, weight(l, h, q, k));
        }
      }
    }
  }
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

MmAttentionResult mm_attention(std::span<const AttentionSegmentInput> segments,
                               const AttentionParams& params, bool record) {
  if (segments.empty()) throw ParameterError("mm_attention needs at least one segment");
  const auto d = segments.front().tokens.cols();
  if (params.heads < 1 || d % (4 * params.heads) != 0) {
    throw ParameterError(fmt::format(
        "model dimension {} must be divisible by 4 * heads ({} heads)", d, params.heads));
  }
  Eigen::Index total = 0;
  std::vector<Segment> segs;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.tokens.cols() != d) {
      throw DimensionError(fmt::format("segment {} has dimension {}, expected {}", s,
                                       seg.tokens.cols(), d));
    }
    if (static_cast<Eigen::Index>(seg.coords.size()) != seg.tokens.rows()) {
      throw DimensionError(fmt::format("segment {} has {} tokens but {} coordinates", s,
                                       seg.tokens.rows(), seg.coords.size()));
    }
    segs.push_back({seg.kind, static_cast<int>(total), static_cast<int>(seg.tokens.rows())});
    total += seg.tokens.rows();
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& w = params.layers[l];
    for (const RowMatrix* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
      if (m->rows() != d || m->cols() != d) {
        throw DimensionError(fmt::format("layer {} projection is {}x{}, expected {}x{}", l,
                                         m->rows(), m->cols(), d, d));
      }
    }
  }

  RowMatrix x(total, d);
  std::vector<GridCoord> coords;
  coords.reserve(static_cast<std::size_t>(total));
  for (std::size_t s = 0; s < segments.size(); ++s) {
    x.middleRows(segs[s].begin, segs[s].length) = segments[s].tokens;
    coords.insert(coords.end(), segments[s].coords.begin(), segments[s].coords.end());
  }

  MmAttentionResult result;
  if (record) {
    result.record.emplace();
    result.record->reset(static_cast<int>(params.layers.size()), params.heads,
                         static_cast<int>(total), segs);
  }
  const auto table =
      kernels::build_rope_table<double>(coords, static_cast<int>(d) / params.heads,
                                        params.rope_base);
  RowMatrix q, k, v, attn;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& w = params.layers[l];
    q.noalias() = x * w.wq;
    k.noalias() = x * w.wk;
    v.noalias() = x * w.wv;
    kernels::rope_apply(q, table, false);
    kernels::rope_apply(k, table, false);
    kernels::attention_forward<double>(q, k, v, params.heads, attn, nullptr, nullptr,
                                       result.record ? &*result.record : nullptr,
                                       static_cast<int>(l));
    x.noalias() = attn * w.wo;
  }
  for (const auto& s : segs) result.outputs.push_back(x.middleRows(s.begin, s.length));
  return result;
}

std::vector<CellPair> identity_pairing(int cells) {
  std::vector<CellPair> out(static_cast<std::size_t>(cells));
  for (int c = 0; c < cells; ++c) out[c] = {c, c};
  return out;
}

double matched_position_score(const AttentionRecord& record, std::span<const CellPair> pairing,
                              int reference_segment) {
  const Segment* den = record.find(SegmentKind::denoising);
  const Segment* ref = record.find(SegmentKind::reference, reference_segment);
  if (!den || !ref) {
    throw ParameterError("attention record lacks a denoising or reference segment");
  }
  if (pairing.empty()) throw ParameterError("matched_position_score needs a non-empty pairing");
  for (const auto& p : pairing) {
    if (p.denoising < 0 || p.denoising >= den->length || p.reference < 0 ||
        p.reference >= ref->length) {
      throw OutOfBoundsError(fmt::format("pair ({}, {}) outside segments of length {} and {}",
                                         p.denoising, p.reference, den->length, ref->length));
    }
  }
  double acc = 0.0;
  for (int l = 0; l < record.layers; ++l) {
    for (int h = 0; h < record.heads; ++h) {
      for (const auto& p : pairing) {
        acc += record.weight(l, h, den->begin + p.denoising, ref->begin + p.reference);
      }
    }
  }
  return acc / (static_cast<double>(record.layers) * record.heads * pairing.size());
}

}  // namespace tokenswap
