#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tokenswap/grid_mask.hpp"

namespace tokenswap {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrix = Mat<double>;

// 2D token coordinate: i runs along the width (column), j along the height (row).
struct GridCoord {
  int i = 0;
  int j = 0;
  bool operator==(const GridCoord&) const = default;
};

enum class PositionStrategy { original, zero, shifted };

std::string to_string(PositionStrategy s);
PositionStrategy parse_position_strategy(const std::string& s);

struct PositionAssignment {
  PositionStrategy strategy = PositionStrategy::original;
  GridCoord offset{};
  std::vector<GridCoord> coords;  // one per token, row-major over the grid
};

// Positions for an h x w grid. `offset` is only used by the shifted strategy;
// the conventional non-overlapping shift is `width_shift(shape)`.
PositionAssignment assign_positions(GridShape shape, PositionStrategy strategy,
                                    GridCoord offset = {});
inline GridCoord width_shift(GridShape shape) { return {shape.width, 0}; }
// Text tokens sit at the fixed anchor (0, 0).
std::vector<GridCoord> anchor_positions(int count);

// Base 100 rather than 10000: on a 16-cell axis the higher base leaves
// only the first frequency pair distinguishing nearby cells.
inline constexpr double kRopeBase = 100.0;

// Rotates one vector by R(i, j). The first half of the rotary pairs follows
// the i axis, the second half the j axis; frequencies base^(-k / (d / 4)).
std::vector<double> rope_rotate(std::span<const double> token, GridCoord coord,
                                double base = kRopeBase);

enum class SegmentKind { denoising, reference, text };

struct Segment {
  SegmentKind kind = SegmentKind::denoising;
  int begin = 0;
  int length = 0;
};

// Row-stochastic attention maps captured during a forward pass.
struct AttentionRecord {
  int layers = 0;
  int heads = 0;
  int length = 0;
  std::vector<Segment> segments;
  std::vector<float> weights;  // [layer][head][query][key]

  void reset(int n_layers, int n_heads, int seq_length, std::vector<Segment> segs);
  float weight(int layer, int head, int query, int key) const {
    return weights[((static_cast<std::size_t>(layer) * heads + head) * length + query) * length +
                   key];
  }
  float* head_map(int layer, int head) {
    return weights.data() + (static_cast<std::size_t>(layer) * heads + head) * length * length;
  }
  // nth segment of the given kind, or nullptr.
  const Segment* find(SegmentKind kind, int nth = 0) const;
  void write_csv(const std::filesystem::path& path) const;
};

struct AttentionLayerWeights {
  RowMatrix wq, wk, wv, wo;  // d x d each, applied as x * W
};

struct AttentionParams {
  int heads = 1;
  double rope_base = kRopeBase;
  std::vector<AttentionLayerWeights> layers;
};

struct AttentionSegmentInput {
  SegmentKind kind = SegmentKind::denoising;
  RowMatrix tokens;                // n x d
  std::vector<GridCoord> coords;   // n entries
};

struct MmAttentionResult {
  std::vector<RowMatrix> outputs;  // one per input segment
  std::optional<AttentionRecord> record;
};

// Bidirectional scaled dot-product attention over the concatenation of all
// segments. Queries and keys are rotated by their token's coordinate, values
// are not. Layers are applied in sequence without residuals.
MmAttentionResult mm_attention(std::span<const AttentionSegmentInput> segments,
                               const AttentionParams& params, bool record);

// Denoising cell -> reference cell pairing, as indices inside each segment.
struct CellPair {
  int denoising = 0;
  int reference = 0;
};
std::vector<CellPair> identity_pairing(int cells);

// Mean attention weight from each paired denoising token to its reference
// partner, over all layers and heads. Uses the nth reference segment.
double matched_position_score(const AttentionRecord& record, std::span<const CellPair> pairing,
                              int reference_segment = 0);

}  // namespace tokenswap
