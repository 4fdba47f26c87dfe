#include <cmath>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "tokenswap/errors.hpp"
#include "tokenswap/rng.hpp"
#include "tokenswap/rope_attention.hpp"

using namespace tokenswap;

namespace {

std::vector<double> random_vector(int d, std::uint64_t seed) {
  CounterRng rng(seed, 11);
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  return v;
}

RowMatrix random_matrix(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed, 12);
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

AttentionParams random_attention(int d, int heads, int layers, std::uint64_t seed) {
  AttentionParams p;
  p.heads = heads;
  for (int l = 0; l < layers; ++l) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.layers.push_back({random_matrix(d, d, seed * 8 + 4 * l, s),
                        random_matrix(d, d, seed * 8 + 4 * l + 1, s),
                        random_matrix(d, d, seed * 8 + 4 * l + 2, s),
                        random_matrix(d, d, seed * 8 + 4 * l + 3, s)});
  }
  return p;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

std::vector<GridCoord> random_coords(int n, std::uint64_t seed) {
  CounterRng rng(seed, 13);
  std::vector<GridCoord> c(n);
  for (auto& g : c) g = {static_cast<int>(rng.below(16)), static_cast<int>(rng.below(16))};
  return c;
}

}  // namespace

TEST(RopeRotate, IdentityAtOrigin) {
  const auto v = random_vector(16, 1);
  EXPECT_EQ(rope_rotate(v, {0, 0}), v);
}

TEST(RopeRotate, PreservesNorm) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto v = random_vector(32, s);
    const auto r = rope_rotate(v, {static_cast<int>(s % 17), static_cast<int>(s % 5) * 3});
    EXPECT_NEAR(std::sqrt(dot(r, r)), std::sqrt(dot(v, v)), 1e-6);
  }
}

TEST(RopeRotate, FourDimensionalHandCase) {
  // d = 4: one rotary pair per axis, both with frequency 1.
  const auto r = rope_rotate(std::vector<double>{1, 0, 0, 0}, {1, 0});
  EXPECT_NEAR(r[0], std::cos(1.0), 1e-15);
  EXPECT_NEAR(r[1], std::sin(1.0), 1e-15);
  EXPECT_EQ(r[2], 0.0);
  EXPECT_EQ(r[3], 0.0);
  const auto s = rope_rotate(std::vector<double>{0, 0, 2, 1}, {0, 2});
  EXPECT_NEAR(s[2], 2 * std::cos(2.0) - std::sin(2.0), 1e-14);
  EXPECT_NEAR(s[3], 2 * std::sin(2.0) + std::cos(2.0), 1e-14);
  EXPECT_EQ(s[0], 0.0);
}

TEST(RopeRotate, RejectsBadDimension) {
  EXPECT_THROW(rope_rotate(std::vector<double>(6, 1.0), {1, 1}), ParameterError);
}

TEST(RopeRotate, LogitsDependOnlyOnOffset) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto q = random_vector(16, 2 * s);
    const auto k = random_vector(16, 2 * s + 1);
    const GridCoord a{static_cast<int>(s % 9), static_cast<int>(s % 4)};
    const GridCoord b{static_cast<int>(s % 6), static_cast<int>(s % 11)};
    const GridCoord shift{static_cast<int>(s % 13) - 6, static_cast<int>(s % 7) + 20};
    const double base = dot(rope_rotate(q, a), rope_rotate(k, b));
    const double moved = dot(rope_rotate(q, {a.i + shift.i, a.j + shift.j}),
                             rope_rotate(k, {b.i + shift.i, b.j + shift.j}));
    EXPECT_NEAR(base, moved, 1e-6);
  }
}

TEST(AssignPositions, Strategies) {
  const auto zero = assign_positions({3, 5}, PositionStrategy::zero);
  for (const auto& c : zero.coords) EXPECT_EQ(c, (GridCoord{0, 0}));
  const auto orig = assign_positions({2, 2}, PositionStrategy::original);
  const std::vector<GridCoord> want{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  EXPECT_EQ(orig.coords, want);
  const GridShape shape{16, 16};
  const auto shifted = assign_positions(shape, PositionStrategy::shifted, width_shift(shape));
  ASSERT_EQ(shifted.coords.size(), 256u);
  for (std::size_t c = 0; c < shifted.coords.size(); ++c) {
    EXPECT_GE(shifted.coords[c].i, 16);
    EXPECT_LT(shifted.coords[c].i, 32);
    EXPECT_EQ(shifted.coords[c].i, static_cast<int>(c % 16) + 16);
    EXPECT_EQ(shifted.coords[c].j, static_cast<int>(c / 16));
  }
  for (const auto& c : anchor_positions(4)) EXPECT_EQ(c, (GridCoord{0, 0}));
}

TEST(MmAttention, SingleTokenReturnsValueProjection) {
  const auto p = random_attention(8, 2, 1, 3);
  AttentionSegmentInput seg{SegmentKind::denoising, random_matrix(1, 8, 5), {{3, 4}}};
  const auto r = mm_attention(std::span(&seg, 1), p, false);
  const RowMatrix want = seg.tokens * p.layers[0].wv * p.layers[0].wo;
  EXPECT_LT((r.outputs[0] - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MmAttention, RowsAreStochastic) {
  const auto p = random_attention(16, 4, 2, 7);
  std::vector<AttentionSegmentInput> segs{
      {SegmentKind::denoising, random_matrix(9, 16, 1), random_coords(9, 1)},
      {SegmentKind::reference, random_matrix(5, 16, 2), random_coords(5, 2)},
      {SegmentKind::text, random_matrix(3, 16, 3), anchor_positions(3)}};
  const auto r = mm_attention(segs, p, true);
  ASSERT_TRUE(r.record.has_value());
  const auto& rec = *r.record;
  EXPECT_EQ(rec.length, 17);
  for (int l = 0; l < rec.layers; ++l)
    for (int h = 0; h < rec.heads; ++h)
      for (int q = 0; q < rec.length; ++q) {
        double sum = 0.0;
        for (int k = 0; k < rec.length; ++k) sum += rec.weight(l, h, q, k);
        EXPECT_NEAR(sum, 1.0, 1e-5);
      }
}

TEST(MmAttention, SegmentsEqualConcatenation) {
  const auto p = random_attention(16, 2, 2, 9);
  const RowMatrix a = random_matrix(6, 16, 21);
  const RowMatrix b = random_matrix(4, 16, 22);
  const auto ca = random_coords(6, 23);
  const auto cb = random_coords(4, 24);
  std::vector<AttentionSegmentInput> two{{SegmentKind::denoising, a, ca},
                                         {SegmentKind::reference, b, cb}};
  RowMatrix ab(10, 16);
  ab << a, b;
  auto cab = ca;
  cab.insert(cab.end(), cb.begin(), cb.end());
  AttentionSegmentInput one{SegmentKind::denoising, ab, cab};
  const auto r2 = mm_attention(two, p, false);
  const auto r1 = mm_attention(std::span(&one, 1), p, false);
  RowMatrix joined(10, 16);
  joined << r2.outputs[0], r2.outputs[1];
  EXPECT_LT((joined - r1.outputs[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MmAttention, PermutationEquivariantAcrossSegments) {
  const auto p = random_attention(16, 4, 2, 10);
  std::vector<AttentionSegmentInput> segs{
      {SegmentKind::denoising, random_matrix(5, 16, 31), random_coords(5, 31)},
      {SegmentKind::reference, random_matrix(7, 16, 32), random_coords(7, 32)},
      {SegmentKind::text, random_matrix(2, 16, 33), anchor_positions(2)}};
  std::vector<AttentionSegmentInput> swapped{segs[2], segs[0], segs[1]};
  const auto r = mm_attention(segs, p, false);
  const auto s = mm_attention(swapped, p, false);
  EXPECT_LT((r.outputs[0] - s.outputs[1]).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((r.outputs[1] - s.outputs[2]).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((r.outputs[2] - s.outputs[0]).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MmAttention, DimensionMismatchNamesSegment) {
  const auto p = random_attention(8, 2, 1, 1);
  std::vector<AttentionSegmentInput> segs{
      {SegmentKind::denoising, random_matrix(2, 8, 1), random_coords(2, 1)},
      {SegmentKind::reference, random_matrix(2, 12, 2), random_coords(2, 2)}};
  try {
    mm_attention(segs, p, false);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("segment 1"), std::string::npos);
  }
}

namespace {

AttentionRecord uniform_record(int den, int ref, int text) {
  AttentionRecord r;
  const int n = den + ref + text;
  r.reset(2, 3, n,
          {{SegmentKind::denoising, 0, den},
           {SegmentKind::reference, den, ref},
           {SegmentKind::text, den + ref, text}});
  std::fill(r.weights.begin(), r.weights.end(), 1.0f / static_cast<float>(n));
  return r;
}

}  // namespace

TEST(MatchedPositionScore, UniformAttention) {
  const auto r = uniform_record(4, 4, 2);
  EXPECT_NEAR(matched_position_score(r, identity_pairing(4)), 0.1, 1e-7);
}

TEST(MatchedPositionScore, AllMassOnMatchedPairs) {
  auto r = uniform_record(4, 4, 1);
  std::fill(r.weights.begin(), r.weights.end(), 0.0f);
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 3; ++h)
      for (int q = 0; q < 4; ++q) r.head_map(l, h)[q * r.length + 4 + q] = 1.0f;
  EXPECT_DOUBLE_EQ(matched_position_score(r, identity_pairing(4)), 1.0);
}

TEST(MatchedPositionScore, MatchesDirectSum) {
  auto r = uniform_record(5, 5, 2);
  CounterRng rng(4, 4);
  for (float& w : r.weights) w = static_cast<float>(rng.uniform());
  const auto pairs = identity_pairing(5);
  double acc = 0.0;
  for (int l = 0; l < 2; ++l)
    for (int h = 0; h < 3; ++h)
      for (int c = 0; c < 5; ++c) acc += r.weight(l, h, c, 5 + c);
  EXPECT_NEAR(matched_position_score(r, pairs), acc / 30.0, 1e-12);
}

TEST(MatchedPositionScore, MissingSegmentThrows) {
  AttentionRecord r;
  r.reset(1, 1, 2, {{SegmentKind::denoising, 0, 2}});
  EXPECT_THROW(matched_position_score(r, identity_pairing(2)), ParameterError);
}

TEST(MatchedPositionScore, ZeroPositionsMakePairingIrrelevant) {
  // With every reference token at (0,0), identical reference contents are
  // indistinguishable, so any pairing sees the same weights.
  const auto p = random_attention(16, 2, 2, 5);
  const RowMatrix ref_row = random_matrix(1, 16, 77);
  RowMatrix ref(6, 16);
  for (int i = 0; i < 6; ++i) ref.row(i) = ref_row;
  std::vector<AttentionSegmentInput> segs{
      {SegmentKind::denoising, random_matrix(6, 16, 78), random_coords(6, 78)},
      {SegmentKind::reference, ref, assign_positions({2, 3}, PositionStrategy::zero).coords}};
  const auto rec = *mm_attention(segs, p, true).record;
  std::vector<CellPair> rotated;
  for (int c = 0; c < 6; ++c) rotated.push_back({c, (c + 2) % 6});
  EXPECT_NEAR(matched_position_score(rec, identity_pairing(6)),
              matched_position_score(rec, rotated), 1e-7);
}
