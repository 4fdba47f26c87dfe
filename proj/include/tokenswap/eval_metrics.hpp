#pragma once

#include <array>
#include <span>

#include "tokenswap/grid_mask.hpp"
#include "tokenswap/image.hpp"
#include "tokenswap/personalize.hpp"
#include "tokenswap/sprites.hpp"
#include "tokenswap/toy_dit.hpp"

namespace tokenswap {

// Mean-pooled penultimate-block features of the masked tokens. The sequence
// holds only those tokens (at their grid coordinates) and the null prompt,
// evaluated at t = 0, so content outside the mask cannot reach them.
Eigen::VectorXd masked_features(const DiTParams<float>& params, const Image& image,
                                const BinaryMask& mask);

// Cosine similarity of masked_features, clamped to [0, 1]. Symmetric in its
// two (image, mask) arguments.
double masked_similarity(const DiTParams<float>& params, const Image& a, const BinaryMask& mask_a,
                         const Image& b, const BinaryMask& mask_b);
double masked_similarity(const DiTParams<float>& params, const Image& generated,
                         const ReferenceBundle& bundle, const BinaryMask& target);

enum class ShapeGuess { none, circle, square, triangle };

struct AttributeScores {
  double color = 0.0;       // share of subject pixels whose hue is nearest the prompt colour
  double background = 0.0;  // share of other pixels nearest the prompt background
  double shape = 0.0;       // 1 when the coarse shape class matches
  ShapeGuess shape_guess = ShapeGuess::none;

  double mean() const { return (color + background + shape) / 3.0; }
};

// Pixels farther than this from the border colour count as subject.
inline constexpr double kSubjectThreshold = 0.1;

AttributeScores attribute_scores(const Image& image, const sprites::Prompt& prompt);
// Mean of the three attribute scores, in [0, 1].
double prompt_consistency(const Image& image, const sprites::Prompt& prompt);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace tokenswap
