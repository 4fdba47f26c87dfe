#include "tokenswap/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "tokenswap/errors.hpp"

namespace tokenswap {

Eigen::VectorXd masked_features(const DiTParams<float>& params, const Image& image,
                                const BinaryMask& mask) {
  const TokenGrid tokens = image_to_tokens(image, params.config().patch);
  if (tokens.shape() != mask.shape()) {
    throw DimensionError(fmt::format("image grid {} vs mask {}", tokens.shape_string(),
                                     mask.shape_string()));
  }
  if (mask.none()) throw ParameterError("masked similarity needs a nonempty mask");
  const RefSegment seg = make_masked_ref_segment(tokens, mask, PositionStrategy::original);
  const RowMatrix h = dit_features<float>(params, seg.tokens, seg.coords, 0.0, sprites::null_prompt());
  return h.colwise().mean().transpose();
}

double masked_similarity(const DiTParams<float>& params, const Image& a, const BinaryMask& mask_a,
                         const Image& b, const BinaryMask& mask_b) {
  const Eigen::VectorXd fa = masked_features(params, a, mask_a);
  const Eigen::VectorXd fb = masked_features(params, b, mask_b);
  const double denom = fa.norm() * fb.norm();
  if (denom == 0.0) return 0.0;
  return std::clamp(fa.dot(fb) / denom, 0.0, 1.0);
}

double masked_similarity(const DiTParams<float>& params, const Image& generated,
                         const ReferenceBundle& bundle, const BinaryMask& target) {
  return masked_similarity(params, generated, target, tokens_to_image(bundle.clean), bundle.mask);
}

namespace {

double dist2(const Rgb& a, const Rgb& b) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return s;
}

// Direction of the colour, so shaded texture pixels keep their hue.
Rgb chroma(const Rgb& c) {
  const double n = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
  if (n == 0.0) return {0.0, 0.0, 0.0};
  return {c[0] / n, c[1] / n, c[2] / n};
}

template <std::size_t N>
int nearest(const std::array<Rgb, N>& palette, const Rgb& c, bool by_chroma) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const Rgb q = by_chroma ? chroma(c) : c;
  for (std::size_t i = 0; i < N; ++i) {
    const double d = dist2(q, by_chroma ? chroma(palette[i]) : palette[i]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Largest 4-connected component of the subject pixels, so stray pixels in
// generated images do not distort the moments.
std::vector<std::array<int, 2>> largest_component(const std::vector<std::array<int, 2>>& pixels,
                                                  int height, int width) {
  std::vector<int> label(static_cast<std::size_t>(height) * width, -1);
  for (const auto& p : pixels) label[static_cast<std::size_t>(p[0]) * width + p[1]] = 0;
  std::vector<std::array<int, 2>> best;
  std::vector<std::array<int, 2>> stack;
  for (const auto& seed : pixels) {
    if (label[static_cast<std::size_t>(seed[0]) * width + seed[1]] != 0) continue;
    std::vector<std::array<int, 2>> comp;
    stack.push_back(seed);
    label[static_cast<std::size_t>(seed[0]) * width + seed[1]] = 1;
    while (!stack.empty()) {
      const auto p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const int dr[4] = {-1, 1, 0, 0};
      const int dc[4] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const int r = p[0] + dr[k];
        const int c = p[1] + dc[k];
        if (r < 0 || c < 0 || r >= height || c >= width) continue;
        int& l = label[static_cast<std::size_t>(r) * width + c];
        if (l != 0) continue;
        l = 1;
        stack.push_back({r, c});
      }
    }
    if (comp.size() > best.size()) best = std::move(comp);
  }
  return best;
}

// Bounding-box fill separates squares; the vertical skewness of a triangle
// with its apex up is about -0.57, against 0 for the symmetric shapes.
ShapeGuess classify_shape(const std::vector<std::array<int, 2>>& pixels) {
  if (pixels.size() < 4) return ShapeGuess::none;
  int y0 = pixels.front()[0];
  int y1 = y0;
  int x0 = pixels.front()[1];
  int x1 = x0;
  double my = 0.0;
  for (const auto& p : pixels) {
    y0 = std::min(y0, p[0]);
    y1 = std::max(y1, p[0]);
    x0 = std::min(x0, p[1]);
    x1 = std::max(x1, p[1]);
    my += p[0];
  }
  const double n = static_cast<double>(pixels.size());
  my /= n;
  double m2 = 0.0;
  double m3 = 0.0;
  for (const auto& p : pixels) {
    const double d = p[0] - my;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  const double skew = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  const double fill = n / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
  if (skew < -0.25) return ShapeGuess::triangle;
  if (fill >= 0.95) return ShapeGuess::square;
  return ShapeGuess::circle;
}

ShapeGuess expected_shape(int token) {
  switch (token) {
    case 0: return ShapeGuess::circle;
    case 1: return ShapeGuess::square;
    case 2: return ShapeGuess::triangle;
    default: return ShapeGuess::none;
  }
}

}  // namespace

AttributeScores attribute_scores(const Image& image, const sprites::Prompt& prompt) {
  sprites::validate_prompt(prompt);
  AttributeScores s;
  if (image.height == 0 || image.width == 0) return s;
  const Rgb bg = border_median(image);
  const int want_color = prompt[1] - sprites::kColorBase;
  const int want_bg = prompt[2] - sprites::kBackgroundBase;
  std::vector<std::array<int, 2>> subject;
  std::size_t color_hits = 0;
  std::size_t bg_hits = 0;
  std::size_t bg_total = 0;
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) {
      const Rgb p = image.pixel(r, c);
      if (std::sqrt(dist2(p, bg)) > kSubjectThreshold) {
        subject.push_back({r, c});
        if (nearest(sprites::subject_palette(), p, true) == want_color) ++color_hits;
      } else {
        ++bg_total;
        if (nearest(sprites::background_palette(), p, false) == want_bg) ++bg_hits;
      }
    }
  }
  if (!subject.empty() && want_color >= 0 && want_color < sprites::kColors) {
    s.color = static_cast<double>(color_hits) / static_cast<double>(subject.size());
  }
  if (bg_total > 0 && want_bg >= 0 && want_bg < sprites::kBackgrounds) {
    s.background = static_cast<double>(bg_hits) / static_cast<double>(bg_total);
  }
  s.shape_guess = classify_shape(largest_component(subject, image.height, image.width));
  s.shape = s.shape_guess != ShapeGuess::none && s.shape_guess == expected_shape(prompt[0]) ? 1.0 : 0.0;
  return s;
}

double prompt_consistency(const Image& image, const sprites::Prompt& prompt) {
  return attribute_scores(image, prompt).mean();
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("spearman needs two equal-length series of at least two values");
  }
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace tokenswap
