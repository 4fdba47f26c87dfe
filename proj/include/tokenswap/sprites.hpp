#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tokenswap/grid_mask.hpp"
#include "tokenswap/image.hpp"

namespace tokenswap::sprites {

enum class Shape { circle = 0, square = 1, triangle = 2 };

inline constexpr int kShapes = 3;
inline constexpr int kColors = 6;
inline constexpr int kBackgrounds = 6;
inline constexpr int kTextures = 16;
inline constexpr int kImageSize = 32;
inline constexpr int kPromptLength = 4;

// Vocabulary layout: shapes, subject colors, backgrounds, textures, null.
inline constexpr int kColorBase = kShapes;
inline constexpr int kBackgroundBase = kColorBase + kColors;
inline constexpr int kTextureBase = kBackgroundBase + kBackgrounds;
inline constexpr int kNullToken = kTextureBase + kTextures;
inline constexpr int kVocabSize = kNullToken + 1;

using Prompt = std::vector<int>;

const std::array<Rgb, kColors>& subject_palette();
const std::array<Rgb, kBackgrounds>& background_palette();

std::string token_name(int id);
int parse_token(const std::string& name);
// Whitespace/comma separated token names, e.g. "circle red bg-white tex3".
Prompt parse_prompt(const std::string& text);
std::string prompt_to_string(const Prompt& p);
Prompt null_prompt();
void validate_prompt(const Prompt& p);

int shape_token(Shape s);
int color_token(int color);
int background_token(int background);
int texture_token(int texture);

struct SpriteSpec {
  Shape shape = Shape::circle;
  int color = 0;
  int background = 0;
  int texture = 0;
  double cx = 16.0;  // pixel-space center, x to the right
  double cy = 16.0;  // y downward
  double radius = 6.0;

  Prompt prompt() const;
  // Analytic area centroid (x, y) in pixel coordinates.
  std::array<double, 2> centroid() const;
  // Coverage test for the pixel whose center is (px, py).
  bool covers(double px, double py) const;
};

struct SpriteSample {
  Image image;
  Prompt prompt;
  BinaryMask mask;  // token resolution
  SpriteSpec spec;
};

SpriteSpec random_sprite_spec(std::uint64_t seed, std::uint64_t index);
// Pattern value in {0, 1} for the given texture at a pixel offset from the
// sprite's bounding-box origin.
int texture_pattern(int texture, int dx, int dy);
SpriteSample render_sprite(const SpriteSpec& spec, int patch = 2);
std::vector<SpriteSample> generate_sprite_dataset(int count, std::uint64_t seed);

}  // namespace tokenswap::sprites
