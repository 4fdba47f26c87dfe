#include "tokenswap/sprites.hpp"

#include <cmath>
#include <sstream>

#include <fmt/format.h>

#include "tokenswap/errors.hpp"
#include "tokenswap/rng.hpp"

namespace tokenswap::sprites {

namespace {

constexpr const char* kShapeNames[kShapes] = {"circle", "square", "triangle"};
constexpr const char* kColorNames[kColors] = {"red", "green", "blue", "yellow", "magenta", "cyan"};
constexpr const char* kBackgroundNames[kBackgrounds] = {"bg-black", "bg-white", "bg-gray",
                                                        "bg-navy",  "bg-brown", "bg-olive"};
constexpr double kTextureShade = 0.3;

}  // namespace

const std::array<Rgb, kColors>& subject_palette() {
  static const std::array<Rgb, kColors> p = {{{0.90, 0.12, 0.12},
                                              {0.15, 0.80, 0.20},
                                              {0.15, 0.30, 0.95},
                                              {0.95, 0.85, 0.15},
                                              {0.85, 0.20, 0.85},
                                              {0.15, 0.85, 0.85}}};
  return p;
}

const std::array<Rgb, kBackgrounds>& background_palette() {
  static const std::array<Rgb, kBackgrounds> p = {{{0.05, 0.05, 0.05},
                                                   {0.95, 0.95, 0.95},
                                                   {0.50, 0.50, 0.50},
                                                   {0.08, 0.10, 0.35},
                                                   {0.40, 0.26, 0.12},
                                                   {0.38, 0.42, 0.10}}};
  return p;
}

std::string token_name(int id) {
  if (id < 0 || id >= kVocabSize) throw VocabularyError(fmt::format("token id {} out of range", id));
  if (id < kColorBase) return kShapeNames[id];
  if (id < kBackgroundBase) return kColorNames[id - kColorBase];
  if (id < kTextureBase) return kBackgroundNames[id - kBackgroundBase];
  if (id < kNullToken) return fmt::format("tex{}", id - kTextureBase);
  return "null";
}

int parse_token(const std::string& name) {
  for (int id = 0; id < kVocabSize; ++id) {
    if (token_name(id) == name) return id;
  }
  throw VocabularyError(fmt::format("unknown prompt token '{}'", name));
}

Prompt parse_prompt(const std::string& text) {
  std::string cleaned = text;
  for (auto& ch : cleaned) {
    if (ch == ',') ch = ' ';
  }
  std::istringstream in(cleaned);
  Prompt p;
  std::string tok;
  while (in >> tok) p.push_back(parse_token(tok));
  validate_prompt(p);
  return p;
}

std::string prompt_to_string(const Prompt& p) {
  std::string out;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (i) out += ' ';
    out += token_name(p[i]);
  }
  return out;
}

Prompt null_prompt() { return Prompt(kPromptLength, kNullToken); }

void validate_prompt(const Prompt& p) {
  if (p.size() != static_cast<std::size_t>(kPromptLength)) {
    throw VocabularyError(fmt::format("prompt needs {} tokens, got {}", kPromptLength, p.size()));
  }
  for (int id : p) {
    if (id < 0 || id >= kVocabSize) {
      throw VocabularyError(fmt::format("unknown vocabulary id {}", id));
    }
  }
}

int shape_token(Shape s) { return static_cast<int>(s); }
int color_token(int color) { return kColorBase + color; }
int background_token(int background) { return kBackgroundBase + background; }
int texture_token(int texture) { return kTextureBase + texture; }

Prompt SpriteSpec::prompt() const {
  return {shape_token(shape), color_token(color), background_token(background),
          texture_token(texture)};
}

std::array<double, 2> SpriteSpec::centroid() const {
  if (shape == Shape::triangle) return {cx, cy + radius / 3.0};
  return {cx, cy};
}

bool SpriteSpec::covers(double px, double py) const {
  const double dx = px - cx;
  const double dy = py - cy;
  switch (shape) {
    case Shape::circle: return dx * dx + dy * dy <= radius * radius;
    case Shape::square: {
      const double half = 0.85 * radius;
      return std::abs(dx) <= half && std::abs(dy) <= half;
    }
    case Shape::triangle: {
      // Apex at (cx, cy - r), base of width 2r at y = cy + r.
      const double depth = py - (cy - radius);
      if (depth < 0.0 || depth > 2.0 * radius) return false;
      return std::abs(dx) <= depth / 2.0;
    }
  }
  return false;
}

int texture_pattern(int texture, int dx, int dy) {
  const int kind = texture % 4;
  const int period = 2 + texture / 4;
  switch (kind) {
    case 0: return (dy / period) % 2;
    case 1: return (dx / period) % 2;
    case 2: return ((dx + dy) / period) % 2;
    default: return ((dx / period) + (dy / period)) % 2;
  }
}

SpriteSpec random_sprite_spec(std::uint64_t seed, std::uint64_t index) {
  CounterRng rng(seed, stream_id(streams::kSprite, index));
  SpriteSpec s;
  s.shape = static_cast<Shape>(rng.below(kShapes));
  s.color = static_cast<int>(rng.below(kColors));
  s.background = static_cast<int>(rng.below(kBackgrounds));
  s.texture = static_cast<int>(rng.below(kTextures));
  s.radius = 5.0 + 3.0 * rng.uniform();
  const double lo = s.radius + 1.0;
  const double hi = kImageSize - s.radius - 1.0;
  s.cx = lo + (hi - lo) * rng.uniform();
  s.cy = lo + (hi - lo) * rng.uniform();
  return s;
}

SpriteSample render_sprite(const SpriteSpec& spec, int patch) {
  if (spec.color < 0 || spec.color >= kColors || spec.background < 0 ||
      spec.background >= kBackgrounds || spec.texture < 0 || spec.texture >= kTextures) {
    throw ParameterError("sprite attribute index out of range");
  }
  if (kImageSize % patch != 0) throw ParameterError("patch must divide the sprite size");
  SpriteSample out;
  out.spec = spec;
  out.prompt = spec.prompt();
  out.image = Image(kImageSize, kImageSize, background_palette()[spec.background]);
  out.mask = BinaryMask(kImageSize / patch, kImageSize / patch);
  const Rgb& base = subject_palette()[spec.color];
  const int ox = static_cast<int>(std::floor(spec.cx - spec.radius));
  const int oy = static_cast<int>(std::floor(spec.cy - spec.radius));
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      if (!spec.covers(x + 0.5, y + 0.5)) continue;
      const double shade = 1.0 - kTextureShade * texture_pattern(spec.texture, x - ox, y - oy);
      out.image.set_pixel(y, x, {base[0] * shade, base[1] * shade, base[2] * shade});
      out.mask.set(y / patch, x / patch, true);
    }
  }
  return out;
}

std::vector<SpriteSample> generate_sprite_dataset(int count, std::uint64_t seed) {
  if (count < 0) throw ParameterError("dataset count must be non-negative");
  std::vector<SpriteSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(render_sprite(random_sprite_spec(seed, i)));
  return out;
}

}  // namespace tokenswap::sprites
