#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "tokenswap/grid_mask.hpp"
#include "tokenswap/image.hpp"
#include "tokenswap/rope_attention.hpp"
#include "tokenswap/sprites.hpp"

namespace tokenswap {

struct DiTConfig {
  int layers = 6;
  int dim = 64;
  int heads = 4;
  int patch = 2;
  int vocab = sprites::kVocabSize;
  int image_size = sprites::kImageSize;
  int channels = 3;
  int mlp_ratio = 4;
  int time_freq_dim = 64;
  double rope_base = kRopeBase;

  int grid() const { return image_size / patch; }
  int token_dim() const { return patch * patch * channels; }
  int head_dim() const { return dim / heads; }
  void validate() const;
  bool operator==(const DiTConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Flat parameter layout. Weights are stored in x * W orientation (in x out).
struct ParamLayout {
  struct Block {
    TensorInfo mod_w, mod_b, qkv_w, qkv_b, out_w, out_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  explicit ParamLayout(const DiTConfig& config);

  TensorInfo in_w, in_b, embed, t1_w, t1_b, t2_w, t2_b;
  std::vector<Block> blocks;
  TensorInfo final_mod_w, final_mod_b, out_w, out_b;
  std::vector<TensorInfo> tensors;  // all of the above, in storage order
  std::size_t total = 0;

  const TensorInfo* find(std::string_view name) const;
};

template <class T>
class DiTParams {
 public:
  explicit DiTParams(const DiTConfig& config);

  const DiTConfig& config() const { return config_; }
  const ParamLayout& layout() const { return *layout_; }
  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }

  Eigen::Map<Mat<T>> tensor(const TensorInfo& info) {
    return {values_.data() + info.offset, info.rows, info.cols};
  }
  Eigen::Map<const Mat<T>> tensor(const TensorInfo& info) const {
    return {values_.data() + info.offset, info.rows, info.cols};
  }

  template <class U>
  DiTParams<U> cast() const {
    DiTParams<U> out(config_);
    for (std::size_t i = 0; i < values_.size(); ++i) out.values()[i] = static_cast<U>(values_[i]);
    return out;
  }

  bool all_finite() const;

 private:
  DiTConfig config_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<T> values_;
};

// Standard DiT initialization: Xavier-uniform linear layers, small normal
// embeddings, zeroed modulation and output projections.
DiTParams<float> init_params(const DiTConfig& config, std::uint64_t seed);
// Every entry drawn from N(0, scale^2); used where all paths must be live.
template <class T>
DiTParams<T> random_params(const DiTConfig& config, std::uint64_t seed, double scale);

// Patch tokenization. A token lists its patch's pixels row-major with
// interleaved channels.
TokenGrid patchify(const Image& image, int patch = 2);
Image unpatchify(const TokenGrid& tokens, int patch = 2);
// Patchify plus the [0,1] -> [-1,1] affine map the model operates in.
TokenGrid image_to_tokens(const Image& image, int patch = 2);
Image tokens_to_image(const TokenGrid& tokens, int patch = 2);

// Extra attention segment supplied alongside the denoising tokens, expressed
// in raw token space with explicit RoPE coordinates.
struct RefSegment {
  RowMatrix tokens;  // n x token_dim
  std::vector<GridCoord> coords;
};
RefSegment make_ref_segment(const TokenGrid& tokens, const PositionAssignment& positions);
// Only the cells set in `mask`, all placed at the given coordinates strategy
// (zero: every token at (0, 0); original: its own cell).
RefSegment make_masked_ref_segment(const TokenGrid& tokens, const BinaryMask& mask,
                                   PositionStrategy strategy);

struct ForwardOptions {
  // Test hook: remove every extra-segment key from the softmax.
  bool mask_extra_keys = false;
  AttentionRecord* record = nullptr;
};

// Predicted velocity for the image tokens. Attention runs over
// [x_t; extras...; prompt]; only the x_t rows are returned.
template <class T>
TokenGrid dit_forward(const DiTParams<T>& params, const TokenGrid& x_t, double t,
                      const sprites::Prompt& prompt, std::span<const RefSegment> extras = {},
                      const ForwardOptions& options = {});

// Overload matching the single-reference form: optional (grid, positions).
template <class T>
TokenGrid dit_forward(const DiTParams<T>& params, const TokenGrid& x_t, double t,
                      const sprites::Prompt& prompt,
                      const std::optional<std::pair<TokenGrid, PositionAssignment>>& extra_ref,
                      const ForwardOptions& options = {});

// Hidden states of the given tokens after all blocks but the last, computed
// on a sequence holding only these tokens plus the prompt.
template <class T>
RowMatrix dit_features(const DiTParams<T>& params, const RowMatrix& tokens,
                       std::span<const GridCoord> coords, double t, const sprites::Prompt& prompt);

struct FlowSample {
  TokenGrid data;
  sprites::Prompt prompt;
};

inline constexpr double kPromptDropout = 0.1;

// Per-item noise, timestep and prompt dropout drawn from `noise_seed`.
struct FlowDraw {
  double t = 0.0;
  bool drop_prompt = false;
  TokenGrid noise;
};
FlowDraw draw_flow_inputs(std::uint64_t noise_seed, std::size_t item, const TokenGrid& like);

// Mean squared error between predicted and target velocity (noise - data)
// at x_t = (1 - t) data + t noise. Adds d loss / d params into `grad` when
// given (same length as params). Item b draws its noise as item
// first_item + b, so a batch can be split without changing the draws.
template <class T>
double flow_matching_loss(const DiTParams<T>& params, std::span<const FlowSample> batch,
                          std::uint64_t noise_seed, std::vector<T>* grad = nullptr,
                          std::size_t first_item = 0);

std::vector<FlowSample> to_flow_samples(std::span<const sprites::SpriteSample> sprites,
                                        int patch = 2);

// Checkpoint: "TDIT", u32 version, config block, named f32 tensors.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  DiTParams<float> params;
  // Optional optimizer state for exact resume.
  std::optional<std::vector<float>> adam_m;
  std::optional<std::vector<float>> adam_v;
  std::uint32_t step = 0;
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace tokenswap
