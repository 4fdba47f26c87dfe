#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tokenswap/flow_engine.hpp"
#include "tokenswap/grid_mask.hpp"
#include "tokenswap/image.hpp"
#include "tokenswap/rope_attention.hpp"
#include "tokenswap/sprites.hpp"

namespace tokenswap {

// Inverted reference image. Trajectory entries run from t = 0 (clean) to
// t = 1 as produced by invert().
struct ReferenceBundle {
  Trajectory trajectory;
  BinaryMask mask;
  sprites::Prompt source_prompt;
  TokenGrid clean;

  // X_ref at sampling state k (t_k = 1 - k/S).
  const TokenGrid& at_state(int k) const;
  int steps() const { return static_cast<int>(trajectory.size()) - 1; }
  // Throws unless the trajectory timesteps equal the schedule's, reversed.
  void check_schedule(const FlowSchedule& schedule) const;
};

enum class Morphology { none, dilate, erode };
std::string to_string(Morphology m);
Morphology parse_morphology(const std::string& text);

struct PerturbationConfig {
  bool shuffle = false;
  int window = 3;
  Morphology morphology = Morphology::none;
  int kernel = 5;
  std::uint64_t seed = 0;

  bool active() const { return shuffle || morphology != Morphology::none; }
};

enum class EditMode { personalize, inpaint, outpaint };
std::string to_string(EditMode m);
EditMode parse_edit_mode(const std::string& text);

struct ReferenceTarget {
  ReferenceBundle bundle;
  BinaryMask target;  // M_k: where this reference is written
};

inline constexpr double kDefaultTau = 0.8;
inline constexpr double kEditTau = 0.1;
// Slack on the strict t_k > tau test so that schedule times computed in
// floating point land on the intended side of a tau grid point.
inline constexpr double kTauSlack = 1e-9;

struct PersonalizeRequest {
  std::vector<ReferenceTarget> references;
  // Token grid of the generated image; references must match it.
  GridShape canvas{16, 16};
  int token_dim = 12;
  sprites::Prompt prompt;
  double tau = kDefaultTau;
  PerturbationConfig perturbation;
  FlowSchedule schedule;
  EditMode mode = EditMode::personalize;
  // Positions of reference tokens in the late-stage attention segments.
  PositionStrategy late_positions = PositionStrategy::zero;

  void validate() const;
};

struct PersonalizeResult {
  Image image;
  Trajectory trajectory;
  // Steps k whose update was followed by replacement (t_k > tau).
  std::vector<int> replaced_steps;
  // Masks actually written after perturbation, one per reference.
  std::vector<BinaryMask> effective_masks;
};

// Inverts the image's tokens under `prompt` without guidance. Without an
// explicit mask the subject is segmented against the border colour.
ReferenceBundle prepare_reference(const VelocityModel& model, const Image& image,
                                  const std::optional<BinaryMask>& mask,
                                  const sprites::Prompt& prompt, const FlowSchedule& schedule);

// Windowed shuffle of the masked tokens plus mask morphology. The shuffle
// permutation depends only on (seed, mask), so applying this to every grid of
// a trajectory moves the same tokens at every timestep.
std::pair<TokenGrid, BinaryMask> perturb_reference(const TokenGrid& tokens, const BinaryMask& m_ref,
                                                   const PerturbationConfig& config);

// Replacement while t_k > tau, then late-stage attention over the masked
// reference tokens. z_init ~ N(0, I) is keyed by `seed`.
PersonalizeResult personalize(const VelocityModel& model, const PersonalizeRequest& request,
                              std::uint64_t seed);

// Moves the bundle's grids (and mask) by delta. Cells whose source would lie
// outside the grid keep their old tokens. Returns the bundle and its target
// mask translate(M_ref, delta).
std::pair<ReferenceBundle, BinaryMask> compose_layout(const ReferenceBundle& bundle,
                                                      GridOffset delta);

struct EditOptions {
  EditMode mode = EditMode::inpaint;
  double tau = kEditTau;
  FlowSchedule schedule;
  std::uint64_t seed = 0;
};

// Inpainting/outpainting: the whole image is the reference, keep_mask is
// both its subject mask and the target. Perturbation is always off.
Image edit(const VelocityModel& model, const Image& image, const BinaryMask& keep_mask,
           const sprites::Prompt& prompt, const EditOptions& options);

// Outpainting helper: places `image` on a larger canvas filled with `fill`
// at pixel offset (top, left); returns the canvas and the token mask of the
// original region.
std::pair<Image, BinaryMask> outpaint_canvas(const Image& image, int height, int width, int top,
                                             int left, const Rgb& fill, int patch = 2);

}  // namespace tokenswap
