#include "tokenswap/personalize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "tokenswap/errors.hpp"
#include "tokenswap/toy_dit.hpp"

namespace tokenswap {

const TokenGrid& ReferenceBundle::at_state(int k) const {
  const int s = steps();
  if (k < 0 || k > s) throw OutOfBoundsError(fmt::format("state {} outside 0..{}", k, s));
  return trajectory.states[static_cast<std::size_t>(s - k)];
}

void ReferenceBundle::check_schedule(const FlowSchedule& schedule) const {
  if (steps() != schedule.steps) {
    throw ParameterError(fmt::format("reference trajectory has {} steps, schedule has {}", steps(),
                                     schedule.steps));
  }
  for (int k = 0; k <= schedule.steps; ++k) {
    const double t = trajectory.times[static_cast<std::size_t>(schedule.steps - k)];
    if (std::abs(t - schedule.t(k)) > 1e-12) {
      throw ParameterError(fmt::format("reference trajectory time {} does not match schedule time {}",
                                       t, schedule.t(k)));
    }
  }
}

std::string to_string(Morphology m) {
  switch (m) {
    case Morphology::none: return "none";
    case Morphology::dilate: return "dilate";
    case Morphology::erode: return "erode";
  }
  return "none";
}

Morphology parse_morphology(const std::string& text) {
  if (text == "none") return Morphology::none;
  if (text == "dilate") return Morphology::dilate;
  if (text == "erode") return Morphology::erode;
  throw ConfigError(fmt::format("morphology must be none, dilate or erode, got '{}'", text));
}

std::string to_string(EditMode m) {
  switch (m) {
    case EditMode::personalize: return "personalize";
    case EditMode::inpaint: return "inpaint";
    case EditMode::outpaint: return "outpaint";
  }
  return "personalize";
}

EditMode parse_edit_mode(const std::string& text) {
  if (text == "personalize") return EditMode::personalize;
  if (text == "inpaint") return EditMode::inpaint;
  if (text == "outpaint") return EditMode::outpaint;
  throw ConfigError(fmt::format("mode must be personalize, inpaint or outpaint, got '{}'", text));
}

void PersonalizeRequest::validate() const {
  schedule.validate();
  sprites::validate_prompt(prompt);
  if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError(fmt::format("tau {} outside [0, 1]", tau));
  if (perturbation.window < 1) throw ParameterError("perturbation window must be >= 1");
  if (perturbation.kernel < 1 || perturbation.kernel % 2 == 0) {
    throw ParameterError(fmt::format("perturbation kernel must be odd and >= 1, got {}",
                                     perturbation.kernel));
  }
  if (mode != EditMode::personalize && perturbation.active()) {
    throw ParameterError(fmt::format("{} mode runs without perturbation", to_string(mode)));
  }
  std::vector<BinaryMask> targets;
  for (std::size_t r = 0; r < references.size(); ++r) {
    const auto& ref = references[r];
    if (ref.bundle.clean.shape() != canvas || ref.bundle.clean.dim() != token_dim) {
      throw DimensionError(fmt::format("reference {} grid {} does not match canvas {}x{}x{}", r,
                                       ref.bundle.clean.shape_string(), canvas.height,
                                       canvas.width, token_dim));
    }
    if (ref.target.shape() != canvas) {
      throw DimensionError(fmt::format("reference {} target mask {} does not match canvas", r,
                                       ref.target.shape_string()));
    }
    if (ref.target.none()) throw ParameterError(fmt::format("reference {} has an empty target mask", r));
    ref.bundle.check_schedule(schedule);
    targets.push_back(ref.target);
  }
  if (!check_disjoint(targets)) throw DisjointnessError("reference target masks overlap");
}

ReferenceBundle prepare_reference(const VelocityModel& model, const Image& image,
                                  const std::optional<BinaryMask>& mask,
                                  const sprites::Prompt& prompt, const FlowSchedule& schedule) {
  sprites::validate_prompt(prompt);
  ReferenceBundle bundle;
  bundle.clean = image_to_tokens(image);
  bundle.mask = mask ? *mask : mask_from_sprite(image, border_median(image));
  if (bundle.mask.shape() != bundle.clean.shape()) {
    throw DimensionError(fmt::format("reference mask {} vs token grid {}",
                                     bundle.mask.shape_string(), bundle.clean.shape_string()));
  }
  if (bundle.mask.none()) throw ParameterError("reference mask is empty");
  bundle.source_prompt = prompt;
  bundle.trajectory = invert(model, bundle.clean, prompt, schedule);
  return bundle;
}

std::pair<TokenGrid, BinaryMask> perturb_reference(const TokenGrid& tokens, const BinaryMask& m_ref,
                                                   const PerturbationConfig& config) {
  if (tokens.shape() != m_ref.shape()) {
    throw DimensionError(fmt::format("tokens {} vs mask {}", tokens.shape_string(),
                                     m_ref.shape_string()));
  }
  TokenGrid out = config.shuffle ? shuffle_windows(tokens, m_ref, config.window, config.seed) : tokens;
  BinaryMask mask = m_ref;
  if (config.morphology == Morphology::dilate) mask = dilate(m_ref, config.kernel);
  if (config.morphology == Morphology::erode) mask = erode(m_ref, config.kernel);
  return {std::move(out), std::move(mask)};
}

PersonalizeResult personalize(const VelocityModel& model, const PersonalizeRequest& request,
                              std::uint64_t seed) {
  request.validate();
  const auto& sched = request.schedule;
  const auto& refs = request.references;
  const auto& pert = request.perturbation;

  PersonalizeResult result;
  PerturbationConfig morph_only = pert;
  morph_only.shuffle = false;
  for (const auto& ref : refs) {
    result.effective_masks.push_back(perturb_reference(ref.bundle.clean, ref.target, morph_only).second);
  }
  for (const auto& m : result.effective_masks) {
    if (m.none()) throw ParameterError("perturbation erased a reference mask entirely");
  }
  if (!check_disjoint(result.effective_masks)) {
    throw DisjointnessError("reference masks overlap after morphology");
  }

  // Late-stage segments go in order of each mask's first cell. The masks are
  // disjoint, so this order does not depend on the request order and the
  // attention sums round identically for any permutation of the references.
  std::vector<std::size_t> attend_order(refs.size());
  std::iota(attend_order.begin(), attend_order.end(), std::size_t{0});
  std::sort(attend_order.begin(), attend_order.end(), [&](std::size_t a, std::size_t b) {
    return result.effective_masks[a].set_cells().front() < result.effective_masks[b].set_cells().front();
  });

  // Reference tokens written or attended at sampling state k.
  auto reference_tokens = [&](std::size_t r, int k) {
    const TokenGrid& grid = refs[r].bundle.at_state(k);
    return pert.shuffle ? shuffle_windows(grid, refs[r].target, pert.window, pert.seed) : grid;
  };
  auto replaces = [&](int step) { return sched.t(step) > request.tau + kTauSlack; };

  SampleHooks hooks;
  hooks.on_state = [&](int index, double, TokenGrid& x) {
    // The initial state is anchored when step 0 replaces; state i > 0 is
    // the output of step i - 1.
    const int step = index == 0 ? 0 : index - 1;
    if (refs.empty() || !replaces(step)) return;
    for (std::size_t r = 0; r < refs.size(); ++r) {
      x = replace_tokens(x, reference_tokens(r, index), result.effective_masks[r]);
    }
    if (index > 0) result.replaced_steps.push_back(step);
  };
  hooks.extra_segments = [&](int step, double) {
    std::vector<RefSegment> segs;
    if (refs.empty() || replaces(step)) return segs;
    for (std::size_t r : attend_order) {
      segs.push_back(make_masked_ref_segment(reference_tokens(r, step), result.effective_masks[r],
                                             request.late_positions));
    }
    return segs;
  };

  const TokenGrid z = gaussian_noise(request.canvas.height, request.canvas.width,
                                     request.token_dim, seed);
  result.trajectory = sample(model, z, request.prompt, sched, &hooks);
  result.image = tokens_to_image(result.trajectory.endpoint());
  return result;
}

std::pair<ReferenceBundle, BinaryMask> compose_layout(const ReferenceBundle& bundle,
                                                      GridOffset delta) {
  BinaryMask target = translate_mask(bundle.mask, delta);
  auto move = [&](const TokenGrid& g) {
    TokenGrid out = g;
    for (int r = 0; r < g.height(); ++r) {
      for (int c = 0; c < g.width(); ++c) {
        const int sr = r - delta.rows;
        const int sc = c - delta.cols;
        if (sr < 0 || sc < 0 || sr >= g.height() || sc >= g.width()) continue;
        auto src = g.token(sr, sc);
        std::copy(src.begin(), src.end(), out.token(r, c).begin());
      }
    }
    return out;
  };
  ReferenceBundle moved;
  moved.mask = target;
  moved.source_prompt = bundle.source_prompt;
  moved.clean = move(bundle.clean);
  moved.trajectory.times = bundle.trajectory.times;
  for (const auto& s : bundle.trajectory.states) moved.trajectory.states.push_back(move(s));
  return {std::move(moved), std::move(target)};
}

Image edit(const VelocityModel& model, const Image& image, const BinaryMask& keep_mask,
           const sprites::Prompt& prompt, const EditOptions& options) {
  if (options.mode == EditMode::personalize) {
    throw ParameterError("edit needs inpaint or outpaint mode");
  }
  if (keep_mask.none()) throw ParameterError("keep mask is empty");
  PersonalizeRequest req;
  req.references.push_back(
      {prepare_reference(model, image, keep_mask, prompt, options.schedule), keep_mask});
  req.canvas = keep_mask.shape();
  req.token_dim = req.references.front().bundle.clean.dim();
  req.prompt = prompt;
  req.tau = options.tau;
  req.schedule = options.schedule;
  req.mode = options.mode;
  return personalize(model, req, options.seed).image;
}

std::pair<Image, BinaryMask> outpaint_canvas(const Image& image, int height, int width, int top,
                                             int left, const Rgb& fill, int patch) {
  if (top < 0 || left < 0 || top + image.height > height || left + image.width > width) {
    throw OutOfBoundsError(fmt::format("{}x{} image at ({}, {}) does not fit a {}x{} canvas",
                                       image.height, image.width, top, left, height, width));
  }
  if (patch < 1 || height % patch || width % patch || top % patch || left % patch ||
      image.height % patch || image.width % patch) {
    throw ParameterError("outpaint canvas and placement must align with the patch grid");
  }
  Image canvas(height, width, fill);
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) canvas.set_pixel(top + r, left + c, image.pixel(r, c));
  }
  BinaryMask keep(height / patch, width / patch);
  for (int r = top / patch; r < (top + image.height) / patch; ++r) {
    for (int c = left / patch; c < (left + image.width) / patch; ++c) keep.set(r, c, true);
  }
  return {std::move(canvas), std::move(keep)};
}

}  // namespace tokenswap
