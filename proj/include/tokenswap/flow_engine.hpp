#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "tokenswap/grid_mask.hpp"
#include "tokenswap/sprites.hpp"
#include "tokenswap/toy_dit.hpp"

namespace tokenswap {

// Uniform Euler schedule on normalized time, t_k = 1 - k/S for k = 0..S.
struct FlowSchedule {
  int steps = 50;
  double guidance = 3.5;
  // Fixed-point corrections per inversion step; 0 gives plain explicit Euler.
  int inversion_refinements = 3;

  void validate() const;
  double t(int k) const { return 1.0 - static_cast<double>(k) / steps; }
  double dt() const { return 1.0 / steps; }
  // t_0 .. t_S, strictly decreasing from 1 to 0.
  std::vector<double> timesteps() const;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<TokenGrid> states;

  std::size_t size() const { return states.size(); }
  const TokenGrid& endpoint() const { return states.back(); }
};

class VelocityModel {
 public:
  virtual ~VelocityModel() = default;
  // Velocity for the image tokens `x` at time t. `extras` are additional
  // attention segments; models without attention ignore them.
  virtual TokenGrid velocity(const TokenGrid& x, double t, const sprites::Prompt& prompt,
                             std::span<const RefSegment> extras) const = 0;
};

class ZeroVelocity final : public VelocityModel {
 public:
  TokenGrid velocity(const TokenGrid& x, double t, const sprites::Prompt& prompt,
                     std::span<const RefSegment> extras) const override;
};

template <class T>
class DiTVelocity final : public VelocityModel {
 public:
  explicit DiTVelocity(DiTParams<T> params) : params_(std::move(params)) {}
  TokenGrid velocity(const TokenGrid& x, double t, const sprites::Prompt& prompt,
                     std::span<const RefSegment> extras) const override;
  const DiTParams<T>& params() const { return params_; }

 private:
  DiTParams<T> params_;
};

// Mixture of isotropic Gaussians over token grids.
struct GaussianMixtureOracle {
  std::vector<double> weights;
  std::vector<TokenGrid> means;
  std::vector<double> variances;

  void validate() const;
};

// Exact marginal velocity E[noise - data | x_t = x] for the mixture.
TokenGrid oracle_velocity(const GaussianMixtureOracle& oracle, const TokenGrid& x, double t);

// Closed-form flow map of a single Gaussian component: where the ODE carries
// a point from time t0 to time t1.
TokenGrid gaussian_transport(const TokenGrid& mean, double variance, const TokenGrid& x,
                             double t0, double t1);

class OracleVelocity final : public VelocityModel {
 public:
  explicit OracleVelocity(GaussianMixtureOracle oracle);
  TokenGrid velocity(const TokenGrid& x, double t, const sprites::Prompt& prompt,
                     std::span<const RefSegment> extras) const override;

 private:
  GaussianMixtureOracle oracle_;
};

TokenGrid cfg_velocity(const TokenGrid& v_cond, const TokenGrid& v_uncond, double guidance);

// Per-step callbacks. States are indexed 0..S with times t_0 > ... > t_S.
struct SampleHooks {
  // Called on the initial state and after every Euler update, in order, with
  // strictly decreasing times. May modify the state; the trajectory records
  // the modified grid.
  std::function<void(int index, double t, TokenGrid& x)> on_state;
  // Extra attention segments for the model evaluation of step k (at t_k),
  // passed to both guidance branches.
  std::function<std::vector<RefSegment>(int step, double t)> extra_segments;
};

// Euler sampling x <- x - dt * v from t = 1 to 0 with classifier-free
// guidance against the null prompt. With guidance exactly 1 the
// unconditional branch is never evaluated.
Trajectory sample(const VelocityModel& model, const TokenGrid& z_init,
                  const sprites::Prompt& prompt, const FlowSchedule& schedule,
                  const SampleHooks* hooks = nullptr);

// Reverse-time integration from clean tokens (t = 0) to t = 1 without
// guidance. Each step solves x_{k} = x_{k+1} + dt * v(x_k, t_k) for the
// noisier state by fixed-point iteration, so a hook-free sample started
// from the result retraces the trajectory. Entries are ordered t = 0 .. 1.
Trajectory invert(const VelocityModel& model, const TokenGrid& clean, const sprites::Prompt& prompt,
                  const FlowSchedule& schedule);

// Standard normal grid keyed by (seed, stream).
TokenGrid gaussian_noise(int height, int width, int dim, std::uint64_t seed);

// Writes one TGRD blob per state plus index.json listing (step, t, file).
void dump_trajectory(const std::filesystem::path& dir, const Trajectory& trajectory);
Trajectory load_trajectory(const std::filesystem::path& dir);

double max_abs_diff(const TokenGrid& a, const TokenGrid& b);
double mean_squared_diff(const TokenGrid& a, const TokenGrid& b);

}  // namespace tokenswap
