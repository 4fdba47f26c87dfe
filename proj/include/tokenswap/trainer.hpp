#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "tokenswap/toy_dit.hpp"

namespace tokenswap {

struct TrainConfig {
  int steps = 2000;
  int batch = 8;
  double lr = 3e-3;
  int warmup = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;  // sprites and flow draws of step s are keyed by (seed, s)
  int jobs = 1;            // worker threads for per-item gradients
  // Exponential smoothing factor used for the reported smoothed loss.
  double smoothing = 0.98;

  void validate() const;
};

struct TrainStep {
  std::uint32_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

using TrainCallback = std::function<void(const TrainStep&)>;

// Runs Adam from `state` until `state.step == config.steps`. The optimizer
// moments live in the checkpoint, so training resumed from any saved state
// reproduces an uninterrupted run bit for bit. Throws NonFiniteError on a
// non-finite loss or gradient.
void train(Checkpoint& state, const TrainConfig& config, const TrainCallback& on_step = {});

// Fresh training batch for one step; deterministic in (seed, step).
std::vector<FlowSample> training_batch(std::uint64_t seed, std::uint32_t step, int batch,
                                       int patch = 2);

// Bias-corrected exponential moving average of a loss trajectory.
std::vector<double> smooth_losses(const std::vector<double>& losses, double smoothing);

void write_loss_csv(const std::filesystem::path& path, const std::vector<TrainStep>& steps);

}  // namespace tokenswap
