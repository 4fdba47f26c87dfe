#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tokenswap/flow_engine.hpp"
#include "tokenswap/personalize.hpp"
#include "tokenswap/rope_attention.hpp"
#include "tokenswap/toy_dit.hpp"

namespace tokenswap {

// Runs fn(0..count-1) on up to `jobs` threads. Results must be written to
// per-index slots; callers aggregate afterwards in index order.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn);

struct AblationConfig {
  std::vector<double> taus{1.0, 0.95, 0.9, 0.8, 0.7};
  int seeds = 16;
  bool perturbation_row = true;
  double perturbation_tau = 0.8;
  PerturbationConfig perturbation{true, 3, Morphology::dilate, 5, 0};
  FlowSchedule schedule;
  std::uint64_t seed = 0;  // picks reference sprites and sampling noise
  int jobs = 1;

  void validate() const;
};

// One ablation case: a reference sprite and the prompt it is re-rendered
// under. The target prompt recolours the subject.
struct AblationCase {
  sprites::SpriteSample reference;
  sprites::Prompt target_prompt;
};
AblationCase ablation_case(std::uint64_t seed, int index);

struct AblationRow {
  double tau = 0.0;
  bool perturbation = false;
  std::vector<double> similarity;   // per seed
  std::vector<double> consistency;  // per seed
  double similarity_mean = 0.0;
  double similarity_std = 0.0;
  double consistency_mean = 0.0;
  double consistency_std = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  int seeds = 0;
  // Pixel MSE between perturbation-on and -off outputs at the perturbation
  // tau, averaged over seeds; zero when that pair was not run.
  double perturbation_pixel_mse = 0.0;

  // Rows without perturbation, in configured tau order.
  std::vector<const AblationRow*> tau_rows() const;
  const AblationRow* find(double tau, bool perturbation) const;
  void write_csv(const std::filesystem::path& path) const;
  std::string summary() const;
};

AblationReport run_tau_ablation(const DiTParams<float>& params, const AblationConfig& config);

struct ProbeConfig {
  std::vector<PositionStrategy> strategies{PositionStrategy::original, PositionStrategy::zero,
                                           PositionStrategy::shifted};
  int samples = 100;
  std::vector<double> timesteps{0.8, 0.5, 0.2};
  std::uint64_t seed = 0;
  int jobs = 1;

  void validate() const;
};

struct ProbeRow {
  PositionStrategy strategy = PositionStrategy::original;
  double mean_score = 0.0;
  std::vector<double> per_timestep;  // aligned with ProbeConfig::timesteps
  // Query-cell x reference-cell attention, averaged over layers, heads,
  // samples and timesteps (cells x cells, row-major).
  std::vector<double> heatmap;
};

struct ProbeReport {
  std::vector<ProbeRow> rows;
  std::vector<double> timesteps;
  int samples = 0;
  int sequence_length = 0;
  double uniform_baseline = 0.0;  // 1 / sequence length
  int cells = 0;

  const ProbeRow* find(PositionStrategy s) const;
  // Ratio of the original-strategy score to the given strategy's score.
  double ratio_to(PositionStrategy s) const;
  void write_csv(const std::filesystem::path& path) const;
  std::string summary() const;
  // One binary PGM per strategy: <dir>/heatmap_<strategy>.pgm.
  void write_heatmaps(const std::filesystem::path& dir) const;
};

// Reference tokens are the same sprite as the denoising tokens, noised to
// the same t with independent noise, appended with each strategy's
// positions.
ProbeReport run_position_probe(const DiTParams<float>& params, const ProbeConfig& config);

}  // namespace tokenswap
