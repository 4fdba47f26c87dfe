#include "tokenswap/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "tokenswap/binary_io.hpp"
#include "tokenswap/errors.hpp"
#include "tokenswap/eval_metrics.hpp"
#include "tokenswap/rng.hpp"

namespace tokenswap {

void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs < 1) throw ParameterError("jobs must be >= 1");
  if (jobs == 1 || count < 2) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), count);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

namespace {

constexpr std::uint64_t kAblationStream = 0x41424c415445ULL;

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  return out;
}

}  // namespace

void AblationConfig::validate() const {
  schedule.validate();
  if (taus.empty()) throw ConfigError("ablation needs at least one tau");
  for (double t : taus) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(fmt::format("ablation tau {} outside [0, 1]", t));
  }
  if (seeds < 1) throw ConfigError("ablation seeds must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (perturbation_row && !perturbation.active()) {
    throw ConfigError("perturbation row requested with every perturbation disabled");
  }
}

AblationCase ablation_case(std::uint64_t seed, int index) {
  AblationCase c;
  const auto spec = sprites::random_sprite_spec(mix64(seed ^ kAblationStream),
                                                static_cast<std::uint64_t>(index));
  c.reference = sprites::render_sprite(spec);
  c.target_prompt = c.reference.prompt;
  c.target_prompt[1] = sprites::color_token((spec.color + sprites::kColors / 2) % sprites::kColors);
  return c;
}

std::vector<const AblationRow*> AblationReport::tau_rows() const {
  std::vector<const AblationRow*> out;
  for (const auto& r : rows) {
    if (!r.perturbation) out.push_back(&r);
  }
  return out;
}

const AblationRow* AblationReport::find(double tau, bool perturbation) const {
  for (const auto& r : rows) {
    if (r.perturbation == perturbation && std::abs(r.tau - tau) < 1e-12) return &r;
  }
  return nullptr;
}

void AblationReport::write_csv(const std::filesystem::path& path) const {
  auto out = open_output(path);
  out << "tau,perturbation,similarity_mean,similarity_std,consistency_mean,consistency_std,seeds\n";
  for (const auto& r : rows) {
    out << fmt::format("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", r.tau, r.perturbation ? 1 : 0,
                       r.similarity_mean, r.similarity_std, r.consistency_mean, r.consistency_std,
                       r.similarity.size());
  }
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

std::string AblationReport::summary() const {
  std::ostringstream s;
  s << fmt::format("tau ablation over {} seeds\n", seeds);
  s << fmt::format("{:>6} {:>6} {:>18} {:>18}\n", "tau", "perturb", "masked similarity",
                   "prompt consistency");
  for (const auto& r : rows) {
    s << fmt::format("{:>6.2f} {:>6} {:>10.4f} ± {:<6.4f} {:>10.4f} ± {:<6.4f}\n", r.tau,
                     r.perturbation ? "on" : "off", r.similarity_mean, r.similarity_std,
                     r.consistency_mean, r.consistency_std);
  }
  const auto plain = tau_rows();
  if (plain.size() >= 2) {
    std::vector<double> taus, sims, cons;
    for (const auto* r : plain) {
      taus.push_back(r->tau);
      sims.push_back(r->similarity_mean);
      cons.push_back(r->consistency_mean);
    }
    s << fmt::format("spearman(tau, similarity) = {:.3f}\n", spearman(taus, sims));
    s << fmt::format("spearman(tau, consistency) = {:.3f}\n", spearman(taus, cons));
  }
  if (perturbation_pixel_mse > 0.0) {
    s << fmt::format("perturbation on/off pixel MSE = {:.6f}\n", perturbation_pixel_mse);
  }
  return s.str();
}

AblationReport run_tau_ablation(const DiTParams<float>& params, const AblationConfig& config) {
  config.validate();
  const DiTVelocity<float> model(params);
  const auto n_seeds = static_cast<std::size_t>(config.seeds);

  std::vector<AblationCase> cases(n_seeds);
  std::vector<ReferenceBundle> bundles(n_seeds);
  parallel_for(n_seeds, config.jobs, [&](std::size_t i) {
    cases[i] = ablation_case(config.seed, static_cast<int>(i));
    bundles[i] = prepare_reference(model, cases[i].reference.image, cases[i].reference.mask,
                                   cases[i].reference.prompt, config.schedule);
  });

  struct Cell {
    double tau;
    bool perturbation;
  };
  std::vector<Cell> cells;
  for (double t : config.taus) cells.push_back({t, false});
  bool have_plain_twin = false;
  for (double t : config.taus) have_plain_twin |= std::abs(t - config.perturbation_tau) < 1e-12;
  if (config.perturbation_row) {
    if (!have_plain_twin) cells.push_back({config.perturbation_tau, false});
    cells.push_back({config.perturbation_tau, true});
  }

  std::vector<Image> images(cells.size() * n_seeds);
  std::vector<double> sims(images.size());
  std::vector<double> cons(images.size());
  parallel_for(images.size(), config.jobs, [&](std::size_t job) {
    const std::size_t c = job / n_seeds;
    const std::size_t i = job % n_seeds;
    PersonalizeRequest req;
    req.references.push_back({bundles[i], bundles[i].mask});
    req.prompt = cases[i].target_prompt;
    req.tau = cells[c].tau;
    req.schedule = config.schedule;
    if (cells[c].perturbation) {
      req.perturbation = config.perturbation;
      req.perturbation.seed = mix64(config.perturbation.seed + i);
    }
    const std::uint64_t noise_seed = mix64(config.seed * 0x100000001b3ULL + i);
    images[job] = personalize(model, req, noise_seed).image;
    sims[job] = masked_similarity(params, images[job], bundles[i], bundles[i].mask);
    cons[job] = prompt_consistency(images[job], cases[i].target_prompt);
  });

  AblationReport report;
  report.seeds = config.seeds;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const bool extra_twin = config.perturbation_row && !have_plain_twin && !cells[c].perturbation &&
                            c >= config.taus.size();
    if (extra_twin) continue;
    AblationRow row;
    row.tau = cells[c].tau;
    row.perturbation = cells[c].perturbation;
    row.similarity.assign(sims.begin() + static_cast<long>(c * n_seeds),
                          sims.begin() + static_cast<long>((c + 1) * n_seeds));
    row.consistency.assign(cons.begin() + static_cast<long>(c * n_seeds),
                           cons.begin() + static_cast<long>((c + 1) * n_seeds));
    std::tie(row.similarity_mean, row.similarity_std) = mean_std(row.similarity);
    std::tie(row.consistency_mean, row.consistency_std) = mean_std(row.consistency);
    report.rows.push_back(std::move(row));
  }
  if (config.perturbation_row) {
    std::size_t on = cells.size() - 1;
    std::size_t off = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!cells[c].perturbation && std::abs(cells[c].tau - config.perturbation_tau) < 1e-12) off = c;
    }
    double mse = 0.0;
    for (std::size_t i = 0; i < n_seeds; ++i) {
      mse += pixel_mse(images[on * n_seeds + i], images[off * n_seeds + i]);
    }
    report.perturbation_pixel_mse = mse / static_cast<double>(n_seeds);
  }
  return report;
}

void ProbeConfig::validate() const {
  if (strategies.empty()) throw ConfigError("probe needs at least one strategy");
  if (samples < 1) throw ConfigError("probe samples must be >= 1");
  if (timesteps.empty()) throw ConfigError("probe needs at least one timestep");
  for (double t : timesteps) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError(fmt::format("probe timestep {} outside [0, 1]", t));
  }
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
}

const ProbeRow* ProbeReport::find(PositionStrategy s) const {
  for (const auto& r : rows) {
    if (r.strategy == s) return &r;
  }
  return nullptr;
}

double ProbeReport::ratio_to(PositionStrategy s) const {
  const ProbeRow* base = find(PositionStrategy::original);
  const ProbeRow* other = find(s);
  if (!base || !other) throw ParameterError("probe report lacks the requested strategies");
  if (other->mean_score == 0.0) return std::numeric_limits<double>::infinity();
  return base->mean_score / other->mean_score;
}

void ProbeReport::write_csv(const std::filesystem::path& path) const {
  auto out = open_output(path);
  out << "strategy,timestep,matched_score,samples,uniform_baseline\n";
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < timesteps.size(); ++k) {
      out << fmt::format("{},{},{:.8f},{},{:.8f}\n", to_string(r.strategy), timesteps[k],
                         r.per_timestep[k], samples, uniform_baseline);
    }
    out << fmt::format("{},all,{:.8f},{},{:.8f}\n", to_string(r.strategy), r.mean_score, samples,
                       uniform_baseline);
  }
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

std::string ProbeReport::summary() const {
  std::ostringstream s;
  s << fmt::format("position probe: {} samples, sequence length {}, uniform baseline {:.6f}\n",
                   samples, sequence_length, uniform_baseline);
  for (const auto& r : rows) {
    s << fmt::format("{:>9}: matched-position score {:.6f}", to_string(r.strategy), r.mean_score);
    if (r.strategy != PositionStrategy::original && find(PositionStrategy::original)) {
      s << fmt::format("  (original / {} = {:.2f})", to_string(r.strategy), ratio_to(r.strategy));
    }
    s << '\n';
  }
  return s.str();
}

void ProbeReport::write_heatmaps(const std::filesystem::path& dir) const {
  for (const auto& r : rows) {
    const double top = r.heatmap.empty() ? 0.0 : *std::max_element(r.heatmap.begin(), r.heatmap.end());
    std::vector<unsigned char> bytes;
    const std::string header = fmt::format("P5\n{} {}\n255\n", cells, cells);
    bytes.insert(bytes.end(), header.begin(), header.end());
    for (double v : r.heatmap) {
      const double x = top > 0.0 ? v / top : 0.0;
      bytes.push_back(static_cast<unsigned char>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))));
    }
    detail::write_file(dir / fmt::format("heatmap_{}.pgm", to_string(r.strategy)), bytes);
  }
}

ProbeReport run_position_probe(const DiTParams<float>& params, const ProbeConfig& config) {
  config.validate();
  const auto& cfg = params.config();
  const GridShape shape{cfg.grid(), cfg.grid()};
  const int cells = shape.cells();
  const auto pairing = identity_pairing(cells);
  const std::size_t n_t = config.timesteps.size();
  const std::size_t n_s = config.strategies.size();
  const auto samples = static_cast<std::size_t>(config.samples);

  // scores[sample][t][strategy]. Heatmaps are reduced chunk by chunk in
  // sample order, which keeps memory bounded and the sum deterministic.
  std::vector<double> scores(samples * n_t * n_s);
  std::vector<double> heat_total(n_s * cells * cells, 0.0);
  const std::size_t chunk = 2 * static_cast<std::size_t>(config.jobs);
  std::vector<std::vector<double>> heat(chunk);
  for (std::size_t base = 0; base < samples; base += chunk) {
    const std::size_t count = std::min(chunk, samples - base);
    parallel_for(count, config.jobs, [&](std::size_t offset) {
      const std::size_t s = base + offset;
      heat[offset].assign(n_s * cells * cells, 0.0);
      const auto sprite = sprites::render_sprite(
          sprites::random_sprite_spec(mix64(config.seed ^ streams::kProbe), s));
      const TokenGrid clean = image_to_tokens(sprite.image, cfg.patch);
      AttentionRecord record;
      for (std::size_t k = 0; k < n_t; ++k) {
        const double t = config.timesteps[k];
        const std::uint64_t key = stream_id(streams::kProbe, s * n_t + k);
        auto noised = [&](std::uint64_t stream) {
          CounterRng rng(config.seed, stream);
          TokenGrid out = clean;
          for (auto& v : out.values()) v = (1.0 - t) * v + t * rng.normal();
          return out;
        };
        const TokenGrid x_t = noised(2 * key);
        const TokenGrid ref = noised(2 * key + 1);
        for (std::size_t j = 0; j < n_s; ++j) {
          const auto positions = assign_positions(shape, config.strategies[j], width_shift(shape));
          const RefSegment seg = make_ref_segment(ref, positions);
          ForwardOptions opts;
          opts.record = &record;
          dit_forward<float>(params, x_t, t, sprite.prompt, std::span<const RefSegment>(&seg, 1),
                             opts);
          scores[(s * n_t + k) * n_s + j] = matched_position_score(record, pairing);
          const Segment* den = record.find(SegmentKind::denoising);
          const Segment* rs = record.find(SegmentKind::reference);
          double* h = heat[offset].data() + j * cells * cells;
          const double w = 1.0 / (record.layers * record.heads * static_cast<double>(n_t));
          for (int l = 0; l < record.layers; ++l) {
            for (int hd = 0; hd < record.heads; ++hd) {
              for (int q = 0; q < cells; ++q) {
                for (int c = 0; c < cells; ++c) {
                  h[q * cells + c] += w * record.weight(l, hd, den->begin + q, rs->begin + c);
                }
              }
            }
          }
        }
      }
    });
    for (std::size_t offset = 0; offset < count; ++offset) {
      for (std::size_t i = 0; i < heat_total.size(); ++i) heat_total[i] += heat[offset][i] / samples;
    }
  }

  ProbeReport report;
  report.timesteps = config.timesteps;
  report.samples = config.samples;
  report.cells = cells;
  report.sequence_length = 2 * cells + sprites::kPromptLength;
  report.uniform_baseline = 1.0 / report.sequence_length;
  for (std::size_t j = 0; j < n_s; ++j) {
    ProbeRow row;
    row.strategy = config.strategies[j];
    row.per_timestep.assign(n_t, 0.0);
    row.heatmap.assign(static_cast<std::size_t>(cells) * cells, 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t k = 0; k < n_t; ++k) row.per_timestep[k] += scores[(s * n_t + k) * n_s + j];
    }
    std::copy_n(heat_total.begin() + static_cast<long>(j * cells * cells), row.heatmap.size(),
                row.heatmap.begin());
    for (auto& v : row.per_timestep) v /= static_cast<double>(samples);
    for (double v : row.per_timestep) row.mean_score += v;
    row.mean_score /= static_cast<double>(n_t);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace tokenswap
