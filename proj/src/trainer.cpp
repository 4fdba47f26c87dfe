#include "tokenswap/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <thread>

#include <fmt/format.h>

#include "tokenswap/errors.hpp"
#include "tokenswap/sprites.hpp"

namespace tokenswap {

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError(fmt::format("steps must be >= 0, got {}", steps));
  if (batch < 1) throw ConfigError(fmt::format("batch must be >= 1, got {}", batch));
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
  if (warmup < 0) throw ConfigError("warmup must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw ConfigError("smoothing must lie in [0, 1)");
}

std::vector<FlowSample> training_batch(std::uint64_t seed, std::uint32_t step, int batch,
                                       int patch) {
  std::vector<FlowSample> out;
  out.reserve(static_cast<std::size_t>(batch));
  for (int b = 0; b < batch; ++b) {
    const std::uint64_t index = (static_cast<std::uint64_t>(step) << 20) | static_cast<unsigned>(b);
    const auto sample = sprites::render_sprite(sprites::random_sprite_spec(seed, index), patch);
    out.push_back({image_to_tokens(sample.image, patch), sample.prompt});
  }
  return out;
}

namespace {

double learning_rate(const TrainConfig& c, std::uint32_t step) {
  double lr = c.lr;
  if (c.warmup > 0 && step < static_cast<std::uint32_t>(c.warmup)) {
    lr *= static_cast<double>(step + 1) / c.warmup;
  } else if (c.steps > c.warmup) {
    // Cosine decay to a tenth of the peak rate.
    const double progress =
        static_cast<double>(step - c.warmup) / static_cast<double>(c.steps - c.warmup);
    lr *= 0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
  }
  return lr;
}

}  // namespace

void train(Checkpoint& state, const TrainConfig& config, const TrainCallback& on_step) {
  config.validate();
  auto& params = state.params;
  const std::size_t n = params.values().size();
  if (!state.adam_m) {
    state.adam_m.emplace(n, 0.0f);
    state.adam_v.emplace(n, 0.0f);
  }
  auto& m = *state.adam_m;
  auto& v = *state.adam_v;
  if (m.size() != n || v.size() != n) throw DimensionError("Adam state does not match parameters");

  const int batch = config.batch;
  std::vector<std::vector<float>> item_grads(static_cast<std::size_t>(batch));
  std::vector<double> item_losses(static_cast<std::size_t>(batch));
  std::vector<float> grad(n);

  while (state.step < static_cast<std::uint32_t>(config.steps)) {
    const std::uint32_t step = state.step;
    const auto samples = training_batch(config.seed, step, batch, params.config().patch);
    const std::uint64_t noise_seed = config.seed ^ (0x9e3779b97f4a7c15ULL * (step + 1ULL));

    // Per-item gradients, reduced afterwards in item order so the result
    // does not depend on the number of workers.
    auto work = [&](int worker) {
      for (int b = worker; b < batch; b += config.jobs) {
        auto& g = item_grads[static_cast<std::size_t>(b)];
        g.assign(n, 0.0f);
        item_losses[static_cast<std::size_t>(b)] = flow_matching_loss<float>(
            params, std::span<const FlowSample>(&samples[static_cast<std::size_t>(b)], 1),
            noise_seed, &g, static_cast<std::size_t>(b));
      }
    };
    if (config.jobs == 1) {
      work(0);
    } else {
      std::vector<std::jthread> pool;
      for (int w = 0; w < config.jobs; ++w) pool.emplace_back(work, w);
    }

    double loss = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0f);
    for (int b = 0; b < batch; ++b) {
      loss += item_losses[static_cast<std::size_t>(b)];
      const auto& g = item_grads[static_cast<std::size_t>(b)];
      for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
    }
    loss /= batch;
    double norm2 = 0.0;
    for (auto& g : grad) {
      g /= static_cast<float>(batch);
      norm2 += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(loss) || !std::isfinite(norm)) {
      throw NonFiniteError(fmt::format("training diverged at step {} (loss {}, grad norm {})", step,
                                       loss, norm));
    }

    const double clip = norm > config.clip_norm ? config.clip_norm / norm : 1.0;
    const double lr = learning_rate(config, step);
    const double bc1 = 1.0 - std::pow(config.beta1, step + 1.0);
    const double bc2 = 1.0 - std::pow(config.beta2, step + 1.0);
    const auto b1 = static_cast<float>(config.beta1);
    const auto b2 = static_cast<float>(config.beta2);
    auto& w = params.values();
    for (std::size_t i = 0; i < n; ++i) {
      const float g = grad[i] * static_cast<float>(clip);
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + config.eps));
    }
    state.step = step + 1;
    if (on_step) on_step({step, loss, norm});
  }
}

std::vector<double> smooth_losses(const std::vector<double>& losses, double smoothing) {
  std::vector<double> out;
  out.reserve(losses.size());
  double avg = 0.0;
  double weight = 0.0;
  for (double l : losses) {
    avg = smoothing * avg + (1.0 - smoothing) * l;
    weight = smoothing * weight + (1.0 - smoothing);
    out.push_back(avg / weight);
  }
  return out;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<TrainStep>& steps) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  out << "step,loss\n";
  for (const auto& s : steps) out << fmt::format("{},{:.9g}\n", s.step, s.loss);
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));
}

}  // namespace tokenswap
