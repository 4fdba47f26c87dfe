#include "tokenswap/flow_engine.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <json.hpp>

#include "tokenswap/errors.hpp"
#include "tokenswap/rng.hpp"

namespace tokenswap {

void FlowSchedule::validate() const {
  if (steps < 1) throw ParameterError(fmt::format("schedule needs >= 1 step, got {}", steps));
  if (!(guidance >= 0.0) || !std::isfinite(guidance)) {
    throw ParameterError(fmt::format("guidance must be finite and >= 0, got {}", guidance));
  }
  if (inversion_refinements < 0) throw ParameterError("inversion_refinements must be >= 0");
}

std::vector<double> FlowSchedule::timesteps() const {
  std::vector<double> ts(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) ts[static_cast<std::size_t>(k)] = t(k);
  return ts;
}

namespace {

void require_same(const TokenGrid& a, const TokenGrid& b, const char* what) {
  if (!a.same_layout(b)) {
    throw DimensionError(fmt::format("{}: {} vs {}", what, a.shape_string(), b.shape_string()));
  }
}

// y = a + s * b, element-wise.
TokenGrid axpy(const TokenGrid& a, double s, const TokenGrid& b) {
  TokenGrid out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * bv[i];
  return out;
}

void require_finite(const TokenGrid& x, const char* what, int index) {
  if (!x.all_finite()) throw NonFiniteError(fmt::format("{} became non-finite at step {}", what, index));
}

}  // namespace

TokenGrid ZeroVelocity::velocity(const TokenGrid& x, double, const sprites::Prompt&,
                                 std::span<const RefSegment>) const {
  return TokenGrid(x.height(), x.width(), x.dim());
}

template <class T>
TokenGrid DiTVelocity<T>::velocity(const TokenGrid& x, double t, const sprites::Prompt& prompt,
                                   std::span<const RefSegment> extras) const {
  return dit_forward<T>(params_, x, t, prompt, extras);
}

template class DiTVelocity<float>;
template class DiTVelocity<double>;

void GaussianMixtureOracle::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != variances.size()) {
    throw ParameterError("oracle needs matching, non-empty weights, means and variances");
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < weights.size(); ++c) {
    if (!(weights[c] >= 0.0)) throw ParameterError("oracle weights must be nonnegative");
    if (!(variances[c] > 0.0)) throw ParameterError("oracle variances must be positive");
    if (!means[c].same_layout(means.front())) throw DimensionError("oracle means differ in shape");
    sum += weights[c];
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ParameterError(fmt::format("oracle weights sum to {}", sum));
}

TokenGrid oracle_velocity(const GaussianMixtureOracle& oracle, const TokenGrid& x, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ParameterError(fmt::format("t = {} outside [0, 1]", t));
  oracle.validate();
  require_same(x, oracle.means.front(), "oracle_velocity");
  const std::size_t k = oracle.weights.size();
  const auto xv = x.values();
  const double dims = static_cast<double>(xv.size());

  std::vector<double> log_r(k, -std::numeric_limits<double>::infinity());
  std::vector<double> s2(k);
  for (std::size_t c = 0; c < k; ++c) {
    s2[c] = (1.0 - t) * (1.0 - t) * oracle.variances[c] + t * t;
    if (oracle.weights[c] == 0.0) continue;
    const auto mu = oracle.means[c].values();
    double dist = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double r = xv[i] - (1.0 - t) * mu[i];
      dist += r * r;
    }
    log_r[c] = std::log(oracle.weights[c]) - 0.5 * dims * std::log(s2[c]) - 0.5 * dist / s2[c];
  }
  double top = -std::numeric_limits<double>::infinity();
  for (double l : log_r) top = std::max(top, l);
  double norm = 0.0;
  for (double& l : log_r) {
    l = std::exp(l - top);
    norm += l;
  }

  TokenGrid v(x.height(), x.width(), x.dim());
  auto out = v.values();
  for (std::size_t c = 0; c < k; ++c) {
    const double r = log_r[c] / norm;
    if (r == 0.0) continue;
    const auto mu = oracle.means[c].values();
    const double gain = (t - (1.0 - t) * oracle.variances[c]) / s2[c];
    for (std::size_t i = 0; i < xv.size(); ++i) {
      out[i] += r * (-mu[i] + gain * (xv[i] - (1.0 - t) * mu[i]));
    }
  }
  return v;
}

TokenGrid gaussian_transport(const TokenGrid& mean, double variance, const TokenGrid& x,
                             double t0, double t1) {
  require_same(mean, x, "gaussian_transport");
  auto scale = [&](double t) { return std::sqrt((1.0 - t) * (1.0 - t) * variance + t * t); };
  const double ratio = scale(t1) / scale(t0);
  TokenGrid out = x;
  auto o = out.values();
  const auto mu = mean.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = (1.0 - t1) * mu[i] + ratio * (o[i] - (1.0 - t0) * mu[i]);
  }
  return out;
}

OracleVelocity::OracleVelocity(GaussianMixtureOracle oracle) : oracle_(std::move(oracle)) {
  oracle_.validate();
}

TokenGrid OracleVelocity::velocity(const TokenGrid& x, double t, const sprites::Prompt&,
                                   std::span<const RefSegment>) const {
  return oracle_velocity(oracle_, x, t);
}

TokenGrid cfg_velocity(const TokenGrid& v_cond, const TokenGrid& v_uncond, double guidance) {
  require_same(v_cond, v_uncond, "cfg_velocity");
  TokenGrid out = v_uncond;
  auto o = out.values();
  const auto c = v_cond.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = (1.0 - guidance) * o[i] + guidance * c[i];
  return out;
}

Trajectory sample(const VelocityModel& model, const TokenGrid& z_init,
                  const sprites::Prompt& prompt, const FlowSchedule& schedule,
                  const SampleHooks* hooks) {
  schedule.validate();
  require_finite(z_init, "initial state", 0);
  Trajectory traj;
  traj.times = schedule.timesteps();
  traj.states.reserve(traj.times.size());

  TokenGrid x = z_init;
  if (hooks && hooks->on_state) {
    hooks->on_state(0, traj.times[0], x);
    require_finite(x, "hooked state", 0);
  }
  traj.states.push_back(x);
  const sprites::Prompt null = sprites::null_prompt();
  for (int k = 0; k < schedule.steps; ++k) {
    const double t = traj.times[static_cast<std::size_t>(k)];
    std::vector<RefSegment> extras;
    if (hooks && hooks->extra_segments) extras = hooks->extra_segments(k, t);
    TokenGrid v = model.velocity(x, t, prompt, extras);
    if (schedule.guidance != 1.0) {
      v = cfg_velocity(v, model.velocity(x, t, null, extras), schedule.guidance);
    }
    require_same(v, x, "model velocity");
    x = axpy(x, -schedule.dt(), v);
    require_finite(x, "sample state", k + 1);
    if (hooks && hooks->on_state) {
      hooks->on_state(k + 1, traj.times[static_cast<std::size_t>(k) + 1], x);
      require_finite(x, "hooked state", k + 1);
    }
    traj.states.push_back(x);
  }
  return traj;
}

Trajectory invert(const VelocityModel& model, const TokenGrid& clean, const sprites::Prompt& prompt,
                  const FlowSchedule& schedule) {
  schedule.validate();
  require_finite(clean, "clean tokens", 0);
  Trajectory traj;
  const auto ts = schedule.timesteps();
  traj.times.assign(ts.rbegin(), ts.rend());
  traj.states.reserve(ts.size());
  traj.states.push_back(clean);
  const double dt = schedule.dt();
  for (int k = 0; k < schedule.steps; ++k) {
    const TokenGrid& prev = traj.states.back();
    const double t_prev = traj.times[static_cast<std::size_t>(k)];
    const double t_next = traj.times[static_cast<std::size_t>(k) + 1];
    TokenGrid next = axpy(prev, dt, model.velocity(prev, t_prev, prompt, {}));
    for (int it = 0; it < schedule.inversion_refinements; ++it) {
      next = axpy(prev, dt, model.velocity(next, t_next, prompt, {}));
    }
    require_finite(next, "inversion state", k + 1);
    traj.states.push_back(std::move(next));
  }
  return traj;
}

TokenGrid gaussian_noise(int height, int width, int dim, std::uint64_t seed) {
  CounterRng rng(seed, streams::kInitNoise);
  std::vector<double> data(static_cast<std::size_t>(height) * width * dim);
  for (auto& v : data) v = rng.normal();
  return TokenGrid(height, width, dim, std::move(data));
}

void dump_trajectory(const std::filesystem::path& dir, const Trajectory& trajectory) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const std::string file = fmt::format("state_{:04d}.tgrd", k);
    write_token_grid(dir / file, trajectory.states[k]);
    index.push_back({{"step", k}, {"t", trajectory.times[k]}, {"file", file}});
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw IoError(fmt::format("cannot write {}", (dir / "index.json").string()));
  out << index.dump(2) << '\n';
}

Trajectory load_trajectory(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw IoError(fmt::format("cannot read {}", (dir / "index.json").string()));
  nlohmann::json index;
  try {
    in >> index;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad trajectory index: {}", e.what()));
  }
  Trajectory traj;
  for (const auto& entry : index) {
    traj.times.push_back(entry.at("t").get<double>());
    traj.states.push_back(read_token_grid(dir / entry.at("file").get<std::string>()));
  }
  return traj;
}

double max_abs_diff(const TokenGrid& a, const TokenGrid& b) {
  require_same(a, b, "max_abs_diff");
  double m = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

double mean_squared_diff(const TokenGrid& a, const TokenGrid& b) {
  require_same(a, b, "mean_squared_diff");
  const auto av = a.values();
  const auto bv = b.values();
  if (av.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return s / static_cast<double>(av.size());
}

}  // namespace tokenswap
