#include <atomic>
#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tokenswap/errors.hpp"
#include "tokenswap/flow_engine.hpp"
#include "tokenswap/rng.hpp"

using namespace tokenswap;
using test::random_grid;

namespace {

const sprites::Prompt kPrompt{1, sprites::kColorBase, sprites::kBackgroundBase,
                              sprites::kTextureBase};

GaussianMixtureOracle single_gaussian(const TokenGrid& mean, double variance) {
  return {{1.0}, {mean}, {variance}};
}

TokenGrid filled(int h, int w, int d, double v) {
  TokenGrid g(h, w, d);
  for (double& x : g.values()) x = v;
  return g;
}

// Classical RK4 from t = 1 down to t = 0, used as the reference endpoint.
TokenGrid rk4_endpoint(const VelocityModel& model, TokenGrid x, int steps) {
  const double h = 1.0 / steps;
  auto shifted = [](const TokenGrid& base, double a, const TokenGrid& v) {
    TokenGrid out = base;
    for (std::size_t i = 0; i < out.values().size(); ++i) out.values()[i] -= a * v.values()[i];
    return out;
  };
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / steps;
    const double mid = 1.0 - (k + 0.5) / steps;
    const double next = 1.0 - static_cast<double>(k + 1) / steps;
    const auto k1 = model.velocity(x, t, kPrompt, {});
    const auto k2 = model.velocity(shifted(x, 0.5 * h, k1), mid, kPrompt, {});
    const auto k3 = model.velocity(shifted(x, 0.5 * h, k2), mid, kPrompt, {});
    const auto k4 = model.velocity(shifted(x, h, k3), next, kPrompt, {});
    for (std::size_t i = 0; i < x.values().size(); ++i) {
      x.values()[i] -= h / 6.0 *
                       (k1.values()[i] + 2.0 * k2.values()[i] + 2.0 * k3.values()[i] + k4.values()[i]);
    }
  }
  return x;
}

// Counts how often it is asked for the unconditional branch.
class CountingModel final : public VelocityModel {
 public:
  explicit CountingModel(const VelocityModel& inner) : inner_(inner) {}
  TokenGrid velocity(const TokenGrid& x, double t, const sprites::Prompt& prompt,
                     std::span<const RefSegment> extras) const override {
    if (prompt == sprites::null_prompt()) ++null_calls;
    ++calls;
    return inner_.velocity(x, t, prompt, extras);
  }
  mutable std::atomic<int> calls{0};
  mutable std::atomic<int> null_calls{0};

 private:
  const VelocityModel& inner_;
};

// Linear field whose velocity depends on the prompt, for guidance tests.
class PromptModel final : public VelocityModel {
 public:
  TokenGrid velocity(const TokenGrid& x, double, const sprites::Prompt& prompt,
                     std::span<const RefSegment>) const override {
    TokenGrid v = x;
    const double k = prompt == sprites::null_prompt() ? 0.3 : 1.1;
    for (double& e : v.values()) e *= k;
    return v;
  }
};

class ExplodingModel final : public VelocityModel {
 public:
  TokenGrid velocity(const TokenGrid& x, double t, const sprites::Prompt&,
                     std::span<const RefSegment>) const override {
    TokenGrid v = x;
    for (double& e : v.values()) e = t < 0.55 ? std::nan("") : 0.0;
    return v;
  }
};

}  // namespace

TEST(FlowSchedule, TimesAndValidation) {
  FlowSchedule s;
  const auto t = s.timesteps();
  ASSERT_EQ(t.size(), 51u);
  EXPECT_EQ(t.front(), 1.0);
  EXPECT_EQ(t.back(), 0.0);
  for (std::size_t k = 1; k < t.size(); ++k) EXPECT_LT(t[k], t[k - 1]);
  EXPECT_EQ(s.guidance, 3.5);
  s.steps = 0;
  EXPECT_THROW(s.validate(), ParameterError);
  s.steps = 5;
  s.guidance = -0.1;
  EXPECT_THROW(s.validate(), ParameterError);
}

TEST(CfgVelocity, Formula) {
  const auto c = random_grid(3, 4, 5, 1);
  const auto u = random_grid(3, 4, 5, 2);
  EXPECT_EQ(cfg_velocity(c, u, 1.0), c);
  EXPECT_EQ(cfg_velocity(c, u, 0.0), u);
  const auto g = cfg_velocity(c, u, 3.5);
  for (std::size_t i = 0; i < g.values().size(); ++i) {
    EXPECT_NEAR(g.values()[i], u.values()[i] + 3.5 * (c.values()[i] - u.values()[i]), 1e-14);
  }
  EXPECT_THROW(cfg_velocity(c, random_grid(3, 3, 5, 1), 2.0), DimensionError);
}

TEST(Sample, ZeroVelocityKeepsInit) {
  const auto z = random_grid(4, 4, 3, 5);
  FlowSchedule s;
  s.steps = 1;
  const auto tr = sample(ZeroVelocity(), z, kPrompt, s);
  EXPECT_EQ(tr.size(), 2u);
  EXPECT_EQ(tr.endpoint(), z);
}

TEST(Sample, IdentityHookAndHookContract) {
  const OracleVelocity model(single_gaussian(filled(3, 3, 2, 0.4), 0.3));
  const auto z = random_grid(3, 3, 2, 6);
  FlowSchedule s;
  s.steps = 12;
  std::vector<int> indices;
  std::vector<double> times;
  SampleHooks hooks;
  hooks.on_state = [&](int index, double t, TokenGrid&) {
    indices.push_back(index);
    times.push_back(t);
  };
  const auto plain = sample(model, z, kPrompt, s);
  const auto hooked = sample(model, z, kPrompt, s, &hooks);
  EXPECT_EQ(plain.states, hooked.states);
  EXPECT_EQ(plain.times, s.timesteps());
  ASSERT_EQ(indices.size(), 13u);
  for (int k = 0; k < 13; ++k) EXPECT_EQ(indices[k], k);
  for (std::size_t k = 1; k < times.size(); ++k) EXPECT_LT(times[k], times[k - 1]);
}

TEST(Sample, HookEditsAreRecorded) {
  FlowSchedule s;
  s.steps = 4;
  SampleHooks hooks;
  hooks.on_state = [](int index, double, TokenGrid& x) {
    if (index == 2) x.values()[0] = 42.0;
  };
  const auto tr = sample(ZeroVelocity(), random_grid(2, 2, 1, 1), kPrompt, s, &hooks);
  EXPECT_EQ(tr.states[2].values()[0], 42.0);
  EXPECT_EQ(tr.endpoint().values()[0], 42.0);
}

TEST(Sample, Deterministic) {
  const OracleVelocity model(single_gaussian(filled(3, 3, 2, -0.2), 0.5));
  const auto z = gaussian_noise(3, 3, 2, 99);
  FlowSchedule s;
  s.steps = 30;
  EXPECT_EQ(sample(model, z, kPrompt, s).states, sample(model, z, kPrompt, s).states);
  EXPECT_EQ(gaussian_noise(3, 3, 2, 99), z);
  EXPECT_NE(gaussian_noise(3, 3, 2, 98), z);
}

TEST(Sample, GuidanceNeutralityAtScaleOne) {
  const PromptModel inner;
  const CountingModel counted(inner);
  const auto z = random_grid(2, 2, 2, 3);
  FlowSchedule s;
  s.steps = 10;
  s.guidance = 1.0;
  const auto guided = sample(counted, z, kPrompt, s);
  EXPECT_EQ(counted.null_calls.load(), 0);
  EXPECT_EQ(counted.calls.load(), 10);
  s.guidance = 3.5;
  sample(counted, z, kPrompt, s);
  EXPECT_EQ(counted.null_calls.load(), 10);
}

TEST(Sample, NonFiniteStateNamesStep) {
  FlowSchedule s;
  s.steps = 10;
  s.guidance = 1.0;
  try {
    sample(ExplodingModel(), random_grid(2, 2, 1, 1), kPrompt, s);
    FAIL();
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("step 6"), std::string::npos) << e.what();
  }
}

TEST(Sample, SingleGaussianMatchesTransport) {
  const auto mean = random_grid(3, 3, 2, 10);
  const double var = 0.4;
  const OracleVelocity model(single_gaussian(mean, var));
  FlowSchedule s;
  s.steps = 400;
  s.guidance = 1.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto z = gaussian_noise(3, 3, 2, seed);
    const auto end = sample(model, z, kPrompt, s).endpoint();
    EXPECT_LE(max_abs_diff(end, gaussian_transport(mean, var, z, 1.0, 0.0)), 1e-2);
  }
}

TEST(Sample, EulerIsFirstOrder) {
  const auto mean = random_grid(2, 2, 3, 12);
  const double var = 0.25;
  const OracleVelocity model(single_gaussian(mean, var));
  FlowSchedule coarse;
  coarse.steps = 50;
  coarse.guidance = 1.0;
  FlowSchedule fine = coarse;
  fine.steps = 100;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto z = gaussian_noise(2, 2, 3, 1000 + seed);
    const auto exact = gaussian_transport(mean, var, z, 1.0, 0.0);
    const double e1 = max_abs_diff(sample(model, z, kPrompt, coarse).endpoint(), exact);
    const double e2 = max_abs_diff(sample(model, z, kPrompt, fine).endpoint(), exact);
    const double ratio = e1 / e2;
    EXPECT_GE(ratio, 1.7) << "seed " << seed;
    EXPECT_LE(ratio, 2.3) << "seed " << seed;
  }
}

// A single Gaussian has an affine flow, so every seed gives the same ratio.
// The mixture flow is nonlinear and the ratio varies per seed.
TEST(Sample, EulerIsFirstOrderOnAMixture) {
  const OracleVelocity model(GaussianMixtureOracle{
      {0.4, 0.6}, {random_grid(2, 2, 3, 13), random_grid(2, 2, 3, 14)}, {0.25, 0.4}});
  FlowSchedule coarse;
  coarse.steps = 50;
  coarse.guidance = 1.0;
  FlowSchedule fine = coarse;
  fine.steps = 100;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto z = gaussian_noise(2, 2, 3, 2000 + seed);
    const auto exact = rk4_endpoint(model, z, 2000);
    const double e1 = max_abs_diff(sample(model, z, kPrompt, coarse).endpoint(), exact);
    const double e2 = max_abs_diff(sample(model, z, kPrompt, fine).endpoint(), exact);
    const double ratio = e1 / e2;
    EXPECT_GE(ratio, 1.7) << "seed " << seed;
    EXPECT_LE(ratio, 2.3) << "seed " << seed;
  }
}

TEST(Invert, ZeroVelocityAndBookkeeping) {
  const auto x = random_grid(3, 2, 4, 8);
  FlowSchedule s;
  s.steps = 7;
  const auto tr = invert(ZeroVelocity(), x, kPrompt, s);
  ASSERT_EQ(tr.size(), 8u);
  for (const auto& st : tr.states) EXPECT_EQ(st, x);
  auto rev = s.timesteps();
  std::reverse(rev.begin(), rev.end());
  EXPECT_EQ(tr.times, rev);
}

TEST(Invert, RoundTripOnOracle) {
  const auto mean = random_grid(3, 3, 2, 20);
  const OracleVelocity model(single_gaussian(mean, 0.5));
  FlowSchedule s;
  s.steps = 200;
  s.guidance = 1.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto z = gaussian_noise(3, 3, 2, 300 + seed);
    const auto clean = sample(model, z, kPrompt, s).endpoint();
    const auto inv = invert(model, clean, kPrompt, s);
    const auto back = sample(model, inv.endpoint(), kPrompt, s).endpoint();
    EXPECT_LE(max_abs_diff(back, clean), 1e-3);
  }
}

TEST(Invert, GuidanceIsIgnored) {
  const PromptModel inner;
  const CountingModel counted(inner);
  FlowSchedule s;
  s.steps = 5;
  s.guidance = 3.5;
  invert(counted, random_grid(2, 2, 2, 1), kPrompt, s);
  EXPECT_EQ(counted.null_calls.load(), 0);
}

TEST(OracleVelocity, DeterministicDataLimit) {
  const auto mean = random_grid(2, 2, 2, 30);
  const auto x = random_grid(2, 2, 2, 31);
  const auto v = oracle_velocity(single_gaussian(mean, 1e-12), x, 1.0);
  for (std::size_t i = 0; i < v.values().size(); ++i) {
    EXPECT_NEAR(v.values()[i], x.values()[i] - mean.values()[i], 1e-9);
  }
}

TEST(OracleVelocity, SymmetricMixtureMidpoint) {
  const auto a = filled(1, 1, 2, 1.0);
  const auto b = filled(1, 1, 2, -1.0);
  GaussianMixtureOracle o{{0.5, 0.5}, {a, b}, {0.2, 0.2}};
  const double t = 0.4;
  const auto mid = filled(1, 1, 2, 0.0);
  const auto v = oracle_velocity(o, mid, t);
  // Mean difference axis is (1, 1).
  EXPECT_NEAR(v.values()[0] + v.values()[1], 0.0, 1e-12);
}

TEST(OracleVelocity, RejectsTimeOutsideUnitInterval) {
  const auto o = single_gaussian(filled(1, 1, 2, 0.0), 1.0);
  EXPECT_THROW(oracle_velocity(o, filled(1, 1, 2, 0.0), 1.5), ParameterError);
  EXPECT_THROW(oracle_velocity(o, filled(1, 1, 2, 0.0), -0.1), ParameterError);
  GaussianMixtureOracle bad{{0.5, 0.6}, {filled(1, 1, 2, 0), filled(1, 1, 2, 1)}, {1, 1}};
  EXPECT_THROW(bad.validate(), ParameterError);
}

TEST(OracleVelocity, MatchesMonteCarloPosterior) {
  // Self-normalised importance sampling: draw data from the mixture, weight
  // by the likelihood of x_t, and average noise - data.
  GaussianMixtureOracle o{{0.3, 0.7},
                          {random_grid(1, 1, 2, 40), random_grid(1, 1, 2, 41)},
                          {0.5, 0.2}};
  const double t = 0.6;
  const auto x = random_grid(1, 1, 2, 42);
  const auto v = oracle_velocity(o, x, t);
  CounterRng rng(7, 8);
  const int n = 1'000'000;
  std::vector<double> w(n);
  std::vector<std::array<double, 2>> f(n);
  double wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    const int c = rng.uniform() < o.weights[0] ? 0 : 1;
    const double sd = std::sqrt(o.variances[c]);
    std::array<double, 2> data{};
    double r2 = 0.0;
    for (int k = 0; k < 2; ++k) {
      data[k] = o.means[c].values()[k] + sd * rng.normal();
      const double noise = (x.values()[k] - (1 - t) * data[k]) / t;
      f[i][k] = noise - data[k];
      r2 += noise * noise;
    }
    w[i] = std::exp(-0.5 * r2);
    wsum += w[i];
  }
  for (int k = 0; k < 2; ++k) {
    double est = 0.0;
    for (int i = 0; i < n; ++i) est += w[i] * f[i][k];
    est /= wsum;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += w[i] * w[i] * (f[i][k] - est) * (f[i][k] - est);
    const double se = std::sqrt(var) / wsum;
    EXPECT_LE(std::abs(est - v.values()[k]), 3 * se) << "coordinate " << k << " se " << se;
  }
}

TEST(Trajectory, DumpAndLoad) {
  const auto dir = std::filesystem::temp_directory_path() / "tokenswap_traj";
  std::filesystem::remove_all(dir);
  FlowSchedule s;
  s.steps = 3;
  const auto tr = sample(OracleVelocity(single_gaussian(filled(2, 2, 4, 0.5), 0.5)),
                         gaussian_noise(2, 2, 4, 1), kPrompt, s);
  dump_trajectory(dir, tr);
  EXPECT_TRUE(std::filesystem::exists(dir / "index.json"));
  const auto back = load_trajectory(dir);
  EXPECT_EQ(back.times, tr.times);
  ASSERT_EQ(back.size(), tr.size());
  for (std::size_t k = 0; k < tr.size(); ++k) EXPECT_LT(max_abs_diff(back.states[k], tr.states[k]), 1e-6);
}
