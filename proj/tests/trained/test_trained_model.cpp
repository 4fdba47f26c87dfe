// Properties of a trained checkpoint. The path comes from argv[1]; the
// acceptance run writes it before these tests are scheduled.

#include <filesystem>
#include <iostream>

#include <gtest/gtest.h>

#include "tokenswap/eval_metrics.hpp"
#include "tokenswap/flow_engine.hpp"
#include "tokenswap/personalize.hpp"
#include "tokenswap/toy_dit.hpp"

using namespace tokenswap;

namespace {

std::filesystem::path g_model_path;

const Checkpoint& trained() {
  static const Checkpoint ck = load_checkpoint(g_model_path);
  return ck;
}

const DiTVelocity<float>& model() {
  static const DiTVelocity<float> m(trained().params);
  return m;
}

// Pixel MSE between `out` on the cells of `mask` and `ref` read `delta` cells
// earlier. Pixels whose source falls off the image are skipped.
double shifted_mse(const Image& out, const BinaryMask& mask, const Image& ref, GridOffset delta) {
  const int patch = out.height / mask.height();
  double se = 0.0;
  int n = 0;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      if (!mask.at(y / patch, x / patch)) continue;
      const int ry = y - patch * delta.rows;
      const int rx = x - patch * delta.cols;
      if (ry < 0 || rx < 0 || ry >= ref.height || rx >= ref.width) continue;
      for (int ch = 0; ch < 3; ++ch) {
        const double e = out.at(y, x, ch) - ref.at(ry, rx, ch);
        se += e * e;
        ++n;
      }
    }
  }
  return se / n;
}

sprites::SpriteSample centred_sprite(double cx, double cy, int color, std::uint64_t index) {
  auto spec = sprites::random_sprite_spec(0x7a1, index);
  spec.cx = cx;
  spec.cy = cy;
  spec.radius = 5;
  spec.color = color;
  return sprites::render_sprite(spec);
}

}  // namespace

TEST(TrainedModel, TimestepChangesTheVelocity) {
  const auto x = gaussian_noise(16, 16, 12, 1);
  const auto p = sprites::random_sprite_spec(3, 0).prompt();
  const auto early = dit_forward(trained().params, x, 0.9, p);
  const auto late = dit_forward(trained().params, x, 0.1, p);
  EXPECT_GT(max_abs_diff(early, late), 1e-2);
}

TEST(TrainedModel, PromptColourSteersTheSubject) {
  FlowSchedule sched;
  int wins = 0;
  constexpr int kTrials = 6;
  for (int i = 0; i < kTrials; ++i) {
    auto a = sprites::random_sprite_spec(0xc01, i).prompt();
    auto b = a;
    b[1] = sprites::kColorBase + (a[1] - sprites::kColorBase + 3) % sprites::kColors;
    const auto z = gaussian_noise(16, 16, 12, 40 + i);
    const Image ia = tokens_to_image(sample(model(), z, a, sched).endpoint());
    const Image ib = tokens_to_image(sample(model(), z, b, sched).endpoint());
    wins += attribute_scores(ia, a).color > attribute_scores(ia, b).color &&
            attribute_scores(ib, b).color > attribute_scores(ib, a).color;
  }
  EXPECT_GE(wins, kTrials - 1);
}

TEST(TrainedModel, LayoutDeltaMovesTheSubject) {
  FlowSchedule sched;
  const auto ref = centred_sprite(12, 12, 2, 1);
  const auto bundle = prepare_reference(model(), ref.image, ref.mask, ref.prompt, sched);
  const GridOffset delta{4, 3};
  const auto [moved, target] = compose_layout(bundle, delta);
  PersonalizeRequest req;
  req.references.push_back({moved, target});
  req.prompt = ref.prompt;
  req.schedule = sched;
  req.tau = 0.5;
  const auto out = personalize(model(), req, 5);
  const double at_target = shifted_mse(out.image, target, ref.image, delta);
  const double at_origin = shifted_mse(out.image, ref.mask, ref.image, {0, 0});
  std::cout << "reference MSE at target " << at_target << ", at origin " << at_origin << "\n";
  EXPECT_LT(at_target, at_origin);
}

// The second subject contradicts the prompt, and the model paints it over if
// replacement stops early, so both references are held until tau = 0.3.
TEST(TrainedModel, DisjointReferencesBothBeatTheNoiseFloor) {
  FlowSchedule sched;
  const auto a = centred_sprite(9, 9, 0, 2);
  const auto b = centred_sprite(23, 23, 4, 3);
  // Noise floor: a sample with no references compared against each subject.
  const auto prompt = a.prompt;
  const Image plain = tokens_to_image(sample(model(), gaussian_noise(16, 16, 12, 77), prompt, sched).endpoint());
  const auto& p = trained().params;
  const double floor_a = masked_similarity(p, plain, a.mask, a.image, a.mask);
  const double floor_b = masked_similarity(p, plain, b.mask, b.image, b.mask);

  PersonalizeRequest req;
  req.prompt = prompt;
  req.schedule = sched;
  req.tau = 0.3;
  req.references.push_back({prepare_reference(model(), a.image, a.mask, a.prompt, sched), a.mask});
  req.references.push_back({prepare_reference(model(), b.image, b.mask, b.prompt, sched), b.mask});
  const auto out = personalize(model(), req, 77);
  const double sim_a = masked_similarity(p, out.image, a.mask, a.image, a.mask);
  const double sim_b = masked_similarity(p, out.image, b.mask, b.image, b.mask);
  std::cout << "noise floor " << floor_a << " / " << floor_b << ", personalized " << sim_a << " / "
            << sim_b << "\n";
  EXPECT_GT(sim_a, floor_a);
  EXPECT_GT(sim_b, floor_b);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc < 2) {
    std::cerr << "usage: tokenswap_trained <model.tdit>\n";
    return 2;
  }
  g_model_path = argv[1];
  return RUN_ALL_TESTS();
}
