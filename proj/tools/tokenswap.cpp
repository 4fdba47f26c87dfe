// tokenswap: command-line driver for the sprite DiT lab.
//
// Every subcommand reads its options from flags and/or the [section] of the
// same name in an INI file given by --config; flags win. Failures print one
// line to stderr, "error kind=<kind> message=<text>", and exit non-zero.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tokenswap/errors.hpp"
#include "tokenswap/eval_metrics.hpp"
#include "tokenswap/experiments.hpp"
#include "tokenswap/flow_engine.hpp"
#include "tokenswap/grid_mask.hpp"
#include "tokenswap/image.hpp"
#include "tokenswap/personalize.hpp"
#include "tokenswap/sprites.hpp"
#include "tokenswap/toy_dit.hpp"
#include "tokenswap/trainer.hpp"

namespace fs = std::filesystem;
using namespace tokenswap;

namespace {

struct Common {
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  std::string format = "png";
  int jobs = 1;
};

struct SamplingOptions {
  std::string checkpoint;
  std::string prompt;
  int steps = 50;
  double guidance = 3.5;
};

ImageFormat image_format(const std::string& f) {
  if (f == "png") return ImageFormat::png;
  if (f == "ppm") return ImageFormat::ppm;
  throw ConfigError(fmt::format("format: expected png or ppm, got '{}'", f));
}

std::string image_ext(const Common& c) { return c.format == "ppm" ? ".ppm" : ".png"; }

void require_file(const std::string& field, const std::string& path) {
  if (path.empty()) throw ConfigError(fmt::format("{}: required", field));
  if (!fs::is_regular_file(path)) throw ConfigError(fmt::format("{}: file not found: {}", field, path));
}

sprites::Prompt prompt_option(const std::string& field, const std::string& text) {
  if (text.empty()) throw ConfigError(fmt::format("{}: required", field));
  try {
    return sprites::parse_prompt(text);
  } catch (const Error& e) {
    throw ConfigError(fmt::format("{}: {}", field, e.what()));
  }
}

FlowSchedule schedule_from(const SamplingOptions& s) {
  FlowSchedule sched;
  sched.steps = s.steps;
  sched.guidance = s.guidance;
  try {
    sched.validate();
  } catch (const Error& e) {
    throw ConfigError(fmt::format("steps/guidance: {}", e.what()));
  }
  return sched;
}

DiTVelocity<float> load_model(const std::string& path) {
  require_file("checkpoint", path);
  return DiTVelocity<float>(load_checkpoint(path).params);
}

GridOffset parse_delta(const std::string& text) {
  int r = 0;
  int c = 0;
  char sep = 0;
  std::istringstream in(text);
  if (!(in >> r >> sep >> c) || sep != ',' || !in.eof()) {
    throw ConfigError(fmt::format("delta: expected 'rows,cols', got '{}'", text));
  }
  return {r, c};
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
}

void cmd_dataset(const Common& c, int count) {
  if (count < 0) throw ConfigError("count: must be >= 0");
  const auto samples = sprites::generate_sprite_dataset(count, c.seed);
  const fs::path dir = c.out_dir;
  fs::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string image = fmt::format("sprite_{:04d}{}", i, image_ext(c));
    const std::string mask = fmt::format("mask_{:04d}.pbm", i);
    write_image(dir / image, s.image, image_format(c.format));
    write_pbm(dir / mask, s.mask);
    index.push_back({{"image", image},
                     {"mask", mask},
                     {"prompt", sprites::prompt_to_string(s.prompt)},
                     {"cx", s.spec.cx},
                     {"cy", s.spec.cy},
                     {"radius", s.spec.radius}});
  }
  write_text(dir / "index.json", index.dump(2) + "\n");
  spdlog::info("wrote {} sprites to {}", samples.size(), dir.string());
}

void cmd_train(const Common& c, TrainConfig tc, const std::string& resume) {
  tc.seed = c.seed;
  tc.jobs = c.jobs;
  try {
    tc.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  Checkpoint state{init_params(DiTConfig{}, c.seed), std::nullopt, std::nullopt, 0};
  if (!resume.empty()) {
    require_file("resume", resume);
    state = load_checkpoint(resume);
    spdlog::info("resuming from step {}", state.step);
  }
  std::vector<TrainStep> log;
  std::vector<double> losses;
  train(state, tc, [&](const TrainStep& s) {
    log.push_back(s);
    losses.push_back(s.loss);
    if (s.step % 100 == 0) {
      spdlog::info("step {} loss {:.4f} smoothed {:.4f}", s.step, s.loss,
                   smooth_losses(losses, tc.smoothing).back());
    }
  });
  const fs::path dir = c.out_dir;
  save_checkpoint(dir / "model.tdit", state);
  write_loss_csv(dir / "loss.csv", log);
  spdlog::info("saved {} at step {}", (dir / "model.tdit").string(), state.step);
}

void cmd_generate(const Common& c, const SamplingOptions& so) {
  const auto prompt = prompt_option("prompt", so.prompt);
  const auto sched = schedule_from(so);
  const auto model = load_model(so.checkpoint);
  const auto& cfg = model.params().config();
  const TokenGrid z = gaussian_noise(cfg.grid(), cfg.grid(), cfg.token_dim(), c.seed);
  const auto traj = sample(model, z, prompt, sched);
  const fs::path out = fs::path(c.out_dir) / ("generated" + image_ext(c));
  write_image(out, tokens_to_image(traj.endpoint(), cfg.patch), image_format(c.format));
  spdlog::info("wrote {} (prompt consistency {:.3f})", out.string(),
               prompt_consistency(tokens_to_image(traj.endpoint(), cfg.patch), prompt));
}

struct PersonalizeOptions {
  std::vector<std::string> references;
  std::vector<std::string> masks;
  std::vector<std::string> ref_prompts;
  std::vector<std::string> deltas;
  double tau = kDefaultTau;
  bool shuffle = false;
  int window = 3;
  std::string morphology = "none";
  int kernel = 5;
  std::uint64_t perturb_seed = 0;
  bool dump_trajectory = false;
};

void cmd_personalize(const Common& c, const SamplingOptions& so, const PersonalizeOptions& po) {
  const auto prompt = prompt_option("prompt", so.prompt);
  const auto sched = schedule_from(so);
  if (po.references.empty()) throw ConfigError("reference: at least one reference image is required");
  auto check_count = [&](const std::vector<std::string>& v, const char* field) {
    if (!v.empty() && v.size() != po.references.size()) {
      throw ConfigError(fmt::format("{}: expected {} entries (one per reference), got {}", field,
                                    po.references.size(), v.size()));
    }
  };
  check_count(po.masks, "mask");
  check_count(po.ref_prompts, "ref-prompt");
  check_count(po.deltas, "delta");
  if (!(po.tau >= 0.0 && po.tau <= 1.0)) throw ConfigError("tau: must lie in [0, 1]");
  for (const auto& r : po.references) require_file("reference", r);
  for (const auto& m : po.masks) require_file("mask", m);

  const auto model = load_model(so.checkpoint);
  const auto& cfg = model.params().config();
  PersonalizeRequest req;
  req.prompt = prompt;
  req.tau = po.tau;
  req.schedule = sched;
  req.canvas = {cfg.grid(), cfg.grid()};
  req.token_dim = cfg.token_dim();
  req.perturbation.shuffle = po.shuffle;
  req.perturbation.window = po.window;
  req.perturbation.morphology = parse_morphology(po.morphology);
  req.perturbation.kernel = po.kernel;
  req.perturbation.seed = po.perturb_seed;
  // Masks and targets first, so overlapping layouts fail before any inversion.
  std::vector<Image> images;
  std::vector<BinaryMask> masks;
  std::vector<BinaryMask> targets;
  for (std::size_t i = 0; i < po.references.size(); ++i) {
    images.push_back(read_image(po.references[i]));
    masks.push_back(po.masks.empty() ? mask_from_sprite(images[i], border_median(images[i]), cfg.patch)
                                     : read_pbm(po.masks[i]));
    const GridOffset delta = po.deltas.empty() ? GridOffset{} : parse_delta(po.deltas[i]);
    targets.push_back(translate_mask(masks[i], delta));
  }
  if (!check_disjoint(targets)) throw DisjointnessError("reference target masks overlap");
  for (std::size_t i = 0; i < po.references.size(); ++i) {
    const auto ref_prompt =
        po.ref_prompts.empty() ? prompt : prompt_option("ref-prompt", po.ref_prompts[i]);
    const ReferenceBundle bundle = prepare_reference(model, images[i], masks[i], ref_prompt, sched);
    const GridOffset delta = po.deltas.empty() ? GridOffset{} : parse_delta(po.deltas[i]);
    auto [moved, target] = compose_layout(bundle, delta);
    req.references.push_back({std::move(moved), std::move(target)});
  }
  const auto result = personalize(model, req, c.seed);
  const fs::path dir = c.out_dir;
  write_image(dir / ("personalized" + image_ext(c)), result.image, image_format(c.format));
  if (po.dump_trajectory) dump_trajectory(dir / "trajectory", result.trajectory);
  spdlog::info("wrote {} ({} replacement steps)", (dir / ("personalized" + image_ext(c))).string(),
               result.replaced_steps.size());
}

void cmd_edit(const Common& c, const SamplingOptions& so, const std::string& image_path,
              const std::string& keep_path, const std::string& mode, double tau) {
  const auto prompt = prompt_option("prompt", so.prompt);
  const auto sched = schedule_from(so);
  require_file("image", image_path);
  require_file("keep-mask", keep_path);
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau: must lie in [0, 1]");
  EditOptions opts;
  opts.mode = parse_edit_mode(mode);
  if (opts.mode == EditMode::personalize) throw ConfigError("mode: expected inpaint or outpaint");
  opts.tau = tau;
  opts.schedule = sched;
  opts.seed = c.seed;
  const auto model = load_model(so.checkpoint);
  const Image out = edit(model, read_image(image_path), read_pbm(keep_path), prompt, opts);
  const fs::path path = fs::path(c.out_dir) / ("edited" + image_ext(c));
  write_image(path, out, image_format(c.format));
  spdlog::info("wrote {}", path.string());
}

void cmd_ablate(const Common& c, const SamplingOptions& so, AblationConfig ac) {
  ac.schedule = schedule_from(so);
  ac.seed = c.seed;
  ac.jobs = c.jobs;
  try {
    ac.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  require_file("checkpoint", so.checkpoint);
  const auto params = load_checkpoint(so.checkpoint).params;
  const auto report = run_tau_ablation(params, ac);
  const fs::path dir = c.out_dir;
  report.write_csv(dir / "ablation.csv");
  write_text(dir / "ablation.txt", report.summary());
  std::cout << report.summary();
}

void cmd_probe(const Common& c, const std::string& checkpoint, ProbeConfig pc,
               const std::vector<std::string>& strategies) {
  pc.seed = c.seed;
  pc.jobs = c.jobs;
  pc.strategies.clear();
  try {
    for (const auto& s : strategies) pc.strategies.push_back(parse_position_strategy(s));
    pc.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  require_file("checkpoint", checkpoint);
  const auto params = load_checkpoint(checkpoint).params;
  const auto report = run_position_probe(params, pc);
  const fs::path dir = c.out_dir;
  report.write_csv(dir / "probe.csv");
  report.write_heatmaps(dir);
  write_text(dir / "probe.txt", report.summary());
  std::cout << report.summary();
}

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("tokenswap");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* level = std::getenv("TOKENSWAP_LOG")) {
    const auto parsed = spdlog::level::from_str(level);
    // from_str maps unknown names to off; only accept the literal "off".
    if (parsed != spdlog::level::off || std::string(level) == "off") spdlog::set_level(parsed);
  }
}

void add_common(CLI::App* app, Common& c, bool jobs) {
  app->add_option("--out-dir", c.out_dir, "Output directory");
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("--format", c.format, "Image format")->check(CLI::IsMember({"png", "ppm"}));
  if (jobs) app->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

void add_sampling(CLI::App* app, SamplingOptions& s, bool prompt) {
  app->add_option("--checkpoint", s.checkpoint, "Model checkpoint (TDIT)");
  if (prompt) app->add_option("--prompt", s.prompt, "Prompt tokens, e.g. \"circle red bg-white tex3\"");
  app->add_option("--steps", s.steps, "Sampling steps");
  app->add_option("--guidance", s.guidance, "Classifier-free guidance scale");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tokenswap: token-replacement personalization on a toy diffusion transformer"};
  app.set_config("--config", "", "INI file with one [section] per subcommand");
  app.require_subcommand(1);
  app.allow_config_extras(CLI::config_extras_mode::error);

  Common common;
  SamplingOptions sampling;

  auto* dataset = app.add_subcommand("dataset", "Render sprites, masks and an index");
  int count = 10;
  add_common(dataset, common, false);
  dataset->add_option("--count", count, "Number of sprites");

  auto* train_cmd = app.add_subcommand("train", "Train the toy DiT with flow matching");
  TrainConfig tc;
  std::string resume;
  add_common(train_cmd, common, true);
  train_cmd->add_option("--steps", tc.steps, "Optimizer steps (total, including resumed ones)");
  train_cmd->add_option("--batch", tc.batch, "Batch size");
  train_cmd->add_option("--lr", tc.lr, "Peak learning rate");
  train_cmd->add_option("--warmup", tc.warmup, "Warmup steps");
  train_cmd->add_option("--resume", resume, "Checkpoint to resume from");

  auto* generate = app.add_subcommand("generate", "Plain sampling from a prompt");
  add_common(generate, common, false);
  add_sampling(generate, sampling, true);

  auto* pers = app.add_subcommand("personalize", "Insert reference subjects");
  PersonalizeOptions po;
  add_common(pers, common, false);
  add_sampling(pers, sampling, true);
  pers->add_option("--reference", po.references, "Reference image (repeatable)");
  pers->add_option("--mask", po.masks, "Reference mask PBM (repeatable, one per reference)");
  pers->add_option("--ref-prompt", po.ref_prompts, "Source prompt for inversion (repeatable)");
  pers->add_option("--delta", po.deltas, "Layout offset 'rows,cols' in tokens (repeatable)");
  pers->add_option("--tau", po.tau, "Replacement threshold on normalized time");
  pers->add_flag("--shuffle", po.shuffle, "Shuffle reference tokens in windows");
  pers->add_option("--window", po.window, "Shuffle window side");
  pers->add_option("--morphology", po.morphology, "none, dilate or erode");
  pers->add_option("--kernel", po.kernel, "Morphology kernel side");
  pers->add_option("--perturb-seed", po.perturb_seed, "Seed for the shuffle");
  pers->add_flag("--dump-trajectory", po.dump_trajectory, "Write TGRD states and index.json");

  auto* edit_cmd = app.add_subcommand("edit", "Inpaint or outpaint around a keep-mask");
  std::string edit_image;
  std::string keep_mask;
  std::string edit_mode = "inpaint";
  double edit_tau = kEditTau;
  add_common(edit_cmd, common, false);
  add_sampling(edit_cmd, sampling, true);
  edit_cmd->add_option("--image", edit_image, "Input image");
  edit_cmd->add_option("--keep-mask", keep_mask, "PBM mask of the region to preserve");
  edit_cmd->add_option("--mode", edit_mode, "inpaint or outpaint");
  edit_cmd->add_option("--tau", edit_tau, "Replacement threshold on normalized time");

  auto* ablate = app.add_subcommand("ablate", "Replacement-threshold ablation");
  AblationConfig ac;
  add_common(ablate, common, true);
  add_sampling(ablate, sampling, false);
  ablate->add_option("--taus", ac.taus, "Thresholds to sweep");
  ablate->add_option("--seeds", ac.seeds, "Seeds per threshold");
  ablate->add_option("--perturbation-tau", ac.perturbation_tau, "Threshold of the perturbation row");
  ablate->add_flag("!--no-perturbation-row", ac.perturbation_row, "Skip the perturbation row");

  auto* probe = app.add_subcommand("probe", "Matched-position attention probe");
  ProbeConfig pc;
  std::string probe_checkpoint;
  std::vector<std::string> strategies{"original", "zero", "shifted"};
  add_common(probe, common, true);
  probe->add_option("--checkpoint", probe_checkpoint, "Model checkpoint (TDIT)");
  probe->add_option("--samples", pc.samples, "Samples to average");
  probe->add_option("--timesteps", pc.timesteps, "Timesteps to probe");
  probe->add_option("--strategies", strategies, "Reference position strategies");

  configure_logging();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << fmt::format("error kind=config message={}\n", e.what());
    return 2;
  }

  try {
    image_format(common.format);
    if (*dataset) cmd_dataset(common, count);
    if (*train_cmd) cmd_train(common, tc, resume);
    if (*generate) cmd_generate(common, sampling);
    if (*pers) cmd_personalize(common, sampling, po);
    if (*edit_cmd) cmd_edit(common, sampling, edit_image, keep_mask, edit_mode, edit_tau);
    if (*ablate) cmd_ablate(common, sampling, ac);
    if (*probe) cmd_probe(common, probe_checkpoint, pc, strategies);
  } catch (const Error& e) {
    std::cerr << fmt::format("error kind={} message={}\n", e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::cerr << fmt::format("error kind=internal message={}\n", e.what());
    return 1;
  }
  return 0;
}
