#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <gtest/gtest.h>
#include <json.hpp>

#include "tokenswap/grid_mask.hpp"
#include "tokenswap/image.hpp"
#include "tokenswap/toy_dit.hpp"

namespace fs = std::filesystem;
using namespace tokenswap;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "tokenswap_cli";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Run {
  int code = 0;
  std::string err;
};

Run run(const std::string& args) {
  fs::create_directories(kRoot);
  const auto err = kRoot / "stderr.txt";
  const std::string cmd = std::string("TOKENSWAP_LOG=warn ") + TOKENSWAP_CLI + " " + args + " 2> " +
                          err.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err);
  return r;
}

// A two-step checkpoint shared by the sampling commands.
const fs::path& checkpoint() {
  static const fs::path path = [] {
    const auto dir = kRoot / "ckpt";
    fs::remove_all(dir);
    const auto r = run("train --steps 2 --batch 2 --seed 3 --out-dir " + dir.string());
    EXPECT_EQ(r.code, 0) << r.err;
    return dir / "model.tdit";
  }();
  return path;
}

}  // namespace

TEST(Cli, DatasetWritesIndexedTriples) {
  const auto dir = kRoot / "dataset";
  fs::remove_all(dir);
  ASSERT_EQ(run("dataset --count 10 --seed 5 --out-dir " + dir.string()).code, 0);
  const auto index = nlohmann::json::parse(slurp(dir / "index.json"));
  ASSERT_EQ(index.size(), 10u);
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir)) files += e.is_regular_file();
  EXPECT_EQ(files, 21);
  for (const auto& entry : index) {
    const auto image = read_image(dir / entry["image"].get<std::string>());
    const auto mask = read_pbm(dir / entry["mask"].get<std::string>());
    EXPECT_EQ(image.height, 32);
    EXPECT_EQ(mask.height(), 16);
    EXPECT_GT(mask.popcount(), 0);
    EXPECT_FALSE(entry["prompt"].get<std::string>().empty());
  }
}

TEST(Cli, DatasetIsByteIdenticalPerSeed) {
  const auto a = kRoot / "ds_a";
  const auto b = kRoot / "ds_b";
  fs::remove_all(a);
  fs::remove_all(b);
  ASSERT_EQ(run("dataset --count 3 --seed 8 --format ppm --out-dir " + a.string()).code, 0);
  ASSERT_EQ(run("dataset --count 3 --seed 8 --format ppm --out-dir " + b.string()).code, 0);
  for (const char* f : {"sprite_0000.ppm", "mask_0002.pbm", "index.json"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
}

TEST(Cli, TrainZeroStepsEqualsInitialisation) {
  const auto dir = kRoot / "train0";
  fs::remove_all(dir);
  ASSERT_EQ(run("train --steps 0 --seed 4 --out-dir " + dir.string()).code, 0);
  const auto ck = load_checkpoint(dir / "model.tdit");
  EXPECT_EQ(ck.params.values(), init_params(DiTConfig{}, 4).values());
  EXPECT_EQ(ck.step, 0u);
}

TEST(Cli, TrainLossRowsAndResume) {
  const auto full = kRoot / "train_full";
  const auto half = kRoot / "train_half";
  const auto rest = kRoot / "train_rest";
  for (const auto& d : {full, half, rest}) fs::remove_all(d);
  ASSERT_EQ(run("train --steps 4 --batch 2 --seed 1 --out-dir " + full.string()).code, 0);
  std::istringstream csv(slurp(full / "loss.csv"));
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 5);  // header plus one row per step
  ASSERT_EQ(run("train --steps 2 --batch 2 --seed 1 --out-dir " + half.string()).code, 0);
  ASSERT_EQ(run("train --steps 4 --batch 2 --seed 1 --resume " + (half / "model.tdit").string() +
                " --out-dir " + rest.string())
                .code,
            0);
  EXPECT_EQ(slurp(full / "model.tdit"), slurp(rest / "model.tdit"));
}

TEST(Cli, GenerateIsReproducible) {
  const auto a = kRoot / "gen_a";
  const auto b = kRoot / "gen_b";
  const std::string args = "generate --checkpoint " + checkpoint().string() +
                           " --prompt \"square green bg-white tex2\" --steps 4 --seed 6 --out-dir ";
  ASSERT_EQ(run(args + a.string()).code, 0);
  ASSERT_EQ(run(args + b.string()).code, 0);
  EXPECT_EQ(slurp(a / "generated.png"), slurp(b / "generated.png"));
}

TEST(Cli, ConfigFileWithFlagOverride) {
  const auto ini = kRoot / "run.ini";
  const auto from_file = kRoot / "ini_file";
  const auto from_flag = kRoot / "ini_flag";
  fs::remove_all(from_file);
  fs::remove_all(from_flag);
  std::ofstream(ini) << "[dataset]\ncount = 2\nseed = 7\nout-dir = \"" << from_file.string()
                     << "\"\n";
  ASSERT_EQ(run("--config " + ini.string() + " dataset").code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(from_file / "index.json")).size(), 2u);
  ASSERT_EQ(run("--config " + ini.string() + " dataset --count 1 --out-dir " + from_flag.string()).code, 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(from_flag / "index.json")).size(), 1u);
}

TEST(Cli, OverlappingMasksExitWithDisjointnessError) {
  const auto dir = kRoot / "overlap";
  fs::remove_all(dir);
  ASSERT_EQ(run("dataset --count 1 --seed 2 --out-dir " + dir.string()).code, 0);
  const auto img = (dir / "sprite_0000.png").string();
  const auto mask = (dir / "mask_0000.pbm").string();
  const auto r = run("personalize --checkpoint " + checkpoint().string() +
                     " --prompt \"circle red bg-white tex0\" --steps 4 --reference " + img +
                     " --mask " + mask + " --reference " + img + " --mask " + mask +
                     " --out-dir " + (dir / "out").string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error kind=disjointness"), std::string::npos) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
}

TEST(Cli, EditMissingMaskIsConfigError) {
  const auto dir = kRoot / "edit_missing";
  fs::remove_all(dir);
  ASSERT_EQ(run("dataset --count 1 --out-dir " + dir.string()).code, 0);
  const auto r = run("edit --checkpoint " + checkpoint().string() +
                     " --prompt \"circle red bg-white tex0\" --image " +
                     (dir / "sprite_0000.png").string() + " --keep-mask " +
                     (dir / "nope.pbm").string() + " --out-dir " + dir.string());
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("error kind=config"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("keep-mask"), std::string::npos) << r.err;
}

TEST(Cli, InvalidValuesNameTheField) {
  const auto r = run("personalize --checkpoint " + checkpoint().string() +
                     " --prompt \"circle red bg-white tex0\" --tau 1.5 --reference x.png");
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("tau"), std::string::npos) << r.err;
  const auto p = run("generate --checkpoint " + checkpoint().string() + " --prompt \"circle purple\"");
  EXPECT_NE(p.code, 0);
  EXPECT_NE(p.err.find("prompt"), std::string::npos) << p.err;
}

TEST(Cli, ProbeAndAblateWriteReports) {
  const auto dir = kRoot / "reports";
  fs::remove_all(dir);
  ASSERT_EQ(run("probe --checkpoint " + checkpoint().string() + " --samples 2 --out-dir " + dir.string()).code, 0);
  for (const char* f : {"probe.csv", "probe.txt", "heatmap_original.pgm", "heatmap_zero.pgm",
                        "heatmap_shifted.pgm"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  ASSERT_EQ(run("ablate --checkpoint " + checkpoint().string() +
                " --seeds 1 --steps 4 --out-dir " + dir.string())
                .code,
            0);
  std::istringstream csv(slurp(dir / "ablation.csv"));
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  EXPECT_EQ(rows, 7);
}
