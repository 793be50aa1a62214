#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <json.hpp>

#include "pvseg/cli.hpp"
#include "pvseg/imaging.hpp"
#include "pvseg/manifest.hpp"
#include "pvseg/synth.hpp"
#include "scratch.hpp"

using namespace pvseg;
using pvseg::testing::read_bytes;
using pvseg::testing::ScratchDir;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "pvseg");
  return run_cli(args);
}

// Small two-level image with a bright square.
std::string write_input(const ScratchDir& dir) {
  ImageGray img;
  img.pixels = RowMatrix<double>::Constant(18, 22, 0.25);
  img.pixels.block(5, 6, 7, 8).setConstant(0.8);
  const auto path = dir / "in.pgm";
  save_pgm(img, path);
  return path.string();
}

const std::vector<std::string> kQuick = {"--iters", "8", "--channels", "8"};

std::vector<std::string> with_quick(std::vector<std::string> args) {
  args.insert(args.end(), kQuick.begin(), kQuick.end());
  return args;
}

}  // namespace

TEST_CASE("cli usage errors") {
  ScratchDir dir("cli_usage");
  const auto out = (dir / "o").string();
  CHECK(cli({}) == kExitUsage);
  CHECK(cli({"segment", "--out", out}) == kExitUsage);
  CHECK(cli({"segment", "--input", write_input(dir), "--out", out, "--lr", "fast"}) == kExitUsage);
  CHECK(cli({"segment", "--input", write_input(dir), "--out", out, "--loss-reduction", "median"}) == kExitUsage);
  CHECK(cli({"segment", "--input", write_input(dir), "--out", out, "--q-min", "30"}) == kExitUsage);
  CHECK(cli({"sweep", "--input", write_input(dir), "--out", out, "--alphas", "1,,5"}) == kExitUsage);
  CHECK(cli({"sweep", "--input", write_input(dir), "--out", out, "--alphas", "1,x"}) == kExitUsage);
  CHECK(cli({"sweep", "--input", write_input(dir), "--out", out, "--alphas", "1,1"}) == kExitUsage);
  CHECK(cli({"synth", "--out", out}) == kExitUsage);
  CHECK(cli({"synth", "--out", out, "--preset", "nothing"}) == kExitUsage);
  CHECK(cli({"bogus"}) == kExitUsage);
  CHECK(cli({"--help"}) == kExitOk);
  CHECK(cli({"segment", "--help"}) == kExitOk);
  CHECK_FALSE(std::filesystem::exists(out + "/labels.pgm"));
}

TEST_CASE("cli I/O errors") {
  ScratchDir dir("cli_io");
  CHECK(cli({"segment", "--input", (dir / "missing.pgm").string(), "--out", (dir / "o").string()}) == kExitIo);
  testing::write_bytes(dir / "junk.pgm", "P5\n4 4\n255\nxx");
  CHECK(cli({"segment", "--input", (dir / "junk.pgm").string(), "--out", (dir / "o").string()}) == kExitIo);
  testing::write_bytes(dir / "bad_spec.txt", "width = wide\n");
  CHECK(cli({"synth", "--spec", (dir / "bad_spec.txt").string(), "--out", (dir / "o").string()}) == kExitUsage);
  CHECK(cli({"synth", "--spec", (dir / "none.txt").string(), "--out", (dir / "o").string()}) == kExitIo);
}

TEST_CASE("cli segment") {
  ScratchDir dir("cli_segment");
  const auto input = write_input(dir);
  const auto a = dir / "a", b = dir / "b";
  REQUIRE(cli(with_quick({"segment", "--input", input, "--out", a.string(), "--seed", "5"})) == kExitOk);
  REQUIRE(cli(with_quick({"segment", "--input", input, "--out", b.string(), "--seed", "5"})) == kExitOk);
  for (const char* f : {"labels.pgm", "segmented_rgb.png", "segmented_gray.png", "loss.csv", "manifest.json"}) {
    CAPTURE(f);
    REQUIRE(std::filesystem::exists(a / f));
  }
  for (const char* f : {"labels.pgm", "segmented_rgb.png", "segmented_gray.png", "loss.csv"}) {
    CAPTURE(f);
    CHECK(read_bytes(a / f) == read_bytes(b / f));
  }
  const auto csv = read_bytes(a / "loss.csv");
  CHECK(csv.rfind("iteration,l_fs,l_sc,total\n1,", 0) == 0);

  const RunManifest m = load_manifest(a / "manifest.json");
  CHECK(m.config.seed == 5);
  CHECK(m.config.max_iterations == 8);
  CHECK(m.config.feature_channels == 8);
  CHECK(m.inputs == std::vector<std::string>{input});
  CHECK_FALSE(m.partial);
  CHECK(m.loss_first.has_value());
  const auto labels = load_label_pgm(a / "labels.pgm");
  CHECK(labels.rows() == 18);
  CHECK(labels.cols() == 22);
  CHECK(m.unique_clusters_final == count_unique(labels));

  SUBCASE("inverted gray output differs") {
    REQUIRE(cli(with_quick({"segment", "--input", input, "--out", (dir / "i").string(), "--seed", "5",
                            "--invert-gray"})) == kExitOk);
    CHECK(read_bytes(dir / "i" / "segmented_gray.png") != read_bytes(a / "segmented_gray.png"));
    CHECK(read_bytes(dir / "i" / "labels.pgm") == read_bytes(a / "labels.pgm"));
  }
}

TEST_CASE("cli numeric failure still writes a manifest") {
  ScratchDir dir("cli_numeric");
  const auto out = dir / "o";
  CHECK(cli({"segment", "--input", write_input(dir), "--out", out.string(), "--lr", "1e300", "--q-min", "1",
             "--iters", "20", "--channels", "8"}) == kExitNumeric);
  const RunManifest m = load_manifest(out / "manifest.json");
  CHECK(m.partial);
  CHECK(m.stop_reason == "numeric_failure");
  CHECK_FALSE(m.message.empty());
  CHECK(std::filesystem::exists(out / "loss.csv"));
}

TEST_CASE("cli sweep") {
  ScratchDir dir("cli_sweep");
  const auto input = write_input(dir);
  const auto out = dir / "s";
  REQUIRE(cli(with_quick({"sweep", "--input", input, "--out", out.string(), "--alphas", "1,5,10", "--jobs", "2"})) ==
          kExitOk);
  for (const char* sub : {"alpha_1", "alpha_5", "alpha_10"}) {
    CAPTURE(sub);
    CHECK(std::filesystem::exists(out / sub / "labels.pgm"));
    CHECK(std::filesystem::exists(out / sub / "manifest.json"));
  }
  const auto csv = read_bytes(out / "sweep.csv");
  CHECK(csv.rfind("alpha,iteration,total\n1,1,", 0) == 0);
  CHECK(csv.find("\n5,1,") < csv.find("\n10,1,"));
  const auto summary = nlohmann::json::parse(read_bytes(out / "sweep.json"));
  REQUIRE(summary.size() == 3);
  CHECK(summary[2]["alpha"] == 10.0);

  // The alpha = 5 entry equals a standalone segment run.
  REQUIRE(cli(with_quick({"segment", "--input", input, "--out", (dir / "solo").string(), "--alpha", "5"})) == kExitOk);
  CHECK(read_bytes(out / "alpha_5" / "labels.pgm") == read_bytes(dir / "solo" / "labels.pgm"));
  CHECK(read_bytes(out / "alpha_5" / "loss.csv") == read_bytes(dir / "solo" / "loss.csv"));

  REQUIRE(cli(with_quick({"sweep", "--input", input, "--out", (dir / "one").string(), "--alphas", "2.5"})) == kExitOk);
  CHECK(std::filesystem::exists(dir / "one" / "alpha_2.5" / "loss.csv"));
}

TEST_CASE("cli synth") {
  ScratchDir dir("cli_synth");
  const auto a = dir / "a", b = dir / "b";
  const std::vector<std::string> small = {"--preset", "hotspots3", "--width", "96", "--height", "64", "--seed", "1"};
  auto synth = [&](const std::filesystem::path& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"synth", "--out", out.string()};
    args.insert(args.end(), small.begin(), small.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return cli(args);
  };
  REQUIRE(synth(a, {}) == kExitOk);
  REQUIRE(synth(b, {}) == kExitOk);
  for (const char* f : {"scene.txt", "scene.pgm", "scene.png", "truth.pgm", "truth_rgb.png"}) {
    CAPTURE(f);
    CHECK(read_bytes(a / f) == read_bytes(b / f));
  }
  CHECK_FALSE(std::filesystem::exists(a / "metrics.json"));

  // The written spec reproduces the scene.
  REQUIRE(cli({"synth", "--spec", (a / "scene.txt").string(), "--out", (dir / "c").string()}) == kExitOk);
  CHECK(read_bytes(dir / "c" / "scene.pgm") == read_bytes(a / "scene.pgm"));

  REQUIRE(synth(dir / "e", {"--evaluate", "--iters", "6", "--channels", "8"}) == kExitOk);
  auto metrics = nlohmann::json::parse(read_bytes(dir / "e" / "metrics.json"));
  CHECK(metrics["tau"] == 0.3);
  bool has_hotspot = false;
  for (const auto& c : metrics["classes"]) has_hotspot |= c["class"] == "hotspot";
  CHECK(has_hotspot);
  CHECK(std::filesystem::exists(dir / "e" / "labels.pgm"));

  REQUIRE(synth(dir / "t", {"--evaluate", "--iters", "6", "--channels", "8", "--tau", "1.0"}) == kExitOk);
  metrics = nlohmann::json::parse(read_bytes(dir / "t" / "metrics.json"));
  for (const auto& c : metrics["classes"]) {
    if (c["class"] == "hotspot") CHECK(c["detected"] == false);
  }
  CHECK(synth(dir / "x", {"--tau", "0"}) == kExitUsage);
}

TEST_CASE("cli binary") {
  const std::string cmd = std::string("\"") + PVSEG_CLI_PATH + "\" --version > /dev/null";
  const int status = std::system(cmd.c_str());
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  const int bad = std::system((std::string("\"") + PVSEG_CLI_PATH + "\" segment 2> /dev/null").c_str());
  REQUIRE(WIFEXITED(bad));
  CHECK(WEXITSTATUS(bad) == kExitUsage);
}
