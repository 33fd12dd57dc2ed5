#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "runet/checkpoint.hpp"
#include "runet/tensor.hpp"
#include "runet/volume.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;
};

std::string cli_path() {
  const char* p = std::getenv("RUNET_CLI");
  REQUIRE(p != nullptr);
  return p;
}

RunResult run_cli(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 512> buf;
  while (fgets(buf.data(), buf.size(), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WEXITSTATUS(status), out};
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

fs::path test_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "runet_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

/// Tiny configuration shared by the CLI smoke tests.
fs::path smoke_config() {
  static fs::path cfg = [] {
    const fs::path p = test_root() / "smoke.cfg";
    std::ofstream os(p);
    os << "# smoke-scale settings\n"
       << "gen.size_x = 16\n"
       << "gen.size_y = 16\n"
       << "gen.size_z = 8\n"
       << "gen.count = 6\n"
       << "gen.radius_lo = 0.8\n"
       << "gen.radius_hi = 1.1\n"
       << "gen.label_lo = 0.002\n"
       << "gen.label_hi = 0.04\n"
       << "gen.ambiguity = 0\n"
       << "net.depth = 2\n"
       << "net.base_filters = 2\n"
       << "train.epochs = 2\n"
       << "train.batch_axial = 4\n"
       << "train.batch_other = 8\n"
       << "train.lr = 1e-3\n"
       << "train.val_check = epoch\n"
       << "canonical_z_other = 8\n";
    return p;
  }();
  return cfg;
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("cli: usage errors exit with code 1") {
  CHECK(run_cli("train --out /tmp/x").exit_code == 1);  // missing --dataset
  const auto bad = run_cli("generate --out " + (test_root() / "g0").string() +
                           " --fidelity bogus");
  CHECK(bad.exit_code == 1);
  CHECK(bad.output.find("fidelity") != std::string::npos);
}

TEST_CASE("cli generate: deterministic dataset with proportional splits") {
  const fs::path d1 = test_root() / "data1";
  const fs::path d2 = test_root() / "data2";
  const std::string base_args = " --config " + smoke_config().string() +
                                " --seed 7 -n 20 --out ";
  REQUIRE(run_cli("generate" + base_args + d1.string()).exit_code == 0);
  REQUIRE(run_cli("generate" + base_args + d2.string()).exit_code == 0);

  // identical manifests and volume bytes across the two runs
  CHECK(read_file(d1 / "manifest.csv") == read_file(d2 / "manifest.csv"));
  const auto manifest = runet::load_manifest((d1 / "manifest.csv").string());
  REQUIRE(manifest.size() == 20);  // manifest row count == n
  std::size_t tr = 0, va = 0, te = 0;
  for (const auto& e : manifest) {
    tr += e.split == runet::SplitTag::train;
    va += e.split == runet::SplitTag::val;
    te += e.split == runet::SplitTag::test;
    CHECK(read_file(d1 / e.path) == read_file(d2 / e.path));
  }
  CHECK(tr == 17);
  CHECK(va == 1);
  CHECK(te == 2);
  CHECK(fs::exists(d1 / "resolved.cfg"));
}

TEST_CASE("cli train/predict/eval smoke pipeline") {
  const fs::path data = test_root() / "data";
  const std::string gen_args = "generate --config " + smoke_config().string() +
                               " --seed 11 -n 6 --out " + data.string();
  REQUIRE(run_cli(gen_args).exit_code == 0);
  const std::string manifest = (data / "manifest.csv").string();

  // --- train twice with the same seed: identical checkpoints
  const fs::path run1 = test_root() / "run1";
  const fs::path run2 = test_root() / "run2";
  const std::string train_args = "train --config " + smoke_config().string() +
                                 " --seed 3 --dataset " + manifest +
                                 " --orientation axial --arch runet --out ";
  const auto t1 = run_cli(train_args + run1.string());
  INFO(t1.output);
  REQUIRE(t1.exit_code == 0);
  REQUIRE(run_cli(train_args + run2.string()).exit_code == 0);
  CHECK(read_file(run1 / "best.ckpt") == read_file(run2 / "best.ckpt"));
  CHECK(read_file(run1 / "last.ckpt") == read_file(run2 / "last.ckpt"));
  CHECK(fs::exists(run1 / "curves.svg"));
  CHECK(fs::exists(run1 / "resolved.cfg"));

  // curves rows == recorded steps: 2 epochs x 4 train volumes x 2 batches,
  // plus doubled muscle batches; header adds one line
  const std::string curves = read_file(run1 / "curves.csv");
  const auto ckpt = runet::load_checkpoint((run1 / "last.ckpt").string());
  CHECK(count_lines(curves) == 1 + ckpt.opt.t);

  // --- predict: deterministic bytes, values in (0,1)
  const fs::path pred1 = test_root() / "pred1";
  const fs::path pred2 = test_root() / "pred2";
  const std::string pred_args = "predict --config " + smoke_config().string() +
                                " --checkpoint " +
                                (run1 / "best.ckpt").string() + " --dataset " +
                                manifest + " --split test" +
                                " --orientation axial --out ";
  REQUIRE(run_cli(pred_args + pred1.string()).exit_code == 0);
  REQUIRE(run_cli(pred_args + pred2.string()).exit_code == 0);
  std::size_t n_pred = 0;
  for (const auto& e : runet::load_manifest(manifest)) {
    if (e.split != runet::SplitTag::test) continue;
    ++n_pred;
    CHECK(read_file(pred1 / (e.id + ".prob")) ==
          read_file(pred2 / (e.id + ".prob")));
    std::ifstream is(pred1 / (e.id + ".prob"), std::ios::binary);
    const runet::Tensor prob = runet::read_tensor(is);
    for (std::size_t i = 0; i < prob.numel(); ++i) {
      CHECK(prob[i] > 0.0f);
      CHECK(prob[i] < 1.0f);
    }
  }
  CHECK(n_pred == 1);

  // --- eval with a single orientation: raw + postprocessed rows
  const fs::path ev = test_root() / "eval1";
  const std::string eval_args = "eval --config " + smoke_config().string() +
                                " --dataset " + manifest + " --pred-axial " +
                                pred1.string() + " --out " + ev.string();
  REQUIRE(run_cli(eval_args).exit_code == 0);
  const std::string metrics = read_file(ev / "metrics.csv");
  CHECK(metrics.find("raw") != std::string::npos);
  CHECK(metrics.find("postprocessed") != std::string::npos);
  CHECK(fs::exists(ev / "summary.csv"));
  CHECK(fs::exists(ev / "boxplot_dsi.svg"));
  CHECK(fs::exists(ev / "boxplot_mad_voxels.svg"));
  CHECK(fs::exists(ev / "boxplot_hdd_voxels.svg"));

  // --- predict with an incompatible checkpoint input size
  const fs::path big = test_root() / "big.rvol";
  {
    runet::GeneratorConfig g;
    g.size_x = 32;
    g.size_y = 32;
    g.size_z = 16;
    g.radius_lo = 1.3;
    g.radius_hi = 1.8;
    runet::VolumeSample v = runet::generate_volume(g, 1);
    runet::save_volume(v, big.string());
  }
  const auto mismatch = run_cli(
      "predict --config " + smoke_config().string() + " --checkpoint " +
      (run1 / "best.ckpt").string() + " --volume " + big.string() +
      " --orientation axial --out " + (test_root() / "bad.prob").string());
  CHECK(mismatch.exit_code == 1);
  CHECK(mismatch.output.find("16x16") != std::string::npos);

  // --- eval with a missing orientation reports and continues
  const fs::path ev2 = test_root() / "eval2";
  const auto partial = run_cli(
      "eval --config " + smoke_config().string() + " --dataset " + manifest +
      " --pred-axial " + pred1.string() + " --pred-coronal " +
      (test_root() / "nowhere").string() + " --out " + ev2.string());
  CHECK(partial.exit_code == 0);
  CHECK(partial.output.find("missing") != std::string::npos);
}

TEST_CASE("cli config precedence: flags override file") {
  const fs::path out = test_root() / "prec";
  REQUIRE(run_cli("generate --config " + smoke_config().string() +
                  " --seed 5 -n 4 --out " + out.string())
              .exit_code == 0);
  const std::string resolved = read_file(out / "resolved.cfg");
  CHECK(resolved.find("gen.count = 4") != std::string::npos);  // flag wins
  CHECK(resolved.find("seed = 5") != std::string::npos);
  CHECK(resolved.find("gen.size_x = 16") != std::string::npos);  // from file
}

TEST_CASE("cli verify: oracle suite passes") {
  const auto r = run_cli("verify");
  INFO(r.output);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("[PASS] conv2d_matches_sliding_window") !=
        std::string::npos);
  CHECK(r.output.find("clstm_reduces_to_lstm") != std::string::npos);
  CHECK(r.output.find("negative_control") != std::string::npos);
  CHECK(r.output.find("[FAIL]") == std::string::npos);
}
