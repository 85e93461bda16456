#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "cgh/cli.hpp"
#include "test_util.hpp"

namespace cgh {
namespace {

namespace fs = std::filesystem;

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("cgh_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& n) const { return (dir_ / n).string(); }

  int run(std::vector<std::string> args) {
    args.insert(args.begin(), "cgh");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    out_.str("");
    ::testing::internal::CaptureStderr();
    const int rc = cli::run(int(argv.size()), argv.data(), out_);
    err_ = ::testing::internal::GetCapturedStderr();
    return rc;
  }

  static std::string slurp(const std::string& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
  }

  void write(const std::string& name, const std::string& text) { std::ofstream(path(name)) << text; }

  std::string target_png(std::size_t n = 64) {
    const std::string p = path("target.png");
    write_png(p, synthetic_scene(n, n, 3));
    return p;
  }

  fs::path dir_;
  std::ostringstream out_;
  std::string err_;
};

TEST_F(Cli, PropagateSidecarAtDefaultOptics) {
  write_png(path("phase.png"), synthetic_scene(64, 64, 1));
  ASSERT_EQ(run({"propagate", "--input", path("phase.png"), "--out", path("o")}), 0) << err_;
  EXPECT_EQ(slurp(path("o/phase_propagate.txt")), "regime=ASM z1=0.2362 z2=1.3884\n");
  EXPECT_TRUE(fs::exists(path("o/phase_amplitude.png")));
  const Image8 ph = read_png(path("o/phase_phase.png"));
  EXPECT_EQ(ph.rows, 1080u);
  EXPECT_EQ(ph.cols, 1920u);
}

TEST_F(Cli, PropagateFarRegime) {
  write_png(path("phase.png"), synthetic_scene(64, 64, 1));
  ASSERT_EQ(run({"propagate", "--input", path("phase.png"), "--out", path("o"), "--distance", "2.0", "--width",
                 "256", "--height", "256"}),
            0)
      << err_;
  EXPECT_EQ(slurp(path("o/phase_propagate.txt")).rfind("regime=IR_FAR", 0), 0u);
}

TEST_F(Cli, MissingInputIsIoError) {
  const std::string missing = path("does_not_exist.png");
  EXPECT_EQ(run({"propagate", "--input", missing, "--out", path("o")}), cli::kIo);
  EXPECT_NE(err_.find(missing), std::string::npos) << err_;
}

TEST_F(Cli, InvalidOpticsIsConfigError) {
  const std::string t = target_png();
  EXPECT_EQ(run({"gs", "--input", t, "--pitch", "2e-7", "--out", path("o")}), cli::kConfig);
  EXPECT_NE(err_.find("pitch"), std::string::npos);
  EXPECT_EQ(run({"gs", "--bogus-flag", "1"}), cli::kConfig);
  EXPECT_EQ(run({}), cli::kConfig);
}

TEST_F(Cli, HelpExitsZero) {
  EXPECT_EQ(run({"--help"}), 0);
  EXPECT_NE(out_.str().find("unfold-train"), std::string::npos);
}

TEST_F(Cli, GdMatchesLibraryAndAppendsCsv) {
  const std::string t = target_png();
  ASSERT_EQ(run({"gd", "--input", t, "--width", "64", "--height", "64", "--stages", "3", "--seed", "4", "--out",
                 path("o")}),
            0)
      << err_;
  OpticalConfig c = test::optics(64, 0.20);
  const PropagationPlan plan = build_plan(c);
  const Image8 target = fit(read_png(t), 64, 64);
  UnfoldConfig u;
  u.denoiser = DenoiserKind::None;
  u.stages = 3;
  ComplexField x = init_field(target_amplitude(target, c.pitch), plan, eval_seed(4, 0));
  for (int k = 0; k < 3; ++k) x = gradient_step(x, target_amplitude(target, c.pitch), plan, 1.0);
  const Image8 expect = quantize_phase(extract_phase(x));
  const Image8 got = read_png(path("o/target_gd3_hologram.png"));
  EXPECT_EQ(got.data, expect.data);
  const std::string csv = slurp(path("o/metrics.csv"));
  EXPECT_EQ(csv.rfind("method,image,psnr,ssim,wall_ms\ngd3,target,", 0), 0u) << csv;
  ASSERT_EQ(run({"gs", "--input", t, "--width", "64", "--height", "64", "--iters", "5", "--out", path("o")}), 0);
  const std::string csv2 = slurp(path("o/metrics.csv"));
  EXPECT_NE(csv2.find("\ngs5,target,"), std::string::npos);
}

TEST_F(Cli, PerfectReconstructionPrintsCap) {
  const Image8 a = synthetic_scene(16, 16, 1);
  EXPECT_NE(cli::detail::format_row("gs50", "x", psnr(a, a), 1.0, 3.0).find(",100.00,"), std::string::npos);
}

TEST_F(Cli, UnfoldInferNeedsWeights) {
  const std::string t = target_png();
  EXPECT_EQ(run({"unfold-infer", "--input", t, "--width", "64", "--height", "64", "--out", path("o")}),
            cli::kConfig);
  EXPECT_NE(err_.find("weights required"), std::string::npos) << err_;
  EXPECT_FALSE(fs::exists(path("o")));
}

TEST_F(Cli, StageMismatchRejectedBeforeCompute) {
  const std::string t = target_png();
  save_weights(path("w.cghw"), std::vector<PcdWeights>{init_weights(4, 1, 0), init_weights(4, 1, 1)});
  EXPECT_EQ(run({"unfold-infer", "--input", t, "--width", "64", "--height", "64", "--stages", "3", "--weights",
                 path("w.cghw"), "--out", path("o")}),
            cli::kConfig);
  EXPECT_NE(err_.find("2 stages"), std::string::npos) << err_;
  EXPECT_FALSE(fs::exists(path("o")));
}

TEST_F(Cli, CorruptWeightsIsIoError) {
  const std::string t = target_png();
  write("w.cghw", "garbage");
  EXPECT_EQ(run({"unfold-infer", "--input", t, "--width", "64", "--height", "64", "--weights", path("w.cghw"),
                 "--out", path("o")}),
            cli::kIo);
  EXPECT_NE(err_.find("bad magic"), std::string::npos);
}

TEST_F(Cli, TrainSmokeIsDeterministicAndReloads) {
  fs::create_directories(path("data"));
  for (std::size_t i = 0; i < 5; ++i)
    write_png(path("data/img" + std::to_string(i) + ".png"), synthetic_scene(64, 64, 50 + i));
  const std::vector<std::string> common{"unfold-train", "--data", path("data"), "--width", "64", "--height", "64",
                                        "--epochs", "2", "--channels", "4", "--stages", "2", "--lr", "1e-3",
                                        "--seed", "3"};
  auto with_out = [&](const std::string& o) {
    auto a = common;
    a.insert(a.end(), {"--out", path(o)});
    return a;
  };
  ASSERT_EQ(run(with_out("a")), 0) << err_;
  ASSERT_EQ(run(with_out("b")), 0) << err_;
  const std::string la = slurp(path("a/train_log.csv")), lb = slurp(path("b/train_log.csv"));
  EXPECT_EQ(la.substr(0, la.find('\n')), "epoch,step,loss,val_psnr,val_ssim,wall_ms");
  // Identical apart from the wall-clock column.
  auto strip = [](const std::string& log) {
    std::string out, line;
    std::istringstream is(log);
    while (std::getline(is, line)) out += line.substr(0, line.rfind(',')) + "\n";
    return out;
  };
  EXPECT_EQ(strip(la), strip(lb));
  EXPECT_EQ(slurp(path("a/weights.cghw")), slurp(path("b/weights.cghw")));

  // Reloaded weights reproduce the logged validation PSNR (one held-out image).
  const auto w = load_weights(path("a/weights.cghw"));
  ASSERT_EQ(w.size(), 2u);
  OpticalConfig c = test::optics(64, 0.20);
  const PropagationPlan plan = build_plan(c);
  UnfoldConfig u;
  u.stages = 2;
  const Image8 held = fit(read_png(path("data/img4.png")), 64, 64);
  const Evaluation e = evaluate(MethodSpec{Method::Unfold, 0, u, &w}, held, plan, eval_seed(3, 0));
  std::istringstream is(la);
  std::string line, last;
  while (std::getline(is, line))
    if (!line.empty()) last = line;
  char buf[32];
  std::snprintf(buf, sizeof buf, ",%.4f,", e.psnr);
  EXPECT_NE(last.find(buf), std::string::npos) << last << " vs " << buf;
}

TEST_F(Cli, TrainRejectsEmptyDataset) {
  fs::create_directories(path("empty"));
  EXPECT_EQ(run({"unfold-train", "--data", path("empty"), "--width", "64", "--height", "64", "--out", path("o")}),
            cli::kConfig);
  EXPECT_EQ(run({"unfold-train", "--data", path("missing"), "--width", "64", "--height", "64"}), cli::kIo);
  EXPECT_EQ(run({"unfold-train", "--synthetic", "3", "--width", "100", "--height", "64"}), cli::kConfig);
}

TEST_F(Cli, EvalMeansGroupsAndSkips) {
  write("m.csv",
        "method,image,psnr,ssim,wall_ms\n"
        "gs50,a,20,0.5,10\n"
        "gs50,b,30,0.7,30\n"
        "gd3,a,15,0.2,1\n"
        "gd3,b,not_a_number,0.2,1\n"
        "broken,row\n");
  ASSERT_EQ(run({"eval", "--csv", path("m.csv")}), 0) << err_;
  const std::string s = out_.str();
  EXPECT_NE(s.find("gs50,2,25.00,0.6000,20.0"), std::string::npos) << s;
  EXPECT_NE(s.find("gd3,1,15.00,0.2000,1.0"), std::string::npos) << s;
  EXPECT_NE(err_.find("skipped 2 malformed"), std::string::npos) << err_;
}

TEST_F(Cli, EvalRejectsEmpty) {
  write("e.csv", "method,image,psnr,ssim,wall_ms\n");
  EXPECT_EQ(run({"eval", "--csv", path("e.csv")}), cli::kConfig);
  EXPECT_EQ(run({"eval"}), cli::kConfig);
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  write_png(path("phase.png"), synthetic_scene(64, 64, 1));
  write("run.ini",
        "# optics\n[optics]\nwavelength = 520e-9\ndistance = 2.0\nwidth = 256\nheight = 256\n"
        "[paths]\nout = " + path("cfg_out") + "\n");
  ASSERT_EQ(run({"--config", path("run.ini"), "propagate", "--input", path("phase.png")}), 0) << err_;
  EXPECT_EQ(slurp(path("cfg_out/phase_propagate.txt")).rfind("regime=IR_FAR", 0), 0u);
  ASSERT_EQ(run({"--config", path("run.ini"), "propagate", "--input", path("phase.png"), "--distance", "0.001"}), 0);
  EXPECT_EQ(slurp(path("cfg_out/phase_propagate.txt")).rfind("regime=ASM", 0), 0u);
}

TEST_F(Cli, ConfigFileUnknownKey) {
  write("bad.ini", "[optics]\nwavelenght = 1\n");
  EXPECT_EQ(run({"--config", path("bad.ini"), "synth-data", "--out", path("s")}), cli::kConfig);
  EXPECT_NE(err_.find("wavelenght"), std::string::npos);
  EXPECT_EQ(run({"--config", path("none.ini"), "synth-data", "--out", path("s")}), cli::kIo);
}

TEST_F(Cli, SynthData) {
  ASSERT_EQ(run({"synth-data", "--count", "3", "--width", "32", "--height", "32", "--out", path("s")}), 0);
  EXPECT_TRUE(fs::exists(path("s/scene002.png")));
  EXPECT_EQ(read_png(path("s/scene000.png")).data, synthetic_scene(32, 32, derive_seed(0, 0)).data);
}

}  // namespace
}  // namespace cgh
