#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "oracles.hpp"

using namespace moeq;
namespace fs = std::filesystem;

namespace {

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("moeq_cli_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    write_file(path("spec.txt"),
               "vocab_size = 32\nhidden_dim = 16\nffnn_dim = 16\nnum_layers = 2\nnum_experts = 8\ntop_k = 2\n"
               "num_shared_experts = 1\nseed = 3\n");
    ASSERT_EQ(run("build --spec " + path("spec.txt") + " --out " + path("model.moeq")), 0);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static std::string path(const std::string& name) { return (dir_ / name).string(); }

  static int run(const std::string& args) {
    const std::string cmd = std::string(MOEQ_CLI) + " " + args + " >" + path("stdout.txt") + " 2>" + path("stderr.txt");
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  static std::string model() { return " --model " + path("model.moeq"); }
  static const std::string kCalib;

  static fs::path dir_;
};

fs::path Cli::dir_;
const std::string Cli::kCalib = " --calib-seed 5 --calib-seqs 4 --calib-len 32";

}  // namespace

TEST_F(Cli, BuildWritesTheSpecifiedModel) {
  const Model m = deserialize_model(read_file(path("model.moeq")));
  EXPECT_EQ(m.spec.hidden_dim, 16u);
  EXPECT_EQ(m.spec.num_shared_experts, 1u);
  EXPECT_EQ(serialize_model(m), serialize_model(build_model(m.spec)));
}

TEST_F(Cli, ProfileMatchesLibrary) {
  ASSERT_EQ(run("profile" + model() + kCalib + " --out " + path("usage.txt")), 0);
  const Model m = deserialize_model(read_file(path("model.moeq")));
  const UsageProfile expect = profile_usage(m, generate_calibration(5, 4, 32, 32));
  EXPECT_EQ(read_file(path("usage.txt")), usage_to_text(expect));
  ASSERT_EQ(run("profile" + model() + kCalib + " --histogram --out " + path("usage2.txt")), 0);
  EXPECT_NE(read_file(path("stdout.txt")).find("expert  0"), std::string::npos);
}

TEST_F(Cli, ScoreBothMethods) {
  ASSERT_EQ(run("score" + model() + " --method outlier --out " + path("outlier.txt")), 0);
  OutlierScoreTable o;
  std::map<std::size_t, double> b;
  scores_from_text(read_file(path("outlier.txt")), o, b);
  EXPECT_EQ(o, score_ffnn_layers(deserialize_model(read_file(path("model.moeq")))));
  ASSERT_EQ(run("score" + model() + kCalib + " --method predictor --epochs 3 --hidden 8 --out " + path("blocks.txt") +
                " --predictor-out " + path("pred.bspq")),
            0);
  o.clear();
  scores_from_text(read_file(path("blocks.txt")), o, b);
  EXPECT_EQ(b.size(), 2u);
  const auto bsp = deserialize_predictor(read_file(path("pred.bspq")));
  EXPECT_EQ(bsp.blocks.at(0).hidden(), 8u);
}

TEST_F(Cli, PlanQuantizeEvalPipelineIsReproducible) {
  ASSERT_EQ(run("plan" + model() + kCalib + " --strategy attn,shared,freq:2 --hi 4 --lo 2 --out " + path("plan.txt")), 0);
  const BitPlan plan = plan_from_text(read_file(path("plan.txt")));
  EXPECT_EQ(plan.provenance, (std::vector<std::string>{"attn", "shared", "freq:2"}));
  const std::string q = " --plan " + path("plan.txt") + kCalib + " --backend gptq --damp 0.01 --group 8";
  ASSERT_EQ(run("quantize" + model() + q + " --out " + path("a.moeqz")), 0);
  ASSERT_EQ(run("quantize" + model() + q + " --out " + path("b.moeqz")), 0);
  EXPECT_EQ(read_file(path("a.moeqz")), read_file(path("b.moeqz")));
  const QuantizedModel qm = deserialize_quantized(read_file(path("a.moeqz")));
  EXPECT_EQ(qm.quantized.at({0, WeightKind::attention, {}, "q"}).bits, 4);
  EXPECT_EQ(qm.quantized.at({0, WeightKind::attention, {}, "q"}).backend, Backend::gptq);

  ASSERT_EQ(run("quantize" + model() + " --plan " + path("plan.txt") + " --backend rtn --out " + path("r.moeqz")), 0);
  EXPECT_EQ(deserialize_quantized(read_file(path("r.moeqz"))).quantized.begin()->second.backend, Backend::rtn);

  ASSERT_EQ(run("eval" + model() + " --eval-seed 9 --eval-seqs 2 --eval-len 16 --out " + path("fp.csv")), 0);
  ASSERT_EQ(run("eval --model " + path("a.moeqz") + " --reference " + path("model.moeq") +
                " --eval-seed 9 --eval-seqs 2 --eval-len 16 --out " + path("q.csv")),
            0);
  const EvalReport fp = parse_report_csv(read_file(path("fp.csv")));
  const EvalReport qr = parse_report_csv(read_file(path("q.csv")));
  ASSERT_EQ(fp.rows.size(), 1u);
  EXPECT_EQ(fp.rows[0].avg_bits, kFullPrecisionBits);
  EXPECT_GT(qr.rows[0].perplexity, 1.0);
  EXPECT_EQ(qr.eval_seed, 9u);
}

TEST_F(Cli, CompareWritesMarkdownAndCsv) {
  const std::string base = "compare" + model() + kCalib + " --eval-seqs 2 --eval-len 16 --group 8 --seeds 42,43";
  ASSERT_EQ(run(base + " --strategies 'fp;freq:2;random-experts:2' --out " + path("r.md")), 0);
  const std::string md = read_file(path("r.md"));
  EXPECT_EQ(md.rfind("<!-- spec_hash=", 0), 0u);
  EXPECT_NE(md.find("| random-experts:2 |"), std::string::npos);
  ASSERT_EQ(run(base + " --strategies fp --strategies attn --out " + path("r.csv")), 0);
  const EvalReport r = parse_report_csv(read_file(path("r.csv")));
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].strategy, "attn");
  EXPECT_EQ(r.calib_seed, 5u);
}

TEST_F(Cli, InvalidArgumentsExitTwo) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("plan" + model()), 2);
  EXPECT_EQ(run("plan" + model() + " --strategy bogus:3"), 2);
  EXPECT_EQ(run("quantize" + model() + " --plan " + path("nope.txt") + " --out " + path("x.moeqz")), 2);
  EXPECT_EQ(run("quantize" + model() + " --plan " + path("spec.txt") + " --backend awq --out " + path("x.moeqz")), 2);
  write_file(path("badplan.txt"), "L0.attn.q 5\n");
  EXPECT_EQ(run("quantize" + model() + " --plan " + path("badplan.txt") + " --out " + path("x.moeqz")), 2);
  write_file(path("routerplan.txt"), "L0.router.w 4\n");
  EXPECT_EQ(run("quantize" + model() + " --plan " + path("routerplan.txt") + " --out " + path("x.moeqz")), 2);
  EXPECT_EQ(run("compare" + model() + " --strategies attn --seeds 4x"), 2);
  EXPECT_EQ(run("eval --model " + path("spec.txt")), 2);
  write_file(path("badspec.txt"), "top_k = 99\n");
  EXPECT_EQ(run("build --spec " + path("badspec.txt") + " --out " + path("x.moeq")), 2);
  EXPECT_EQ(run("--help"), 0);
}

TEST_F(Cli, NumericalFailureExitsThreeWithWeightId) {
  Model m = deserialize_model(read_file(path("model.moeq")));
  m.weight({1, WeightKind::expert, 4, "down"})(2, 3) = NAN;
  write_file(path("nan.moeq"), serialize_model(m));
  write_file(path("uniform.txt"), "default_bits 4\n");
  EXPECT_EQ(run("quantize --model " + path("nan.moeq") + " --plan " + path("uniform.txt") + kCalib +
                " --backend rtn --out " + path("x.moeqz")),
            3);
  EXPECT_NE(read_file(path("stderr.txt")).find("L1.expert4.down"), std::string::npos);
}
