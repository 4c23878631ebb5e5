#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace moeq;

TEST(Perplexity, UniformLogitsGiveVocabularySize) {
  ModelSpec s = oracle::toy_spec(1);
  Model m = build_model(s);
  m.head = Matrix(s.vocab_size, s.hidden_dim);
  const auto text = generate_calibration(3, 4, 20, s.vocab_size);
  EXPECT_NEAR(perplexity(m, text), static_cast<double>(s.vocab_size), 1e-9);
}

TEST(Perplexity, MatchesDirectLogSoftmax) {
  const ModelSpec s = oracle::toy_spec(2);
  const Model m = build_model(s);
  const auto text = generate_calibration(4, 2, 12, s.vocab_size);
  double nll = 0.0;
  std::size_t n = 0;
  for (const auto& seq : text.sequences) {
    const Matrix logits = forward(m, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      double z = 0.0;
      for (std::size_t v = 0; v < s.vocab_size; ++v) z += std::exp(logits(t, v));
      nll -= std::log(std::exp(logits(t, seq[t + 1])) / z);
      ++n;
    }
  }
  EXPECT_NEAR(perplexity(m, text), std::exp(nll / static_cast<double>(n)), 1e-9);
}

TEST(Perplexity, RejectsEmptyOrOutOfRange) {
  const Model m = build_model(oracle::toy_spec(1));
  CalibrationSet single;
  single.sequences = {{3}};
  EXPECT_THROW(perplexity(m, single), EmptyCalibration);
  single.sequences = {{3, 99}};
  EXPECT_THROW(perplexity(m, single), TokenOutOfRange);
}

TEST(MeanStd, SampleStandardDeviation) {
  const auto [m, sd] = mean_and_stddev({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(sd, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(mean_and_stddev({7.0}).second, 0.0);
}

class CompareTest : public ::testing::Test {
 protected:
  ModelSpec spec = oracle::toy_spec(5);
  Model model = build_model(spec);
  CalibrationSet calib = generate_calibration(1, 4, 32, spec.vocab_size);
  CalibrationSet eval_set = sample_from_model(model, 1001, 4, 32);
  CompareOptions opts = [] {
    CompareOptions o;
    o.quant.group_size = 16;
    return o;
  }();
};

TEST_F(CompareTest, RowsSortedWithIndependentBits) {
  const std::vector<std::string> strategies{"uniform:8", "fp", "attn", "random-experts:2", "freq:2"};
  const EvalReport r = compare(model, strategies, calib, eval_set, opts);
  ASSERT_EQ(r.rows.size(), 5u);
  for (std::size_t i = 1; i < r.rows.size(); ++i) EXPECT_LE(r.rows[i - 1].avg_bits, r.rows[i].avg_bits);
  EXPECT_EQ(r.rows.back().strategy, "fp");
  EXPECT_EQ(r.rows.back().avg_bits, kFullPrecisionBits);
  StrategyContext ctx(model, calib);
  for (const auto& row : r.rows) {
    if (row.strategy == "fp") continue;
    EXPECT_NEAR(row.avg_bits, average_bits(build_plan(row.strategy, ctx, 42), spec), 1e-12) << row.strategy;
  }
  const EvalRow* rnd = r.find("random-experts:2");
  ASSERT_NE(rnd, nullptr);
  ASSERT_EQ(rnd->per_seed.size(), 3u);
  EXPECT_EQ(rnd->per_seed[0].first, 42u);
  EXPECT_GT(rnd->stddev, 0.0);
  EXPECT_EQ(r.find("freq:2")->per_seed.size(), 0u);
  EXPECT_EQ(r.spec_hash, spec_hash(spec));
  EXPECT_EQ(r.eval_seed, 1001u);
}

TEST_F(CompareTest, DeterministicAndCsvRoundTrip) {
  const std::vector<std::string> strategies{"fp", "random-layers:6", "uniform:2"};
  const EvalReport a = compare(model, strategies, calib, eval_set, opts);
  const EvalReport b = compare(model, strategies, calib, eval_set, opts);
  EXPECT_EQ(render_report(a, ReportFormat::markdown), render_report(b, ReportFormat::markdown));
  const std::string csv = render_report(a, ReportFormat::csv);
  EXPECT_EQ(parse_report_csv(csv), a);
  EXPECT_EQ(render_report(parse_report_csv(csv), ReportFormat::csv), csv);
}

TEST_F(CompareTest, MoreBitsLowerPerplexity) {
  const EvalReport r = compare(model, {"fp", "uniform:8", "uniform:2"}, calib, eval_set, opts);
  const double fp = r.find("fp")->perplexity;
  EXPECT_LE(std::abs(r.find("uniform:8")->perplexity - fp) / fp, 0.02);
  EXPECT_GE(r.find("uniform:2")->perplexity, r.find("uniform:8")->perplexity);
}

TEST_F(CompareTest, RoutersUntouchedAcrossVariants) {
  const auto caps = capture_layer_inputs(model, calib);
  StrategyContext ctx(model, calib);
  for (const char* s : {"uniform:2", "attn+freq:2", "uniform:8"}) {
    const Model dq = apply_plan(model, build_plan(s, ctx), caps, opts.quant).dequantize();
    for (std::size_t l : spec.moe_layers()) EXPECT_EQ(dq.layers[l].router, model.layers[l].router) << s;
  }
}

TEST(Report, MarkdownLayout) {
  EvalReport r;
  r.spec_hash = 1;
  r.calib_seed = 2;
  r.eval_seed = 3;
  r.rows.push_back({"attn", 2.5, 10.0, 0.0, {}});
  r.rows.push_back({"random-experts:2", 2.5, 11.0, 0.5, {{42, 10.5}, {43, 11.5}}});
  const std::string md = render_report(r, ReportFormat::markdown);
  EXPECT_EQ(md,
            "<!-- spec_hash=1 calib_seed=2 eval_seed=3 -->\n"
            "| Strategy | Avg bits | Perplexity | Std | Seeds |\n"
            "|---|---|---|---|---|\n"
            "| attn | 2.5000 | 10.0000 | 0.0000 | - |\n"
            "| random-experts:2 | 2.5000 | 11.0000 ± 0.5000 | 0.5000 | 42,43 |\n");
  const std::string csv = render_report(r, ReportFormat::csv);
  EXPECT_NE(csv.find("\"random-experts:2\",2.5,11,0.5,42:10.5;43:11.5\n"), std::string::npos);
  EXPECT_THROW(parse_report_csv("# x\nheader\n\"a\",1,2\n"), FormatError);
}
