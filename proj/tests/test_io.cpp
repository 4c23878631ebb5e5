#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace moeq;

namespace {

ModelSpec rich_spec() {
  ModelSpec s = oracle::toy_spec(12);
  s.num_layers = 3;
  s.num_shared_experts = 1;
  s.first_layer_dense = true;
  return s;
}

}  // namespace

TEST(SpecText, RoundTripAndErrors) {
  const ModelSpec s = rich_spec();
  EXPECT_EQ(spec_from_text(spec_to_text(s)), s);
  const ModelSpec parsed = spec_from_text("# toy\n[model]\nhidden_dim = 8\nnum_experts=4  # inline\ntop_k = 1\n");
  EXPECT_EQ(parsed.hidden_dim, 8u);
  EXPECT_EQ(parsed.num_experts, 4u);
  EXPECT_EQ(parsed.top_k, 1u);
  EXPECT_EQ(parsed.vocab_size, ModelSpec{}.vocab_size);
  EXPECT_THROW(spec_from_text("bogus = 3\n"), std::exception);
  EXPECT_THROW(spec_from_text("hidden_dim = x\n"), std::exception);
  EXPECT_NE(spec_hash(s), spec_hash(ModelSpec{}));
}

TEST(ModelContainer, ByteExactRoundTrip) {
  const Model m = build_model(rich_spec());
  const std::string bytes = serialize_model(m);
  EXPECT_EQ(bytes.substr(0, 5), "MOEQ1");
  const Model back = deserialize_model(bytes);
  EXPECT_EQ(serialize_model(back), bytes);
  for (const auto& id : all_weight_ids(m.spec)) EXPECT_EQ(back.weight(id), m.weight(id));
}

TEST(ModelContainer, RejectsCorruption) {
  const std::string bytes = serialize_model(build_model(oracle::toy_spec(1)));
  EXPECT_THROW(deserialize_model("MOEQX" + bytes.substr(5)), FormatError);
  EXPECT_THROW(deserialize_model(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_model(bytes + "x"), FormatError);
}

TEST(CodePacking, RoundTripAllWidths) {
  Rng rng(1);
  for (int bits : {2, 3, 4, 8}) {
    std::vector<std::uint8_t> codes(37);
    for (auto& c : codes) c = static_cast<std::uint8_t>(rng.below(1u << bits));
    const auto packed = pack_codes(codes, bits);
    EXPECT_EQ(packed.size(), (37u * bits + 7) / 8);
    EXPECT_EQ(unpack_codes(packed, codes.size(), bits), codes);
  }
  // LSB-first: codes (1, 2, 3, 0) at 2 bits → 0b00111001.
  EXPECT_EQ(pack_codes({1, 2, 3, 0}, 2), (std::vector<std::uint8_t>{0x39}));
}

TEST(QuantizedContainer, ByteExactRoundTrip) {
  const Model m = build_model(rich_spec());
  const auto caps = capture_layer_inputs(m, generate_calibration(1, 2, 24, m.spec.vocab_size));
  QuantOptions opt;
  opt.group_size = 8;
  BitPlan plan = compose({plan_attention(m.spec, 8), plan_shared_experts(m.spec, 3)}, 2);
  const QuantizedModel q = apply_plan(m, plan, caps, opt);
  const std::string bytes = serialize_quantized(q);
  EXPECT_EQ(bytes.substr(0, 6), "MOEQZ1");
  const QuantizedModel back = deserialize_quantized(bytes);
  EXPECT_EQ(back, q);
  EXPECT_EQ(serialize_quantized(back), bytes);
  EXPECT_THROW(deserialize_quantized(bytes.substr(0, bytes.size() / 2)), FormatError);
}

TEST(CalibrationContainer, ByteExactRoundTrip) {
  const CalibrationSet c = generate_calibration(5, 3, 17, 40);
  const std::string bytes = serialize_calibration(c);
  EXPECT_EQ(deserialize_calibration(bytes), c);
  EXPECT_EQ(serialize_calibration(deserialize_calibration(bytes)), bytes);
  // Header, seed, source, count, then one u32 length and 17 u32 tokens each.
  EXPECT_EQ(bytes.size(), 5u + 8u + 1u + 4u + 3u * (4u + 17u * 4u));
}

TEST(CalibrationText, ParsesTokenLines) {
  const CalibrationSet c = calibration_from_token_text("1 2 3\n\n4 5\n");
  ASSERT_EQ(c.sequences.size(), 2u);
  EXPECT_EQ(c.sequences[1], (std::vector<std::uint32_t>{4, 5}));
  EXPECT_EQ(c.source, CorpusSource::file);
  EXPECT_THROW(calibration_from_token_text("1 two 3\n"), FormatError);
}

TEST(PredictorContainer, ByteExactRoundTrip) {
  const Model m = build_model(oracle::toy_spec(2));
  PredictorConfig cfg;
  cfg.hidden = 5;
  cfg.epochs = 3;
  const auto bsp = train_block_predictor(capture_block_io(m, generate_calibration(1, 2, 16, 32)), cfg);
  const std::string bytes = serialize_predictor(bsp);
  const auto back = deserialize_predictor(bytes);
  EXPECT_EQ(serialize_predictor(back), bytes);
  for (const auto& [l, p] : bsp.blocks) {
    EXPECT_EQ(back.blocks.at(l).w1, p.w1);
    EXPECT_EQ(back.blocks.at(l).b2, p.b2);
    EXPECT_EQ(back.blocks.at(l).final_mse, p.final_mse);
  }
  EXPECT_THROW(deserialize_predictor(bytes.substr(0, 20)), FormatError);
}

TEST(PlanText, CanonicalAndRoundTrip) {
  const ModelSpec s = oracle::toy_spec(1);
  BitPlan p = compose({plan_attention(s), plan_random_experts(s, 2, 42)}, 2);
  const std::string text = plan_to_text(p);
  EXPECT_EQ(text.rfind("# moeq bit plan v1\ndefault_bits 2\nprovenance attn,random-experts:2@42\nL0.attn.k 4\n", 0), 0u);
  EXPECT_EQ(plan_from_text(text), p);
  EXPECT_EQ(plan_to_text(plan_from_text(text)), text);
  EXPECT_THROW(plan_from_text("L0.attn.q 5\n"), FormatError);
  EXPECT_THROW(plan_from_text("L0.attn.q four\n"), FormatError);
  EXPECT_THROW(plan_from_text("default_bits 7\n"), FormatError);
}

TEST(UsageText, RoundTripExact) {
  const Model m = build_model(oracle::toy_spec(3));
  const UsageProfile u = profile_usage(m, generate_calibration(2, 3, 30, 32));
  const std::string text = usage_to_text(u);
  EXPECT_EQ(usage_from_text(text), u);
  EXPECT_EQ(usage_to_text(usage_from_text(text)), text);
  EXPECT_THROW(usage_from_text("block 0 0.5\n"), FormatError);
}

TEST(ScoresText, RoundTripExact) {
  const Model m = build_model(oracle::toy_spec(3));
  const auto outlier = score_ffnn_layers(m);
  const std::map<std::size_t, double> blocks{{0, 0.875}, {1, 1.0 / 3.0}};
  const std::string text = scores_to_text(&outlier, &blocks);
  OutlierScoreTable o;
  std::map<std::size_t, double> b;
  scores_from_text(text, o, b);
  EXPECT_EQ(o, outlier);
  EXPECT_EQ(b, blocks);
  EXPECT_EQ(scores_to_text(&o, &b), text);
  EXPECT_THROW(scores_from_text("weird x 1\n", o, b), FormatError);
}
