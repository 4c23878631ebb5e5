#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moeq/moeq.hpp"

namespace {

using namespace moeq;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct CalibFlags {
  std::uint64_t seed = 0;
  std::size_t seqs = 32;
  std::size_t len = 256;
  std::string file;

  void attach(CLI::App* app) {
    app->add_option("--calib-seed", seed, "Calibration corpus seed");
    app->add_option("--calib-seqs", seqs, "Calibration sequences")->check(CLI::PositiveNumber);
    app->add_option("--calib-len", len, "Tokens per calibration sequence")->check(CLI::PositiveNumber);
    app->add_option("--calib-file", file, "CALQ1 file or whitespace-separated token ids (one sequence per line)");
  }

  CalibrationSet load(const ModelSpec& spec) const {
    if (file.empty()) return generate_calibration(seed, seqs, len, spec.vocab_size);
    const std::string bytes = read_file(file);
    CalibrationSet c = bytes.rfind("CALQ1", 0) == 0 ? deserialize_calibration(bytes) : calibration_from_token_text(bytes);
    c.validate(spec.vocab_size);
    return c;
  }
};

struct EvalFlags {
  std::uint64_t seed = 1000;
  std::size_t seqs = 16;
  std::size_t len = 128;
  std::string reference;

  void attach(CLI::App* app) {
    app->add_option("--eval-seed", seed, "Evaluation corpus seed");
    app->add_option("--eval-seqs", seqs, "Evaluation sequences")->check(CLI::PositiveNumber);
    app->add_option("--eval-len", len, "Tokens per evaluation sequence")->check(CLI::PositiveNumber);
  }

  CalibrationSet sample(const Model& source) const { return sample_from_model(source, seed, seqs, len); }
};

bool starts_with(const std::string& bytes, std::string_view magic) { return bytes.rfind(magic, 0) == 0; }

Model load_model(const std::string& path) { return deserialize_model(read_file(path)); }

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-")
    std::cout << text;
  else
    write_file(out, text);
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  for (const auto& part : detail::split(s, ',')) {
    const std::string t = detail::trim(part);
    if (t.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size()) throw std::invalid_argument("invalid seed '" + t + "'");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw std::invalid_argument("--seeds needs at least one seed");
  return seeds;
}

std::string usage_histogram(const UsageProfile& u) {
  std::string out;
  char buf[96];
  for (const auto& [layer, v] : u.blocks) {
    out += "layer " + std::to_string(layer) + "\n";
    for (std::size_t e = 0; e < v.size(); ++e) {
      std::snprintf(buf, sizeof buf, "  expert %2zu %8.5f ", e, v[e]);
      out += buf;
      out.append(static_cast<std::size_t>(v[e] * 60.0 + 0.5), '#');
      out += '\n';
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"moeq: mixed-precision post-training quantization for small MoE transformers"};
  app.require_subcommand(1);

  std::string model_path, out_path, spec_path, plan_path, predictor_out, strategy, backend = "gptq", method = "outlier";
  std::string seeds = "42,43,44", format;
  int hi = 4, lo = 2;
  double damp = 0.01;
  std::size_t group = 128;
  std::size_t epochs = 50, hidden = 64;
  std::uint64_t predictor_seed = 0;
  bool histogram = false;
  CalibFlags calib;
  EvalFlags eval;

  auto* build = app.add_subcommand("build", "Build a random-init model from a key = value spec file");
  build->add_option("--spec", spec_path, "Spec file")->required();
  build->add_option("--out", out_path, "Output MOEQ1 model")->required();

  auto* profile = app.add_subcommand("profile", "Expert usage profile over a calibration corpus");
  profile->add_option("--model", model_path, "MOEQ1 model")->required();
  profile->add_option("--out", out_path, "Usage text output (- for stdout)");
  profile->add_flag("--histogram", histogram, "Also print a usage histogram to stdout");
  calib.attach(profile);

  auto* score = app.add_subcommand("score", "Outlier scores per FFNN layer or predicted block scores");
  score->add_option("--model", model_path, "MOEQ1 model")->required();
  score->add_option("--method", method, "outlier | predictor")->check(CLI::IsMember({"outlier", "predictor"}));
  score->add_option("--epochs", epochs, "Predictor epochs");
  score->add_option("--hidden", hidden, "Predictor hidden units")->check(CLI::PositiveNumber);
  score->add_option("--predictor-seed", predictor_seed, "Predictor initialisation seed");
  score->add_option("--predictor-out", predictor_out, "Also write the trained BSPQ1 predictor here");
  score->add_option("--out", out_path, "Scores text output (- for stdout)");
  calib.attach(score);

  auto* plan = app.add_subcommand("plan", "Build a bit plan from a strategy");
  plan->add_option("--model", model_path, "MOEQ1 model")->required();
  plan->add_option("--strategy", strategy, "Components joined by ',' or '+'")->required();
  plan->add_option("--hi", hi, "High bit width");
  plan->add_option("--lo", lo, "Low bit width");
  plan->add_option("--seed", predictor_seed, "Seed for random strategies");
  plan->add_option("--epochs", epochs, "Predictor epochs");
  plan->add_option("--hidden", hidden, "Predictor hidden units")->check(CLI::PositiveNumber);
  plan->add_option("--out", out_path, "Plan text output (- for stdout)");
  calib.attach(plan);

  auto* quantize = app.add_subcommand("quantize", "Quantize a model according to a plan");
  quantize->add_option("--model", model_path, "MOEQ1 model")->required();
  quantize->add_option("--plan", plan_path, "Plan text file")->required();
  quantize->add_option("--backend", backend, "rtn | gptq")->check(CLI::IsMember({"rtn", "gptq"}));
  quantize->add_option("--damp", damp, "GPTQ damping ratio")->check(CLI::PositiveNumber);
  quantize->add_option("--group", group, "Quantization group size")->check(CLI::PositiveNumber);
  quantize->add_option("--out", out_path, "Output MOEQZ1 model")->required();
  calib.attach(quantize);

  auto* evaluate = app.add_subcommand("eval", "Perplexity of a full-precision or quantized model");
  evaluate->add_option("--model", model_path, "MOEQ1 or MOEQZ1 model")->required();
  evaluate->add_option("--reference", eval.reference,
                       "MOEQ1 model the evaluation text is sampled from (defaults to --model if full precision)");
  evaluate->add_option("--out", out_path, "CSV report output (- for stdout)");
  eval.attach(evaluate);

  auto* cmp = app.add_subcommand("compare", "Evaluate several strategies side by side");
  cmp->add_option("--model", model_path, "MOEQ1 model")->required();
  std::vector<std::string> strategy_args;
  cmp->add_option("--strategies", strategy_args, "Strategies separated by ';' (repeatable)")->required();
  cmp->add_option("--seeds", seeds, "Seeds for random strategies");
  cmp->add_option("--hi", hi, "High bit width");
  cmp->add_option("--lo", lo, "Low bit width");
  cmp->add_option("--backend", backend, "rtn | gptq")->check(CLI::IsMember({"rtn", "gptq"}));
  cmp->add_option("--damp", damp, "GPTQ damping ratio")->check(CLI::PositiveNumber);
  cmp->add_option("--group", group, "Quantization group size")->check(CLI::PositiveNumber);
  cmp->add_option("--epochs", epochs, "Predictor epochs");
  cmp->add_option("--hidden", hidden, "Predictor hidden units")->check(CLI::PositiveNumber);
  cmp->add_option("--format", format, "md | csv (default from --out extension)")->check(CLI::IsMember({"md", "csv"}));
  cmp->add_option("--out", out_path, "Report output (- for stdout)");
  calib.attach(cmp);
  eval.attach(cmp);


  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  PredictorConfig predictor;
  predictor.epochs = epochs;
  predictor.hidden = hidden;
  predictor.seed = predictor_seed;

  try {
    if (*build) {
      const ModelSpec spec = spec_from_text(read_file(spec_path));
      write_file(out_path, serialize_model(build_model(spec)));
      std::cerr << "built " << spec.num_layers << "-layer model, spec hash " << spec_hash(spec) << "\n";
    } else if (*profile) {
      const Model model = load_model(model_path);
      const UsageProfile usage = profile_usage(model, calib.load(model.spec));
      emit(out_path, usage_to_text(usage));
      if (histogram) std::cout << usage_histogram(usage);
    } else if (*score) {
      const Model model = load_model(model_path);
      if (method == "outlier") {
        const auto scores = score_ffnn_layers(model);
        emit(out_path, scores_to_text(&scores, nullptr));
      } else {
        const BlockTrace trace = capture_block_io(model, calib.load(model.spec));
        const auto bsp = train_block_predictor(trace, predictor);
        const auto blocks = predict_block_scores(bsp, trace);
        if (!predictor_out.empty()) write_file(predictor_out, serialize_predictor(bsp));
        emit(out_path, scores_to_text(nullptr, &blocks));
      }
    } else if (*plan) {
      const Model model = load_model(model_path);
      const CalibrationSet c = calib.load(model.spec);
      StrategyContext ctx(model, c);
      ctx.hi = hi;
      ctx.lo = lo;
      ctx.predictor = predictor;
      const BitPlan p = build_plan(strategy, ctx, predictor_seed);
      emit(out_path, plan_to_text(p));
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.6f", average_bits(p, model.spec));
      std::cerr << "average bits " << buf << "\n";
    } else if (*quantize) {
      const Model model = load_model(model_path);
      const BitPlan p = plan_from_text(read_file(plan_path));
      validate_plan(p, model.spec);
      QuantOptions opts;
      opts.backend = parse_backend(backend);
      opts.damp_ratio = damp;
      opts.group_size = group;
      LayerInputs captures;
      if (opts.backend == Backend::gptq) captures = capture_layer_inputs(model, calib.load(model.spec));
      write_file(out_path, serialize_quantized(apply_plan(model, p, captures, opts)));
    } else if (*evaluate) {
      const std::string bytes = read_file(model_path);
      EvalReport report;
      EvalRow row;
      double ppl = 0.0;
      if (starts_with(bytes, "MOEQZ1")) {
        const QuantizedModel q = deserialize_quantized(bytes);
        const Model reference = eval.reference.empty() ? q.dequantize() : load_model(eval.reference);
        if (!eval.reference.empty() && spec_hash(reference.spec) != spec_hash(q.spec))
          throw std::invalid_argument("--reference spec does not match the quantized model");
        const CalibrationSet text = eval.sample(reference);
        ppl = perplexity(q, text);
        report.spec_hash = spec_hash(q.spec);
        row.strategy = "quantized";
        double bits = 0.0, params = 0.0;
        for (const auto& [id, t] : q.quantized) {
          bits += static_cast<double>(t.bits) * static_cast<double>(t.rows * t.cols);
          params += static_cast<double>(t.rows * t.cols);
        }
        row.avg_bits = params > 0 ? bits / params : 0.0;
      } else {
        const Model model = deserialize_model(bytes);
        const Model reference = eval.reference.empty() ? model : load_model(eval.reference);
        ppl = perplexity(model, eval.sample(reference));
        report.spec_hash = spec_hash(model.spec);
        row.strategy = "fp";
        row.avg_bits = kFullPrecisionBits;
      }
      row.perplexity = ppl;
      report.eval_seed = eval.seed;
      report.rows.push_back(row);
      emit(out_path, render_report(report, ReportFormat::csv));
    } else if (*cmp) {
      const Model model = load_model(model_path);
      CompareOptions opts;
      opts.seeds = parse_seeds(seeds);
      opts.hi = hi;
      opts.lo = lo;
      opts.quant.backend = parse_backend(backend);
      opts.quant.damp_ratio = damp;
      opts.quant.group_size = group;
      opts.predictor = predictor;
      std::vector<std::string> strategy_list;
      for (const auto& arg : strategy_args)
        for (const auto& part : detail::split(arg, ';'))
          if (auto t = detail::trim(part); !t.empty()) strategy_list.push_back(t);
      const EvalReport report = compare(model, strategy_list, calib.load(model.spec), eval.sample(model), opts);
      const bool csv = format == "csv" || (format.empty() && out_path.size() > 4 &&
                                           out_path.compare(out_path.size() - 4, 4, ".csv") == 0);
      emit(out_path, render_report(report, csv ? ReportFormat::csv : ReportFormat::markdown));
    }
  } catch (const QuantizationError& e) {
    std::cerr << "numerical failure at " << e.weight.str() << ": " << e.what() << "\n";
    return kExitNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}
