#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moeq/allocate.hpp"
#include "moeq/calibration.hpp"
#include "moeq/io.hpp"
#include "moeq/model.hpp"
#include "moeq/strategy.hpp"

namespace moeq {

/// exp of the mean next-token negative log-likelihood over every predicted
/// position of every sequence.
inline double perplexity(const Model& model, const CalibrationSet& eval_set) {
  eval_set.validate(model.spec.vocab_size);
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& seq : eval_set.sequences) {
    if (seq.size() < 2) continue;
    const Matrix logits = forward(model, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      auto row = logits.row(t);
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      nll += (std::log(z) + mx) - row[seq[t + 1]];
      ++count;
    }
  }
  if (count == 0) throw EmptyCalibration("perplexity: evaluation set has no predicted positions");
  return std::exp(nll / static_cast<double>(count));
}

inline double perplexity(const QuantizedModel& q, const CalibrationSet& eval_set) {
  return perplexity(q.dequantize(), eval_set);
}

/// Storage width of an unquantized weight (64-bit reals).
inline constexpr double kFullPrecisionBits = 64.0;

struct EvalRow {
  std::string strategy;
  double avg_bits = 0.0;
  double perplexity = 0.0;  // mean over seeds for random strategies
  double stddev = 0.0;      // sample standard deviation over seeds
  std::vector<std::pair<std::uint64_t, double>> per_seed;

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::uint64_t spec_hash = 0;
  std::uint64_t calib_seed = 0;
  std::uint64_t eval_seed = 0;

  const EvalRow* find(const std::string& strategy) const {
    for (const auto& r : rows)
      if (r.strategy == strategy) return &r;
    return nullptr;
  }

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

struct CompareOptions {
  QuantOptions quant;
  std::vector<std::uint64_t> seeds{42, 43, 44};
  int hi = 4;
  int lo = 2;
  PredictorConfig predictor;
};

inline std::pair<double, double> mean_and_stddev(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

/// Plans, quantizes and evaluates every strategy. Random strategies run once
/// per seed and report mean and standard deviation. Rows are sorted by
/// average bits, ties keeping the strategy-list order.
inline EvalReport compare(const Model& model, const std::vector<std::string>& strategies, const CalibrationSet& calib,
                          const CalibrationSet& eval_set, const CompareOptions& options = {}) {
  EvalReport report;
  report.spec_hash = spec_hash(model.spec);
  report.calib_seed = calib.seed;
  report.eval_seed = eval_set.seed;

  StrategyContext ctx(model, calib);
  ctx.hi = options.hi;
  ctx.lo = options.lo;
  ctx.predictor = options.predictor;
  std::optional<LayerInputs> captures;
  QuantCache cache;

  for (const auto& strategy : strategies) {
    EvalRow row;
    row.strategy = strategy;
    if (is_full_precision(strategy)) {
      row.avg_bits = kFullPrecisionBits;
      row.perplexity = perplexity(model, eval_set);
      report.rows.push_back(std::move(row));
      continue;
    }
    if (!captures) captures = capture_layer_inputs(model, calib);
    const bool random = is_random_strategy(strategy);
    const std::vector<std::uint64_t> seeds = random ? options.seeds : std::vector<std::uint64_t>{0};
    if (seeds.empty()) throw std::invalid_argument("compare: random strategies need at least one seed");
    std::vector<double> ppl, bits;
    for (auto seed : seeds) {
      const BitPlan plan = build_plan(strategy, ctx, seed);
      const QuantizedModel q = apply_plan(model, plan, *captures, options.quant, &cache);
      ppl.push_back(perplexity(q, eval_set));
      bits.push_back(average_bits(plan, model.spec));
      if (random) row.per_seed.emplace_back(seed, ppl.back());
    }
    std::tie(row.perplexity, row.stddev) = mean_and_stddev(ppl);
    row.avg_bits = mean_and_stddev(bits).first;
    report.rows.push_back(std::move(row));
  }
  std::stable_sort(report.rows.begin(), report.rows.end(),
                   [](const EvalRow& a, const EvalRow& b) { return a.avg_bits < b.avg_bits; });
  return report;
}

enum class ReportFormat { markdown, csv };

namespace detail {

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
      else if (c == '"') quoted = false;
      else cur += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace detail

inline std::string render_report(const EvalReport& report, ReportFormat format) {
  std::ostringstream o;
  const std::string meta = "spec_hash=" + std::to_string(report.spec_hash) +
                           " calib_seed=" + std::to_string(report.calib_seed) +
                           " eval_seed=" + std::to_string(report.eval_seed);
  if (format == ReportFormat::csv) {
    o << "# " << meta << "\n";
    o << "strategy,avg_bits,perplexity,stddev,per_seed\n";
    for (const auto& r : report.rows) {
      std::string seeds;
      for (std::size_t i = 0; i < r.per_seed.size(); ++i)
        seeds += (i ? ";" : "") + std::to_string(r.per_seed[i].first) + ":" + format_real(r.per_seed[i].second);
      o << detail::csv_quote(r.strategy) << "," << format_real(r.avg_bits) << "," << format_real(r.perplexity) << ","
        << format_real(r.stddev) << "," << seeds << "\n";
    }
    return o.str();
  }
  o << "<!-- " << meta << " -->\n";
  o << "| Strategy | Avg bits | Perplexity | Std | Seeds |\n";
  o << "|---|---|---|---|---|\n";
  for (const auto& r : report.rows) {
    std::string ppl = detail::fixed(r.perplexity, 4);
    if (!r.per_seed.empty()) ppl += " ± " + detail::fixed(r.stddev, 4);
    std::string seeds;
    for (std::size_t i = 0; i < r.per_seed.size(); ++i) seeds += (i ? "," : "") + std::to_string(r.per_seed[i].first);
    o << "| " << r.strategy << " | " << detail::fixed(r.avg_bits, 4) << " | " << ppl << " | "
      << detail::fixed(r.stddev, 4) << " | " << (seeds.empty() ? "-" : seeds) << " |\n";
  }
  return o.str();
}

inline EvalReport parse_report_csv(std::string_view text) {
  EvalReport report;
  std::istringstream in{std::string(text)};
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream ms(line.substr(1));
      std::string kv;
      while (ms >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) continue;
        const auto key = kv.substr(0, eq);
        const auto val = std::stoull(kv.substr(eq + 1));
        if (key == "spec_hash") report.spec_hash = val;
        else if (key == "calib_seed") report.calib_seed = val;
        else if (key == "eval_seed") report.eval_seed = val;
      }
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto f = detail::csv_fields(line);
    if (f.size() != 5) throw FormatError("report row needs 5 fields: " + line);
    EvalRow r;
    r.strategy = f[0];
    r.avg_bits = detail::parse_real(f[1]);
    r.perplexity = detail::parse_real(f[2]);
    r.stddev = detail::parse_real(f[3]);
    if (!f[4].empty())
      for (const auto& item : detail::split(f[4], ';')) {
        const auto c = item.find(':');
        if (c == std::string::npos) throw FormatError("malformed per-seed entry: " + item);
        r.per_seed.emplace_back(std::stoull(item.substr(0, c)), detail::parse_real(item.substr(c + 1)));
      }
    report.rows.push_back(std::move(r));
  }
  return report;
}

}  // namespace moeq
