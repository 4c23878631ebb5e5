#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moeq/allocate.hpp"
#include "moeq/calibration.hpp"
#include "moeq/io.hpp"
#include "moeq/predictor.hpp"

namespace moeq {

struct InvalidStrategy : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Inputs a strategy may need, computed on first use.
///
/// Strategy grammar: components joined by '+' (or ','), each one of
///   fp | uniform:B | attn[:B] | shared | freq:K | firstl:K | lastl:K |
///   blocks:L1/L2/... | outlier:P | alpha:A:BUDGET | predicted:K |
///   random-experts:K | random-blocks:K | random-layers:P
/// P <= 1 is a fraction of the FFNN expert layers, P > 1 a layer count.
/// Unassigned weights take `lo` bits unless `uniform:B` sets the default.
class StrategyContext {
 public:
  StrategyContext(const Model& model, const CalibrationSet& calib) : model_(&model), calib_(&calib) {}

  int hi = 4;
  int lo = 2;
  PredictorConfig predictor;

  const Model& model() const { return *model_; }

  const UsageProfile& usage() {
    if (!usage_) usage_ = profile_usage(*model_, *calib_);
    return *usage_;
  }
  const OutlierScoreTable& outlier_scores() {
    if (!outlier_) outlier_ = score_ffnn_layers(*model_);
    return *outlier_;
  }
  const std::map<std::size_t, double>& block_scores() {
    if (!blocks_) {
      const BlockTrace trace = capture_block_io(*model_, *calib_);
      const auto bsp = train_block_predictor(trace, predictor);
      blocks_ = predict_block_scores(bsp, trace);
    }
    return *blocks_;
  }

  void set_usage(UsageProfile u) { usage_ = std::move(u); }
  void set_outlier_scores(OutlierScoreTable s) { outlier_ = std::move(s); }
  void set_block_scores(std::map<std::size_t, double> s) { blocks_ = std::move(s); }

 private:
  const Model* model_;
  const CalibrationSet* calib_;
  std::optional<UsageProfile> usage_;
  std::optional<OutlierScoreTable> outlier_;
  std::optional<std::map<std::size_t, double>> blocks_;
};

namespace detail {

inline std::vector<std::string> strategy_components(const std::string& strategy) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : strategy) {
    if (c == '+' || c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  if (out.empty()) throw InvalidStrategy("empty strategy");
  return out;
}

inline std::size_t parse_count(const std::string& s, const std::string& component) {
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw InvalidStrategy("expected a count in '" + component + "'");
}

inline double parse_value(const std::string& s, const std::string& component) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw InvalidStrategy("expected a number in '" + component + "'");
}

inline std::size_t layers_for(double p, std::size_t n, const std::string& component) {
  if (p > 1.0) {
    if (p != std::floor(p)) throw InvalidStrategy("layer count must be an integer in '" + component + "'");
    return static_cast<std::size_t>(p);
  }
  try {
    return count_for_fraction(p, n);
  } catch (const std::invalid_argument& e) {
    throw InvalidStrategy(std::string(e.what()) + " in '" + component + "'");
  }
}

}  // namespace detail

inline bool is_full_precision(const std::string& strategy) {
  const auto parts = detail::strategy_components(strategy);
  return parts.size() == 1 && parts[0] == "fp";
}

inline bool is_random_strategy(const std::string& strategy) {
  for (const auto& c : detail::strategy_components(strategy))
    if (c.rfind("random-", 0) == 0) return true;
  return false;
}

/// Builds the composed plan of a strategy string. `seed` drives random
/// components.
inline BitPlan build_plan(const std::string& strategy, StrategyContext& ctx, std::uint64_t seed = 42) {
  const ModelSpec& spec = ctx.model().spec;
  std::vector<BitPlan> parts;
  int default_bits = ctx.lo;
  for (const auto& c : detail::strategy_components(strategy)) {
    const auto f = detail::split(c, ':');
    const std::string& head = f[0];
    auto arg = [&](std::size_t i) -> const std::string& {
      if (i >= f.size()) throw InvalidStrategy("missing argument in '" + c + "'");
      return f[i];
    };
    auto arity = [&](std::size_t lo_n, std::size_t hi_n) {
      if (f.size() < lo_n + 1 || f.size() > hi_n + 1) throw InvalidStrategy("wrong argument count in '" + c + "'");
    };
    try {
      if (head == "fp") {
        throw InvalidStrategy("'fp' cannot be composed with other components");
      } else if (head == "uniform") {
        arity(1, 1);
        default_bits = static_cast<int>(detail::parse_count(arg(1), c));
        check_bits(default_bits);
      } else if (head == "attn") {
        arity(0, 1);
        parts.push_back(plan_attention(spec, f.size() > 1 ? static_cast<int>(detail::parse_count(arg(1), c)) : ctx.hi));
      } else if (head == "shared") {
        arity(0, 1);
        parts.push_back(plan_shared_experts(spec, f.size() > 1 ? static_cast<int>(detail::parse_count(arg(1), c)) : ctx.hi));
      } else if (head == "freq") {
        arity(1, 1);
        parts.push_back(plan_frequency(ctx.usage(), spec, detail::parse_count(arg(1), c), ctx.hi, ctx.lo));
      } else if (head == "firstl" || head == "lastl") {
        arity(1, 1);
        parts.push_back(plan_blocks(spec, head == "firstl" ? BlockSelection::first : BlockSelection::last,
                                    detail::parse_count(arg(1), c), {}, ctx.hi));
      } else if (head == "blocks") {
        arity(1, 1);
        std::vector<std::size_t> listed;
        for (const auto& s : detail::split(arg(1), '/')) listed.push_back(detail::parse_count(s, c));
        parts.push_back(plan_blocks(spec, BlockSelection::listed, listed.size(), listed, ctx.hi));
      } else if (head == "outlier") {
        arity(1, 1);
        const auto& scores = ctx.outlier_scores();
        parts.push_back(plan_outlier_topk(scores, detail::layers_for(detail::parse_value(arg(1), c), scores.size(), c),
                                          ctx.hi, ctx.lo));
      } else if (head == "alpha") {
        arity(2, 2);
        parts.push_back(plan_alpha_mix(ctx.usage(), ctx.outlier_scores(), detail::parse_count(arg(2), c),
                                       detail::parse_value(arg(1), c), ctx.hi, ctx.lo));
      } else if (head == "predicted") {
        arity(1, 1);
        parts.push_back(plan_predicted_blocks(ctx.block_scores(), spec, detail::parse_count(arg(1), c), ctx.hi));
      } else if (head == "random-experts") {
        arity(1, 1);
        parts.push_back(plan_random_experts(spec, detail::parse_count(arg(1), c), seed, ctx.hi, ctx.lo));
      } else if (head == "random-blocks") {
        arity(1, 1);
        parts.push_back(plan_random_blocks(spec, detail::parse_count(arg(1), c), seed, ctx.hi));
      } else if (head == "random-layers") {
        arity(1, 1);
        const auto n = ffnn_expert_ids(spec).size();
        parts.push_back(plan_random_ffnn_layers(spec, detail::layers_for(detail::parse_value(arg(1), c), n, c), seed,
                                                ctx.hi, ctx.lo));
      } else {
        throw InvalidStrategy("unknown strategy component '" + c + "'");
      }
    } catch (const InvalidStrategy&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw InvalidStrategy("'" + c + "': " + e.what());
    }
  }
  BitPlan plan = compose(parts, default_bits);
  if (plan.provenance.empty()) plan.provenance.push_back("uniform:" + std::to_string(default_bits));
  return plan;
}

}  // namespace moeq
