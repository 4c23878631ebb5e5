#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "moeq/calibration.hpp"
#include "moeq/model.hpp"
#include "moeq/numerics.hpp"
#include "moeq/quant.hpp"

namespace moeq {

struct InvalidPlan : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct MissingUsage : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct InvalidAlpha : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Codec failure annotated with the weight that caused it.
struct QuantizationError : NumericalError {
  QuantizationError(WeightId id, const std::string& what)
      : NumericalError(id.str() + ": " + what), weight(std::move(id)) {}
  WeightId weight;
};

/// Bit width per weight; unassigned quantizable weights take default_bits.
struct BitPlan {
  std::map<WeightId, int> assignments;
  int default_bits = 2;
  std::vector<std::string> provenance;

  int bits_for(const WeightId& id) const {
    auto it = assignments.find(id);
    return it == assignments.end() ? default_bits : it->second;
  }

  void assign(const WeightId& id, int bits) {
    check_bits(bits);
    assignments[id] = bits;
  }

  friend bool operator==(const BitPlan&, const BitPlan&) = default;
};

inline void validate_plan(const BitPlan& plan, const ModelSpec& spec) {
  if (!valid_bits(plan.default_bits)) throw InvalidPlan("default bits must be one of {2,3,4,8}");
  const auto ids = all_weight_ids(spec);
  for (const auto& [id, bits] : plan.assignments) {
    if (!std::binary_search(ids.begin(), ids.end(), id)) throw InvalidPlan("plan names unknown weight " + id.str());
    if (!id.quantizable()) throw InvalidPlan("router weights stay full precision: " + id.str());
    if (!valid_bits(bits)) throw InvalidPlan("invalid bits for " + id.str());
  }
}

/// max over columns of max|w_:,j| / mean|w_:,j|; an all-zero column scores 1.
inline double outlier_score(const Matrix& w) {
  if (w.empty()) throw std::invalid_argument("outlier_score: empty matrix");
  double best = 0.0;
  for (std::size_t c = 0; c < w.cols(); ++c) {
    double mx = 0.0, sum = 0.0;
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const double a = std::abs(w(r, c));
      mx = std::max(mx, a);
      sum += a;
    }
    const double ratio = sum == 0.0 ? 1.0 : mx / (sum / static_cast<double>(w.rows()));
    best = std::max(best, ratio);
  }
  return best;
}

using OutlierScoreTable = std::map<WeightId, double>;

inline OutlierScoreTable score_ffnn_layers(const Model& model) {
  OutlierScoreTable t;
  for (const auto& id : ffnn_expert_ids(model.spec)) t.emplace(id, outlier_score(model.weight(id)));
  return t;
}

/// Ids sorted by descending score, ties by WeightId order.
inline std::vector<WeightId> rank_by_score(const OutlierScoreTable& scores) {
  std::vector<WeightId> ids;
  for (const auto& [id, s] : scores) ids.push_back(id);
  std::stable_sort(ids.begin(), ids.end(), [&](const WeightId& a, const WeightId& b) { return scores.at(a) > scores.at(b); });
  return ids;
}

/// Number of layers for a top-p selection: round(p·n), at least 1.
inline std::size_t count_for_fraction(double p, std::size_t n) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(p * static_cast<double>(n))));
}

/// The k highest-scoring FFNN linear layers at hi bits, the rest at lo.
inline BitPlan plan_outlier_topk(const OutlierScoreTable& scores, std::size_t k, int hi = 4, int lo = 2) {
  if (k < 1 || k > scores.size()) throw std::invalid_argument("plan_outlier_topk: k must lie in [1, #layers]");
  const auto ranked = rank_by_score(scores);
  BitPlan plan;
  plan.default_bits = lo;
  for (std::size_t i = 0; i < ranked.size(); ++i) plan.assign(ranked[i], i < k ? hi : lo);
  plan.provenance.push_back("outlier:" + std::to_string(k));
  return plan;
}

inline BitPlan plan_outlier_topk(const Model& model, std::size_t k, int hi = 4, int lo = 2) {
  return plan_outlier_topk(score_ffnn_layers(model), k, hi, lo);
}

inline BitPlan plan_outlier_fraction(const Model& model, double p, int hi = 4, int lo = 2) {
  const auto scores = score_ffnn_layers(model);
  return plan_outlier_topk(scores, count_for_fraction(p, scores.size()), hi, lo);
}

namespace detail {

inline void assign_ffnn(BitPlan& plan, std::uint32_t layer, WeightKind kind, std::uint32_t expert, int bits) {
  for (const auto& p : ffnn_projections()) plan.assign({layer, kind, expert, p}, bits);
}

inline std::vector<std::size_t> rank_experts(const std::vector<double>& usage) {
  std::vector<std::size_t> order(usage.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return usage[a] > usage[b]; });
  return order;
}

}  // namespace detail

/// Per MoE block: the top_k_experts most used experts at hi bits, the other
/// routed experts at lo. Shared experts are left unassigned.
inline BitPlan plan_frequency(const UsageProfile& usage, const ModelSpec& spec, std::size_t top_k_experts, int hi = 4,
                              int lo = 2) {
  if (top_k_experts > spec.num_experts) throw std::invalid_argument("plan_frequency: more experts than the block has");
  if (hi <= lo) throw std::invalid_argument("plan_frequency: hi bits must exceed lo bits");
  BitPlan plan;
  plan.default_bits = lo;
  for (std::size_t l : spec.moe_layers()) {
    auto it = usage.blocks.find(l);
    if (it == usage.blocks.end()) throw MissingUsage("usage profile has no entry for layer " + std::to_string(l));
    if (it->second.size() != spec.num_experts) throw MissingUsage("usage vector length mismatch in layer " + std::to_string(l));
    const auto order = detail::rank_experts(it->second);
    for (std::size_t r = 0; r < order.size(); ++r)
      detail::assign_ffnn(plan, static_cast<std::uint32_t>(l), WeightKind::expert, static_cast<std::uint32_t>(order[r]),
                          r < top_k_experts ? hi : lo);
  }
  plan.provenance.push_back("freq:" + std::to_string(top_k_experts));
  return plan;
}

inline BitPlan plan_attention(const ModelSpec& spec, int hi = 4) {
  BitPlan plan;
  for (std::uint32_t l = 0; l < spec.num_layers; ++l)
    for (const auto& p : attention_projections()) plan.assign({l, WeightKind::attention, {}, p}, hi);
  plan.provenance.push_back("attn");
  return plan;
}

enum class BlockSelection { first, last, listed };

/// All expert projections (routed and shared) of the chosen MoE blocks at hi
/// bits. A dense first layer is always included.
inline BitPlan plan_blocks(const ModelSpec& spec, BlockSelection which, std::size_t k,
                           const std::vector<std::size_t>& listed = {}, int hi = 4) {
  const auto moe = spec.moe_layers();
  std::vector<std::size_t> chosen;
  switch (which) {
    case BlockSelection::first:
      if (k > moe.size()) throw std::invalid_argument("plan_blocks: k exceeds the number of MoE blocks");
      chosen.assign(moe.begin(), moe.begin() + static_cast<std::ptrdiff_t>(k));
      break;
    case BlockSelection::last:
      if (k > moe.size()) throw std::invalid_argument("plan_blocks: k exceeds the number of MoE blocks");
      chosen.assign(moe.end() - static_cast<std::ptrdiff_t>(k), moe.end());
      break;
    case BlockSelection::listed:
      for (auto l : listed) {
        if (l >= spec.num_layers || !spec.is_moe_layer(l))
          throw std::invalid_argument("plan_blocks: layer " + std::to_string(l) + " is not an MoE block");
      }
      chosen = listed;
      break;
  }
  BitPlan plan;
  for (std::uint32_t l = 0; l < spec.num_layers; ++l)
    if (!spec.is_moe_layer(l))
      for (const auto& p : ffnn_projections()) plan.assign({l, WeightKind::dense, {}, p}, hi);
  for (auto l : chosen) {
    const auto layer = static_cast<std::uint32_t>(l);
    for (std::uint32_t e = 0; e < spec.num_experts; ++e) detail::assign_ffnn(plan, layer, WeightKind::expert, e, hi);
    for (std::uint32_t s = 0; s < spec.num_shared_experts; ++s)
      detail::assign_ffnn(plan, layer, WeightKind::shared_expert, s, hi);
  }
  switch (which) {
    case BlockSelection::first: plan.provenance.push_back("firstl:" + std::to_string(k)); break;
    case BlockSelection::last: plan.provenance.push_back("lastl:" + std::to_string(k)); break;
    case BlockSelection::listed: {
      std::string s = "blocks:";
      for (std::size_t i = 0; i < chosen.size(); ++i) s += (i ? "/" : "") + std::to_string(chosen[i]);
      plan.provenance.push_back(s);
      break;
    }
  }
  return plan;
}

inline BitPlan plan_shared_experts(const ModelSpec& spec, int hi = 4) {
  BitPlan plan;
  for (std::size_t l : spec.moe_layers())
    for (std::uint32_t s = 0; s < spec.num_shared_experts; ++s)
      detail::assign_ffnn(plan, static_cast<std::uint32_t>(l), WeightKind::shared_expert, s, hi);
  plan.provenance.push_back("shared");
  return plan;
}

/// Frequency ranking over routed-expert projections: every block's most used
/// expert first (blocks in layer order), then every block's second, and so
/// on; each expert expands to gate, up, down.
inline std::vector<WeightId> frequency_ranking(const UsageProfile& usage) {
  std::vector<std::pair<std::size_t, std::vector<std::size_t>>> per_block;
  std::size_t depth = 0;
  for (const auto& [layer, u] : usage.blocks) {
    per_block.emplace_back(layer, detail::rank_experts(u));
    depth = std::max(depth, u.size());
  }
  std::vector<WeightId> out;
  for (std::size_t r = 0; r < depth; ++r)
    for (const auto& [layer, order] : per_block)
      if (r < order.size())
        for (const auto& p : ffnn_projections())
          out.push_back({static_cast<std::uint32_t>(layer), WeightKind::expert, static_cast<std::uint32_t>(order[r]), p});
  return out;
}

/// round(alpha·budget) layers from the frequency ranking, the rest from the
/// outlier ranking skipping layers already taken. Selected layers at hi bits,
/// every other scored layer at lo.
inline BitPlan plan_alpha_mix(const UsageProfile& usage, const OutlierScoreTable& scores, std::size_t budget,
                              double alpha, int hi = 4, int lo = 2) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidAlpha("alpha must lie in [0, 1]");
  if (budget > scores.size()) throw std::invalid_argument("plan_alpha_mix: budget exceeds the number of FFNN layers");
  const auto freq_slots = static_cast<std::size_t>(std::llround(alpha * static_cast<double>(budget)));
  std::set<WeightId> chosen;
  for (const auto& id : frequency_ranking(usage)) {
    if (chosen.size() >= freq_slots) break;
    if (scores.contains(id)) chosen.insert(id);
  }
  for (const auto& id : rank_by_score(scores)) {
    if (chosen.size() >= budget) break;
    chosen.insert(id);
  }
  BitPlan plan;
  plan.default_bits = lo;
  for (const auto& [id, s] : scores) plan.assign(id, chosen.contains(id) ? hi : lo);
  char buf[64];
  std::snprintf(buf, sizeof buf, "alpha:%g:%zu", alpha, budget);
  plan.provenance.push_back(buf);
  return plan;
}

/// Later plans override earlier ones; provenance concatenates in order.
inline BitPlan compose(const std::vector<BitPlan>& plans, int default_bits) {
  BitPlan out;
  out.default_bits = default_bits;
  check_bits(default_bits);
  for (const auto& p : plans) {
    for (const auto& [id, bits] : p.assignments) out.assignments[id] = bits;
    out.provenance.insert(out.provenance.end(), p.provenance.begin(), p.provenance.end());
  }
  return out;
}

/// Parameter-weighted mean bit width over quantizable weights (routers,
/// embedding and head excluded).
inline double average_bits(const BitPlan& plan, const ModelSpec& spec) {
  double bits = 0.0, params = 0.0;
  for (const auto& id : quantizable_ids(spec)) {
    const auto n = static_cast<double>(parameter_count(spec, id));
    bits += n * plan.bits_for(id);
    params += n;
  }
  return bits / params;
}

// Random baselines.

inline BitPlan plan_random_experts(const ModelSpec& spec, std::size_t k, std::uint64_t seed, int hi = 4, int lo = 2) {
  if (k > spec.num_experts) throw std::invalid_argument("plan_random_experts: k exceeds experts per block");
  Rng rng(seed);
  BitPlan plan;
  plan.default_bits = lo;
  for (std::size_t l : spec.moe_layers()) {
    std::vector<std::size_t> order(spec.num_experts);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (std::size_t r = 0; r < order.size(); ++r)
      detail::assign_ffnn(plan, static_cast<std::uint32_t>(l), WeightKind::expert, static_cast<std::uint32_t>(order[r]),
                          r < k ? hi : lo);
  }
  plan.provenance.push_back("random-experts:" + std::to_string(k) + "@" + std::to_string(seed));
  return plan;
}

inline BitPlan plan_random_blocks(const ModelSpec& spec, std::size_t k, std::uint64_t seed, int hi = 4) {
  auto moe = spec.moe_layers();
  if (k > moe.size()) throw std::invalid_argument("plan_random_blocks: k exceeds the number of MoE blocks");
  Rng rng(seed);
  rng.shuffle(moe);
  moe.resize(k);
  std::sort(moe.begin(), moe.end());
  BitPlan plan = plan_blocks(spec, BlockSelection::listed, k, moe, hi);
  plan.provenance = {"random-blocks:" + std::to_string(k) + "@" + std::to_string(seed)};
  return plan;
}

/// `count` uniformly chosen FFNN expert projections (routed and shared) at hi.
inline BitPlan plan_random_ffnn_layers(const ModelSpec& spec, std::size_t count, std::uint64_t seed, int hi = 4,
                                       int lo = 2) {
  auto ids = ffnn_expert_ids(spec);
  if (count > ids.size()) throw std::invalid_argument("plan_random_ffnn_layers: count exceeds FFNN layers");
  Rng rng(seed);
  rng.shuffle(ids);
  BitPlan plan;
  plan.default_bits = lo;
  for (std::size_t i = 0; i < ids.size(); ++i) plan.assign(ids[i], i < count ? hi : lo);
  plan.provenance.push_back("random-layers:" + std::to_string(count) + "@" + std::to_string(seed));
  return plan;
}

/// Weights after plan application: quantized tensors for every quantizable
/// weight; routers, embedding and head kept at full precision.
struct QuantizedModel {
  ModelSpec spec;
  Matrix embedding;
  Matrix head;
  std::map<WeightId, Matrix> full_precision;
  std::map<WeightId, GroupedQuantTensor> quantized;

  Model dequantize() const {
    Model m = build_skeleton();
    for (const auto& [id, w] : full_precision) m.weight(id) = w;
    for (const auto& [id, q] : quantized) m.weight(id) = q.dequantize();
    return m;
  }

  Model build_skeleton() const {
    Model m;
    m.spec = spec;
    m.embedding = embedding;
    m.head = head;
    m.layers.resize(spec.num_layers);
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
      if (spec.is_moe_layer(l)) {
        m.layers[l].experts.resize(spec.num_experts);
        m.layers[l].shared.resize(spec.num_shared_experts);
      } else {
        m.layers[l].dense.emplace();
      }
    }
    return m;
  }

  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

/// Memo of quantized tensors keyed by (weight, bits) for one fixed set of
/// captures and options; lets strategy sweeps reuse shared work.
class QuantCache {
 public:
  std::optional<GroupedQuantTensor> find(const WeightId& id, int bits) const {
    std::lock_guard lock(mu_);
    auto it = map_.find({id, bits});
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }
  void put(const WeightId& id, int bits, const GroupedQuantTensor& q) {
    std::lock_guard lock(mu_);
    map_.emplace(std::pair{id, bits}, q);
  }

 private:
  mutable std::mutex mu_;
  std::map<std::pair<WeightId, int>, GroupedQuantTensor> map_;
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

}  // namespace detail

/// Quantizes every quantizable weight at its planned width with the given
/// backend, using the captured inputs for GPTQ.
inline QuantizedModel apply_plan(const Model& model, const BitPlan& plan, const LayerInputs& captures,
                                 const QuantOptions& options = {}, QuantCache* cache = nullptr) {
  validate_plan(plan, model.spec);
  QuantizedModel out;
  out.spec = model.spec;
  out.embedding = model.embedding;
  out.head = model.head;
  const auto ids = quantizable_ids(model.spec);
  for (const auto& id : all_weight_ids(model.spec))
    if (!id.quantizable()) out.full_precision.emplace(id, model.weight(id));

  std::vector<GroupedQuantTensor> results(ids.size());
  std::vector<std::exception_ptr> errors(ids.size());
  detail::parallel_for(ids.size(), [&](std::size_t i) {
    const WeightId& id = ids[i];
    const int bits = plan.bits_for(id);
    try {
      if (cache) {
        if (auto hit = cache->find(id, bits)) {
          results[i] = std::move(*hit);
          return;
        }
      }
      auto it = captures.find(id);
      results[i] = quantize_matrix(model.weight(id), it == captures.end() ? nullptr : &it->second, bits, options);
      if (cache) cache->put(id, bits, results[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  });
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw QuantizationError(ids[i], e.what());
    }
  }
  for (std::size_t i = 0; i < ids.size(); ++i) out.quantized.emplace(ids[i], std::move(results[i]));
  return out;
}

struct ParetoPoint {
  BitPlan plan;
  double avg_bits = 0.0;
  double metric = 0.0;  // lower is better
};

inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return (a.avg_bits <= b.avg_bits && a.metric < b.metric) || (a.avg_bits < b.avg_bits && a.metric <= b.metric);
}

/// Non-dominated points sorted by avg_bits (then metric).
inline std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].avg_bits != points[b].avg_bits) return points[a].avg_bits < points[b].avg_bits;
    return points[a].metric < points[b].metric;
  });
  // Sweep: a point survives iff its metric beats every point with strictly
  // fewer bits and it is the best among equal-bit points.
  std::vector<ParetoPoint> out;
  double best_before = INFINITY;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && points[order[j]].avg_bits == points[order[i]].avg_bits) ++j;
    const double group_best = points[order[i]].metric;
    if (group_best < best_before)
      for (std::size_t t = i; t < j && points[order[t]].metric == group_best; ++t) out.push_back(points[order[t]]);
    best_before = std::min(best_before, group_best);
    i = j;
  }
  return out;
}

}  // namespace moeq
