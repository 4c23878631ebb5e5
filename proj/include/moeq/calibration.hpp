#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "moeq/model.hpp"
#include "moeq/numerics.hpp"

namespace moeq {

enum class CorpusSource : std::uint8_t { synthetic_markov = 0, file = 1, model_sampled = 2 };

struct CalibrationSet {
  std::vector<std::vector<std::uint32_t>> sequences;
  std::uint64_t seed = 0;
  CorpusSource source = CorpusSource::synthetic_markov;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }

  void validate(std::size_t vocab_size) const {
    for (const auto& s : sequences) {
      if (s.empty()) throw std::invalid_argument("calibration sequence is empty");
      for (auto t : s)
        if (t >= vocab_size) throw TokenOutOfRange("calibration token " + std::to_string(t) + " out of vocabulary");
    }
  }

  friend bool operator==(const CalibrationSet&, const CalibrationSet&) = default;
};

namespace detail {

inline std::uint32_t sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<std::uint32_t>(i);
  }
  return static_cast<std::uint32_t>(probs.size() - 1);
}

inline void softmax_inplace(std::span<double> v) {
  double mx = v[0];
  for (double x : v) mx = std::max(mx, x);
  double z = 0.0;
  for (double& x : v) z += (x = std::exp(x - mx));
  for (double& x : v) x /= z;
}

}  // namespace detail

/// Order-1 Markov corpus. The transition matrix rows are softmax(2·N(0,1))
/// draws from the same seeded stream, so successor statistics are skewed.
inline CalibrationSet generate_calibration(std::uint64_t seed, std::size_t n_sequences, std::size_t seq_len,
                                           std::size_t vocab_size) {
  if (n_sequences < 1 || seq_len < 1 || vocab_size < 1)
    throw std::invalid_argument("generate_calibration: counts must be >= 1");
  Rng rng(seed);
  Matrix transition(vocab_size, vocab_size);
  for (std::size_t r = 0; r < vocab_size; ++r) {
    auto row = transition.row(r);
    for (double& v : row) v = 2.0 * rng.normal();
    detail::softmax_inplace(row);
  }
  CalibrationSet set;
  set.seed = seed;
  set.source = CorpusSource::synthetic_markov;
  set.sequences.resize(n_sequences);
  for (auto& seq : set.sequences) {
    seq.reserve(seq_len);
    seq.push_back(static_cast<std::uint32_t>(rng.below(vocab_size)));
    while (seq.size() < seq_len) seq.push_back(detail::sample_categorical(transition.row(seq.back()), rng));
  }
  return set;
}

/// Corpus drawn autoregressively from the model itself (first token uniform).
/// Used for evaluation: the reference model is then the data distribution, so
/// any perturbation of its weights raises expected perplexity.
inline CalibrationSet sample_from_model(const Model& model, std::uint64_t seed, std::size_t n_sequences,
                                        std::size_t seq_len) {
  if (n_sequences < 1 || seq_len < 1) throw std::invalid_argument("sample_from_model: counts must be >= 1");
  Rng rng(seed);
  CalibrationSet set;
  set.seed = seed;
  set.source = CorpusSource::model_sampled;
  set.sequences.resize(n_sequences);
  for (auto& seq : set.sequences) {
    seq.push_back(static_cast<std::uint32_t>(rng.below(model.spec.vocab_size)));
    while (seq.size() < seq_len) {
      const Matrix logits = forward(model, seq);
      std::vector<double> p(logits.row(logits.rows() - 1).begin(), logits.row(logits.rows() - 1).end());
      detail::softmax_inplace(p);
      seq.push_back(detail::sample_categorical(p, rng));
    }
  }
  return set;
}

/// Runs every sequence through the model, merging captures in sequence order.
inline Trace run_trace(const Model& model, const CalibrationSet& calib, bool inputs, bool routes, bool block_io) {
  calib.validate(model.spec.vocab_size);
  Trace trace;
  trace.record_inputs = inputs;
  trace.record_routes = routes;
  trace.record_block_io = block_io;
  for (const auto& seq : calib.sequences) forward(model, seq, &trace);
  return trace;
}

using LayerInputs = std::map<WeightId, Matrix>;

/// Stacked input rows per quantizable weight. Experts see only the tokens
/// routed to them; a never-routed expert gets a 0-row matrix.
inline LayerInputs capture_layer_inputs(const Model& model, const CalibrationSet& calib) {
  Trace trace = run_trace(model, calib, true, false, false);
  LayerInputs out;
  for (const auto& id : quantizable_ids(model.spec)) {
    auto it = trace.layer_inputs.find(id);
    if (it != trace.layer_inputs.end()) {
      out.emplace(id, std::move(it->second));
    } else {
      out.emplace(id, Matrix(0, weight_shape(model.spec, id).cols));
    }
  }
  return out;
}

/// Normalized top-k selection counts per MoE layer (binary selection).
struct UsageProfile {
  std::map<std::size_t, std::vector<double>> blocks;

  friend bool operator==(const UsageProfile&, const UsageProfile&) = default;
};

inline UsageProfile usage_from_routes(const std::map<std::size_t, std::vector<Routing>>& routes,
                                      std::size_t num_experts) {
  UsageProfile profile;
  for (const auto& [layer, per_token] : routes) {
    std::vector<double> counts(num_experts, 0.0);
    double total = 0.0;
    for (const auto& r : per_token)
      for (auto e : r.experts) counts[e] += 1.0, total += 1.0;
    if (total == 0.0) throw EmptyCalibration("usage profile: no routed tokens in layer " + std::to_string(layer));
    for (double& c : counts) c /= total;
    profile.blocks.emplace(layer, std::move(counts));
  }
  return profile;
}

inline UsageProfile profile_usage(const Model& model, const CalibrationSet& calib) {
  if (calib.token_count() == 0) throw EmptyCalibration("profile_usage: calibration set has no tokens");
  Trace trace = run_trace(model, calib, false, true, false);
  return usage_from_routes(trace.routes, model.spec.num_experts);
}

/// Per MoE layer, (input, output) residual-stream pairs, one per token.
using BlockTrace = std::map<std::size_t, Trace::BlockIo>;

inline BlockTrace capture_block_io(const Model& model, const CalibrationSet& calib) {
  Trace trace = run_trace(model, calib, false, false, true);
  return std::move(trace.block_io);
}

}  // namespace moeq
