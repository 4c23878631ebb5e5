#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "moeq/allocate.hpp"
#include "moeq/calibration.hpp"
#include "moeq/numerics.hpp"

namespace moeq {

struct EmptyTrace : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct PredictorConfig {
  std::size_t hidden = 64;
  std::size_t epochs = 50;
  double learning_rate = 1e-2;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

/// ŝ(x) = tanh(w2 · tanh(W1 x + b1) + b2) for one MoE block.
struct BlockPredictor {
  Matrix w1;               // hidden × d
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // hidden
  double b2 = 0.0;
  double final_mse = 0.0;
  std::vector<std::pair<std::size_t, double>> log;  // (epoch, full-set MSE)

  std::size_t hidden() const { return w1.rows(); }
  std::size_t input_dim() const { return w1.cols(); }

  double predict(std::span<const double> x) const {
    double o = b2;
    for (std::size_t j = 0; j < hidden(); ++j) o += w2[j] * std::tanh(dot(w1.row(j), x) + b1[j]);
    return std::tanh(o);
  }

  double mse(const Matrix& inputs, std::span<const double> targets) const {
    double s = 0.0;
    for (std::size_t i = 0; i < inputs.rows(); ++i) {
      const double e = predict(inputs.row(i)) - targets[i];
      s += e * e;
    }
    return s / static_cast<double>(inputs.rows());
  }
};

struct PredictorGradient {
  double loss = 0.0;
  Matrix w1;
  std::vector<double> b1;
  std::vector<double> w2;
  double b2 = 0.0;
};

/// Mean squared error over `rows` and its gradient with respect to every
/// parameter.
inline PredictorGradient loss_and_gradient(const BlockPredictor& p, const Matrix& inputs,
                                           std::span<const double> targets, std::span<const std::size_t> rows) {
  const std::size_t h = p.hidden(), d = p.input_dim();
  PredictorGradient g{0.0, Matrix(h, d), std::vector<double>(h, 0.0), std::vector<double>(h, 0.0), 0.0};
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  std::vector<double> z(h);
  for (auto i : rows) {
    auto x = inputs.row(i);
    double o = p.b2;
    for (std::size_t j = 0; j < h; ++j) o += p.w2[j] * (z[j] = std::tanh(dot(p.w1.row(j), x) + p.b1[j]));
    const double s = std::tanh(o);
    const double err = s - targets[i];
    g.loss += err * err * inv_n;
    const double go = 2.0 * err * inv_n * (1.0 - s * s);
    g.b2 += go;
    for (std::size_t j = 0; j < h; ++j) {
      g.w2[j] += go * z[j];
      const double ga = go * p.w2[j] * (1.0 - z[j] * z[j]);
      g.b1[j] += ga;
      auto grow = g.w1.row(j);
      for (std::size_t c = 0; c < d; ++c) grow[c] += ga * x[c];
    }
  }
  return g;
}

/// Mini-batch gradient descent on squared error. After each epoch the
/// full-set MSE is compared with the previous one; on an increase the epoch
/// is rolled back and the learning rate halved, so the logged losses never
/// increase.
inline BlockPredictor train_predictor(const Matrix& inputs, std::span<const double> targets,
                                      const PredictorConfig& cfg) {
  if (inputs.rows() == 0) throw EmptyTrace("train_predictor: no training rows");
  if (targets.size() != inputs.rows()) throw ShapeMismatch("train_predictor: one target per input row required");
  Rng rng(cfg.seed);
  BlockPredictor p;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(inputs.cols()));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
  p.w1 = random_uniform(cfg.hidden, inputs.cols(), -b1, b1, rng);
  p.b1.assign(cfg.hidden, 0.0);
  p.w2.resize(cfg.hidden);
  for (double& v : p.w2) v = rng.uniform(-b2, b2);

  double lr = cfg.learning_rate;
  double current = p.mse(inputs, targets);
  p.log.emplace_back(0, current);
  std::vector<std::size_t> order(inputs.rows());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const BlockPredictor snapshot = p;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(batch, order.size() - start);
      const auto g = loss_and_gradient(p, inputs, targets, std::span(order).subspan(start, len));
      for (std::size_t i = 0; i < p.w1.size(); ++i) p.w1.data()[i] -= lr * g.w1.data()[i];
      for (std::size_t j = 0; j < p.w2.size(); ++j) {
        p.w2[j] -= lr * g.w2[j];
        p.b1[j] -= lr * g.b1[j];
      }
      p.b2 -= lr * g.b2;
    }
    const double next = p.mse(inputs, targets);
    if (next > current || !std::isfinite(next)) {
      auto log = std::move(p.log);
      p = snapshot;
      p.log = std::move(log);
      lr *= 0.5;
    } else {
      current = next;
    }
    p.log.emplace_back(epoch, current);
  }
  p.final_mse = current;
  return p;
}

/// One predictor per MoE block, keyed by layer index.
struct BlockScorePredictor {
  std::map<std::size_t, BlockPredictor> blocks;
};

inline std::vector<double> cosine_targets(const Trace::BlockIo& io) {
  std::vector<double> s(io.inputs.rows());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = cosine(io.inputs.row(i), io.outputs.row(i));
  return s;
}

inline BlockScorePredictor train_block_predictor(const BlockTrace& trace, const PredictorConfig& cfg = {}) {
  if (trace.empty()) throw EmptyTrace("train_block_predictor: trace has no blocks");
  BlockScorePredictor bsp;
  for (const auto& [layer, io] : trace) {
    if (io.inputs.rows() == 0) throw EmptyTrace("train_block_predictor: block " + std::to_string(layer) + " is empty");
    PredictorConfig block_cfg = cfg;
    std::uint64_t mix = cfg.seed ^ (0x9e3779b97f4a7c15ULL * (layer + 1));
    block_cfg.seed = Rng::splitmix64(mix);
    const auto targets = cosine_targets(io);
    bsp.blocks.emplace(layer, train_predictor(io.inputs, targets, block_cfg));
  }
  return bsp;
}

/// Mean predicted score over every token input of each block.
inline std::map<std::size_t, double> predict_block_scores(const BlockScorePredictor& bsp,
                                                          const std::map<std::size_t, Matrix>& inputs) {
  std::map<std::size_t, double> out;
  for (const auto& [layer, x] : inputs) {
    auto it = bsp.blocks.find(layer);
    if (it == bsp.blocks.end()) throw std::invalid_argument("no predictor for block " + std::to_string(layer));
    if (x.rows() == 0) throw EmptyTrace("predict_block_scores: no inputs for block " + std::to_string(layer));
    double s = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) s += it->second.predict(x.row(i));
    out.emplace(layer, s / static_cast<double>(x.rows()));
  }
  return out;
}

inline std::map<std::size_t, double> predict_block_scores(const BlockScorePredictor& bsp, const BlockTrace& trace) {
  std::map<std::size_t, Matrix> inputs;
  for (const auto& [layer, io] : trace) inputs.emplace(layer, io.inputs);
  return predict_block_scores(bsp, inputs);
}

/// The k blocks with the lowest predicted score (most important) get hi bits
/// on every expert projection; ties go to the lower layer index.
inline BitPlan plan_predicted_blocks(const std::map<std::size_t, double>& scores, const ModelSpec& spec,
                                     std::size_t k, int hi = 4) {
  if (k > scores.size()) throw std::invalid_argument("plan_predicted_blocks: k exceeds scored blocks");
  std::vector<std::pair<double, std::size_t>> ranked;
  for (const auto& [layer, s] : scores) ranked.emplace_back(s, layer);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::size_t> chosen;
  for (std::size_t i = 0; i < k; ++i) chosen.push_back(ranked[i].second);
  std::sort(chosen.begin(), chosen.end());
  BitPlan plan = plan_blocks(spec, BlockSelection::listed, k, chosen, hi);
  plan.provenance = {"predicted:" + std::to_string(k)};
  return plan;
}

}  // namespace moeq
