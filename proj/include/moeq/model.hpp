#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "moeq/numerics.hpp"

namespace moeq {

struct InvalidSpec : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct TokenOutOfRange : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct ModelSpec {
  std::size_t vocab_size = 64;
  std::size_t hidden_dim = 32;
  std::size_t ffnn_dim = 32;
  std::size_t num_layers = 4;
  std::size_t num_experts = 8;
  std::size_t top_k = 2;
  std::size_t num_shared_experts = 0;
  bool first_layer_dense = false;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 1 || hidden_dim < 1 || ffnn_dim < 1 || num_layers < 1 || num_experts < 1)
      throw InvalidSpec("all model dimensions must be >= 1");
    if (top_k < 1 || top_k > num_experts) throw InvalidSpec("top_k must lie in [1, num_experts]");
  }

  bool is_moe_layer(std::size_t layer) const { return !(first_layer_dense && layer == 0); }

  std::vector<std::size_t> moe_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t l = 0; l < num_layers; ++l)
      if (is_moe_layer(l)) out.push_back(l);
    return out;
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class WeightKind : std::uint8_t { attention, router, dense, expert, shared_expert };

inline std::string_view kind_name(WeightKind k) {
  switch (k) {
    case WeightKind::attention: return "attn";
    case WeightKind::router: return "router";
    case WeightKind::dense: return "dense";
    case WeightKind::expert: return "expert";
    case WeightKind::shared_expert: return "shared";
  }
  return "?";
}

/// Addresses one weight matrix. Ordered by (layer, kind, expert, projection).
struct WeightId {
  std::uint32_t layer = 0;
  WeightKind kind = WeightKind::attention;
  std::optional<std::uint32_t> expert;
  std::string projection;

  auto operator<=>(const WeightId&) const = default;
  bool operator==(const WeightId&) const = default;

  bool is_ffnn_expert() const {
    return kind == WeightKind::expert || kind == WeightKind::shared_expert;
  }
  bool quantizable() const { return kind != WeightKind::router; }

  /// e.g. "L1.attn.q", "L0.router.w", "L2.expert5.down", "L3.shared0.gate".
  std::string str() const {
    std::string s = "L" + std::to_string(layer) + "." + std::string(kind_name(kind));
    if (expert) s += std::to_string(*expert);
    s += "." + projection;
    return s;
  }

  static WeightId parse(std::string_view text) {
    auto fail = [&] { return std::invalid_argument("malformed weight id '" + std::string(text) + "'"); };
    if (text.size() < 2 || text[0] != 'L') throw fail();
    const auto dot1 = text.find('.');
    const auto dot2 = text.rfind('.');
    if (dot1 == std::string_view::npos || dot2 == dot1) throw fail();
    WeightId id;
    try {
      id.layer = static_cast<std::uint32_t>(std::stoul(std::string(text.substr(1, dot1 - 1))));
    } catch (const std::exception&) {
      throw fail();
    }
    std::string_view mid = text.substr(dot1 + 1, dot2 - dot1 - 1);
    id.projection = std::string(text.substr(dot2 + 1));
    const auto digits = mid.find_first_of("0123456789");
    const std::string_view name = mid.substr(0, digits);
    bool found = false;
    for (auto k : {WeightKind::attention, WeightKind::router, WeightKind::dense, WeightKind::expert,
                   WeightKind::shared_expert}) {
      if (kind_name(k) == name) {
        id.kind = k;
        found = true;
      }
    }
    if (!found || id.projection.empty()) throw fail();
    if (digits != std::string_view::npos)
      id.expert = static_cast<std::uint32_t>(std::stoul(std::string(mid.substr(digits))));
    if (id.is_ffnn_expert() != id.expert.has_value()) throw fail();
    return id;
  }
};

inline const std::vector<std::string>& attention_projections() {
  static const std::vector<std::string> p{"q", "k", "v", "o"};
  return p;
}
inline const std::vector<std::string>& ffnn_projections() {
  static const std::vector<std::string> p{"gate", "up", "down"};
  return p;
}

/// SiLU-gated feed-forward: down(silu(gate·x) ⊙ up·x).
struct Ffnn {
  Matrix gate;  // ffnn × d
  Matrix up;    // ffnn × d
  Matrix down;  // d × ffnn

  Matrix& by_name(std::string_view p) {
    if (p == "gate") return gate;
    if (p == "up") return up;
    if (p == "down") return down;
    throw std::invalid_argument("unknown ffnn projection '" + std::string(p) + "'");
  }
  const Matrix& by_name(std::string_view p) const { return const_cast<Ffnn*>(this)->by_name(p); }
};

struct Layer {
  Matrix q, k, v, o;           // d × d
  std::optional<Ffnn> dense;   // set only for a dense first layer
  Matrix router;               // e × d (empty for a dense layer)
  Matrix router_bias;          // 1 × e routing-logit offset, zero unless skewed
  std::vector<Ffnn> experts;
  std::vector<Ffnn> shared;
};

/// Every weight id of a spec, in total order. Routers included.
inline std::vector<WeightId> all_weight_ids(const ModelSpec& spec) {
  std::vector<WeightId> ids;
  for (std::uint32_t l = 0; l < spec.num_layers; ++l) {
    for (const auto& p : attention_projections()) ids.push_back({l, WeightKind::attention, {}, p});
    if (!spec.is_moe_layer(l)) {
      for (const auto& p : ffnn_projections()) ids.push_back({l, WeightKind::dense, {}, p});
      continue;
    }
    ids.push_back({l, WeightKind::router, {}, "bias"});
    ids.push_back({l, WeightKind::router, {}, "w"});
    for (std::uint32_t e = 0; e < spec.num_experts; ++e)
      for (const auto& p : ffnn_projections()) ids.push_back({l, WeightKind::expert, e, p});
    for (std::uint32_t s = 0; s < spec.num_shared_experts; ++s)
      for (const auto& p : ffnn_projections()) ids.push_back({l, WeightKind::shared_expert, s, p});
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<WeightId> quantizable_ids(const ModelSpec& spec) {
  auto ids = all_weight_ids(spec);
  std::erase_if(ids, [](const WeightId& id) { return !id.quantizable(); });
  return ids;
}

/// Routed and shared expert projections (the outlier-scored population).
inline std::vector<WeightId> ffnn_expert_ids(const ModelSpec& spec) {
  auto ids = all_weight_ids(spec);
  std::erase_if(ids, [](const WeightId& id) { return !id.is_ffnn_expert(); });
  return ids;
}

inline bool has_weight(const ModelSpec& spec, const WeightId& id) {
  if (id.layer >= spec.num_layers) return false;
  const auto ids = all_weight_ids(spec);
  return std::binary_search(ids.begin(), ids.end(), id);
}

struct Shape {
  std::size_t rows = 0, cols = 0;
};

inline Shape weight_shape(const ModelSpec& spec, const WeightId& id) {
  const std::size_t d = spec.hidden_dim, f = spec.ffnn_dim;
  switch (id.kind) {
    case WeightKind::attention: return {d, d};
    case WeightKind::router: return id.projection == "bias" ? Shape{1, spec.num_experts} : Shape{spec.num_experts, d};
    default: return id.projection == "down" ? Shape{d, f} : Shape{f, d};
  }
}

inline std::size_t parameter_count(const ModelSpec& spec, const WeightId& id) {
  const auto s = weight_shape(spec, id);
  return s.rows * s.cols;
}

struct Model {
  ModelSpec spec;
  Matrix embedding;  // vocab × d
  std::vector<Layer> layers;
  Matrix head;  // vocab × d

  Matrix& weight(const WeightId& id) {
    if (id.layer >= layers.size()) throw std::out_of_range("no such layer in " + id.str());
    Layer& layer = layers[id.layer];
    switch (id.kind) {
      case WeightKind::attention:
        if (id.projection == "q") return layer.q;
        if (id.projection == "k") return layer.k;
        if (id.projection == "v") return layer.v;
        if (id.projection == "o") return layer.o;
        break;
      case WeightKind::router:
        if (!spec.is_moe_layer(id.layer)) break;
        if (id.projection == "w") return layer.router;
        if (id.projection == "bias") return layer.router_bias;
        break;
      case WeightKind::dense:
        if (layer.dense) return layer.dense->by_name(id.projection);
        break;
      case WeightKind::expert:
        if (id.expert && *id.expert < layer.experts.size()) return layer.experts[*id.expert].by_name(id.projection);
        break;
      case WeightKind::shared_expert:
        if (id.expert && *id.expert < layer.shared.size()) return layer.shared[*id.expert].by_name(id.projection);
        break;
    }
    throw std::out_of_range("model has no weight " + id.str());
  }
  const Matrix& weight(const WeightId& id) const { return const_cast<Model*>(this)->weight(id); }
};

/// Weights ~ uniform(-1/sqrt(d), 1/sqrt(d)), drawn in the order embedding,
/// all_weight_ids(spec), head. Router biases start at zero and draw nothing.
inline Model build_model(const ModelSpec& spec) {
  spec.validate();
  Model m;
  m.spec = spec;
  m.layers.resize(spec.num_layers);
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    if (spec.is_moe_layer(l)) {
      m.layers[l].experts.resize(spec.num_experts);
      m.layers[l].shared.resize(spec.num_shared_experts);
    } else {
      m.layers[l].dense.emplace();
    }
  }
  Rng rng(spec.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(spec.hidden_dim));
  m.embedding = random_uniform(spec.vocab_size, spec.hidden_dim, -bound, bound, rng);
  for (const auto& id : all_weight_ids(spec)) {
    const auto s = weight_shape(spec, id);
    if (id.kind == WeightKind::router && id.projection == "bias") {
      m.weight(id) = Matrix(s.rows, s.cols);
      continue;
    }
    m.weight(id) = random_uniform(s.rows, s.cols, -bound, bound, rng);
  }
  m.head = random_uniform(spec.vocab_size, spec.hidden_dim, -bound, bound, rng);
  return m;
}

/// Raises expert `expert`'s routing logit by `offset` in every MoE block.
inline void skew_router(Model& model, std::size_t expert, double offset) {
  for (std::size_t l : model.spec.moe_layers()) model.layers[l].router_bias(0, expert) += offset;
}

struct Routing {
  std::vector<std::size_t> experts;  // descending probability, ties to lower index
  std::vector<double> gates;         // renormalized over the selection

  friend bool operator==(const Routing&, const Routing&) = default;
};

inline Routing route_logits(std::span<const double> logits, std::size_t k) {
  if (k < 1 || k > logits.size()) throw std::invalid_argument("route: k out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  Routing r;
  r.experts.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  double sel = 0.0;
  for (auto e : r.experts) sel += p[e];
  for (auto e : r.experts) r.gates.push_back(p[e] / sel);
  return r;
}

inline Routing route(const Matrix& router, std::span<const double> hidden, std::size_t k) {
  return route_logits(matvec(router, hidden), k);
}

inline Routing route(const Matrix& router, const Matrix& bias, std::span<const double> hidden, std::size_t k) {
  auto logits = matvec(router, hidden);
  if (!bias.empty())
    for (std::size_t e = 0; e < logits.size(); ++e) logits[e] += bias(0, e);
  return route_logits(logits, k);
}

/// Capture of one or more forward passes. Rows are appended in token order.
struct Trace {
  bool record_inputs = true;
  bool record_routes = true;
  bool record_block_io = true;

  std::map<WeightId, Matrix> layer_inputs;
  std::map<std::size_t, std::vector<Routing>> routes;  // per MoE layer, per token
  struct BlockIo {
    Matrix inputs;   // token × d, residual stream entering the block
    Matrix outputs;  // token × d, residual stream after the block
  };
  std::map<std::size_t, BlockIo> block_io;

  void add_inputs(const WeightId& id, const Matrix& x) {
    if (!record_inputs) return;
    auto [it, inserted] = layer_inputs.try_emplace(id, 0, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) it->second.append_row(x.row(r));
  }
};

namespace detail {

inline Matrix rms_norm(const Matrix& x) {
  Matrix out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    double ms = 0.0;
    for (double v : row) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(row.size()) + 1e-6);
    for (double& v : row) v *= inv;
  }
  return out;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline void add_inplace(Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

}  // namespace detail

/// Applies one FFNN to every row of `x`. `ids` (gate, up, down) name the
/// captured inputs when a trace is given.
inline Matrix ffnn_forward(const Ffnn& f, const Matrix& x, Trace* trace = nullptr,
                           const WeightId* gate_id = nullptr) {
  const Matrix g = matmul_transposed(x, f.gate);
  const Matrix u = matmul_transposed(x, f.up);
  Matrix inter(g.rows(), g.cols());
  for (std::size_t i = 0; i < inter.size(); ++i) inter.data()[i] = detail::silu(g.data()[i]) * u.data()[i];
  if (trace && gate_id) {
    WeightId id = *gate_id;
    trace->add_inputs(id, x);
    id.projection = "up";
    trace->add_inputs(id, x);
    id.projection = "down";
    trace->add_inputs(id, inter);
  }
  return matmul_transposed(inter, f.down);
}

/// Routed-expert block: Σ over the top-k selection of gate × FFNN(x), plus the
/// un-gated sum of shared experts. `x` holds normalized token states.
inline Matrix moe_block_forward(const Layer& block, std::size_t top_k, const Matrix& x,
                                Trace* trace = nullptr, std::uint32_t layer_index = 0) {
  const std::size_t tokens = x.rows();
  const std::size_t e = block.experts.size();
  Matrix out(tokens, x.cols());
  std::vector<std::vector<std::size_t>> members(e);
  std::vector<std::vector<double>> weights(e);
  for (std::size_t t = 0; t < tokens; ++t) {
    Routing r = route(block.router, block.router_bias, x.row(t), top_k);
    for (std::size_t j = 0; j < r.experts.size(); ++j) {
      members[r.experts[j]].push_back(t);
      weights[r.experts[j]].push_back(r.gates[j]);
    }
    if (trace && trace->record_routes) trace->routes[layer_index].push_back(std::move(r));
  }
  for (std::size_t ex = 0; ex < e; ++ex) {
    if (members[ex].empty()) continue;
    Matrix sub(members[ex].size(), x.cols());
    for (std::size_t i = 0; i < members[ex].size(); ++i) {
      auto src = x.row(members[ex][i]);
      std::copy(src.begin(), src.end(), sub.row(i).begin());
    }
    const WeightId id{layer_index, WeightKind::expert, static_cast<std::uint32_t>(ex), "gate"};
    const Matrix y = ffnn_forward(block.experts[ex], sub, trace, &id);
    for (std::size_t i = 0; i < members[ex].size(); ++i) {
      auto dst = out.row(members[ex][i]);
      auto src = y.row(i);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += weights[ex][i] * src[c];
    }
  }
  for (std::size_t s = 0; s < block.shared.size(); ++s) {
    const WeightId id{layer_index, WeightKind::shared_expert, static_cast<std::uint32_t>(s), "gate"};
    detail::add_inplace(out, ffnn_forward(block.shared[s], x, trace, &id));
  }
  return out;
}

namespace detail {

inline Matrix causal_attention(const Layer& layer, const Matrix& x, Trace* trace, std::uint32_t l) {
  const Matrix q = matmul_transposed(x, layer.q);
  const Matrix k = matmul_transposed(x, layer.k);
  const Matrix v = matmul_transposed(x, layer.v);
  if (trace) {
    for (const char* p : {"q", "k", "v"}) trace->add_inputs({l, WeightKind::attention, {}, p}, x);
  }
  const std::size_t n = x.rows(), d = x.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix ctx(n, d);
  std::vector<double> score(n);
  for (std::size_t t = 0; t < n; ++t) {
    double mx = -INFINITY;
    for (std::size_t s = 0; s <= t; ++s) {
      score[s] = dot(q.row(t), k.row(s)) * inv_sqrt_d;
      mx = std::max(mx, score[s]);
    }
    double z = 0.0;
    for (std::size_t s = 0; s <= t; ++s) z += (score[s] = std::exp(score[s] - mx));
    auto c = ctx.row(t);
    for (std::size_t s = 0; s <= t; ++s) {
      const double p = score[s] / z;
      auto vs = v.row(s);
      for (std::size_t j = 0; j < d; ++j) c[j] += p * vs[j];
    }
  }
  if (trace) trace->add_inputs({l, WeightKind::attention, {}, "o"}, ctx);
  return matmul_transposed(ctx, layer.o);
}

}  // namespace detail

/// Logits (tokens × vocab) for one sequence. Pre-norm residual layers:
/// h += attn(norm(h)); h += ffn(norm(h)); logits = head · norm(h).
inline Matrix forward(const Model& model, std::span<const std::uint32_t> tokens, Trace* trace = nullptr) {
  const auto& spec = model.spec;
  Matrix h(tokens.size(), spec.hidden_dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= spec.vocab_size)
      throw TokenOutOfRange("token id " + std::to_string(tokens[t]) + " >= vocab size " +
                            std::to_string(spec.vocab_size));
    auto src = model.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), h.row(t).begin());
  }
  for (std::uint32_t l = 0; l < spec.num_layers; ++l) {
    const Layer& layer = model.layers[l];
    detail::add_inplace(h, detail::causal_attention(layer, detail::rms_norm(h), trace, l));
    const Matrix xn = detail::rms_norm(h);
    Matrix m;
    if (layer.dense) {
      const WeightId id{l, WeightKind::dense, {}, "gate"};
      m = ffnn_forward(*layer.dense, xn, trace, &id);
    } else {
      m = moe_block_forward(layer, spec.top_k, xn, trace, l);
    }
    if (trace && trace->record_block_io && spec.is_moe_layer(l)) {
      auto& io = trace->block_io[l];
      if (io.inputs.cols() == 0) io.inputs = Matrix(0, spec.hidden_dim), io.outputs = Matrix(0, spec.hidden_dim);
      for (std::size_t t = 0; t < h.rows(); ++t) io.inputs.append_row(h.row(t));
      detail::add_inplace(h, m);
      for (std::size_t t = 0; t < h.rows(); ++t) io.outputs.append_row(h.row(t));
    } else {
      detail::add_inplace(h, m);
    }
  }
  return matmul_transposed(detail::rms_norm(h), model.head);
}

}  // namespace moeq
