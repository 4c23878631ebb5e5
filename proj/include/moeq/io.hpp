#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "moeq/allocate.hpp"
#include "moeq/calibration.hpp"
#include "moeq/model.hpp"
#include "moeq/predictor.hpp"
#include "moeq/quant.hpp"

namespace moeq {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Container layouts (all integers and reals little-endian):
//
//   string  := u32 length, bytes
//   MOEQ1   := "MOEQ1" string(spec text) u32 count { string(name) u64 rows u64 cols f64[rows*cols] }
//   MOEQZ1  := "MOEQZ1" string(spec text) u32 count { string(name) u8 tag record }
//              tag 0: u64 rows u64 cols f64[rows*cols]
//              tag 1: u8 backend u8 bits u32 group_size u64 rows u64 cols
//                     f64 scales[rows*groups] u32 zeros[rows*groups] u64 n bytes[n]
//   CALQ1   := "CALQ1" u64 seed u8 source u32 count { u32 len u32 tokens[len] }
//   BSPQ1   := "BSPQ1" u32 count { u32 layer u32 d u32 h f64 w1[h*d] f64 b1[h] f64 w2[h] f64 b2
//                                  f64 final_mse }
//
// Weight records appear as "embedding", "head", then WeightId order.

class ByteWriter {
 public:
  void raw(std::string_view s) { buf_.append(s); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s);
  }
  void matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    for (double v : m.data()) f64(v);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  void expect(std::string_view magic) {
    if (take(magic.size()) != magic) throw FormatError("bad magic, expected " + std::string(magic));
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint32_t u32() {
    const auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(s[i])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    return std::string(take(n));
  }
  Matrix matrix() {
    const auto rows = u64(), cols = u64();
    if (cols != 0 && rows > remaining() / 8 / cols) throw FormatError("matrix larger than container");
    Matrix m(rows, cols);
    for (double& v : m.data()) v = f64();
    return m;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  void finish() const {
    if (remaining() != 0) throw FormatError("trailing bytes in container");
  }

 private:
  std::string_view take(std::size_t n) {
    if (n > remaining()) throw FormatError("unexpected end of container");
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// ---- spec text -------------------------------------------------------------

inline std::string spec_to_text(const ModelSpec& s) {
  std::ostringstream o;
  o << "vocab_size = " << s.vocab_size << "\n"
    << "hidden_dim = " << s.hidden_dim << "\n"
    << "ffnn_dim = " << s.ffnn_dim << "\n"
    << "num_layers = " << s.num_layers << "\n"
    << "num_experts = " << s.num_experts << "\n"
    << "top_k = " << s.top_k << "\n"
    << "num_shared_experts = " << s.num_shared_experts << "\n"
    << "first_layer_dense = " << (s.first_layer_dense ? "true" : "false") << "\n"
    << "seed = " << s.seed << "\n";
  return o.str();
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// `key = value` lines; '#' starts a comment. Missing keys keep defaults.
inline ModelSpec spec_from_text(std::string_view text) {
  ModelSpec s;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '[') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError("spec line without '=': " + t);
    const auto key = detail::trim(t.substr(0, eq));
    const auto val = detail::trim(t.substr(eq + 1));
    auto num = [&] {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(val, &used);
        if (used != val.size()) throw FormatError("");
        return v;
      } catch (const std::exception&) {
        throw FormatError("spec key '" + key + "' needs a non-negative integer, got '" + val + "'");
      }
    };
    if (key == "vocab_size") s.vocab_size = num();
    else if (key == "hidden_dim") s.hidden_dim = num();
    else if (key == "ffnn_dim") s.ffnn_dim = num();
    else if (key == "num_layers") s.num_layers = num();
    else if (key == "num_experts") s.num_experts = num();
    else if (key == "top_k") s.top_k = num();
    else if (key == "num_shared_experts") s.num_shared_experts = num();
    else if (key == "seed") s.seed = num();
    else if (key == "first_layer_dense") {
      if (val == "true" || val == "1") s.first_layer_dense = true;
      else if (val == "false" || val == "0") s.first_layer_dense = false;
      else throw FormatError("first_layer_dense must be true or false");
    } else {
      throw FormatError("unknown spec key '" + key + "'");
    }
  }
  return s;
}

/// FNV-1a over the canonical spec text.
inline std::uint64_t spec_hash(const ModelSpec& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : spec_to_text(s)) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

// ---- model containers ------------------------------------------------------

inline std::string serialize_model(const Model& m) {
  ByteWriter w;
  w.raw("MOEQ1");
  w.str(spec_to_text(m.spec));
  const auto ids = all_weight_ids(m.spec);
  w.u32(static_cast<std::uint32_t>(ids.size() + 2));
  w.str("embedding");
  w.matrix(m.embedding);
  w.str("head");
  w.matrix(m.head);
  for (const auto& id : ids) {
    w.str(id.str());
    w.matrix(m.weight(id));
  }
  return w.bytes();
}

namespace detail {

inline void check_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) throw FormatError("record " + name + " has the wrong shape");
}

}  // namespace detail

inline Model deserialize_model(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect("MOEQ1");
  const ModelSpec spec = spec_from_text(r.str());
  spec.validate();
  QuantizedModel shell;
  shell.spec = spec;
  Model m = shell.build_skeleton();
  const auto ids = all_weight_ids(spec);
  const auto count = r.u32();
  if (count != ids.size() + 2) throw FormatError("model container record count mismatch");
  if (r.str() != "embedding") throw FormatError("expected embedding record");
  m.embedding = r.matrix();
  detail::check_shape(m.embedding, spec.vocab_size, spec.hidden_dim, "embedding");
  if (r.str() != "head") throw FormatError("expected head record");
  m.head = r.matrix();
  detail::check_shape(m.head, spec.vocab_size, spec.hidden_dim, "head");
  for (const auto& id : ids) {
    if (r.str() != id.str()) throw FormatError("expected record " + id.str());
    m.weight(id) = r.matrix();
    const auto s = weight_shape(spec, id);
    detail::check_shape(m.weight(id), s.rows, s.cols, id.str());
  }
  r.finish();
  return m;
}

/// Codes packed LSB-first: code i occupies bits [i·bits, (i+1)·bits).
inline std::vector<std::uint8_t> pack_codes(const std::vector<std::uint8_t>& codes, int bits) {
  std::vector<std::uint8_t> out((codes.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t bit = 0;
  for (auto c : codes) {
    for (int b = 0; b < bits; ++b, ++bit)
      if (c >> b & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_codes(const std::vector<std::uint8_t>& packed, std::size_t count, int bits) {
  if (packed.size() != (count * static_cast<std::size_t>(bits) + 7) / 8) throw FormatError("packed code length mismatch");
  std::vector<std::uint8_t> out(count, 0);
  std::size_t bit = 0;
  for (auto& c : out)
    for (int b = 0; b < bits; ++b, ++bit)
      if (packed[bit / 8] >> (bit % 8) & 1u) c |= static_cast<std::uint8_t>(1u << b);
  return out;
}

inline std::string serialize_quantized(const QuantizedModel& q) {
  ByteWriter w;
  w.raw("MOEQZ1");
  w.str(spec_to_text(q.spec));
  w.u32(static_cast<std::uint32_t>(2 + q.full_precision.size() + q.quantized.size()));
  auto fp = [&](const std::string& name, const Matrix& m) {
    w.str(name);
    w.u8(0);
    w.matrix(m);
  };
  fp("embedding", q.embedding);
  fp("head", q.head);
  for (const auto& id : all_weight_ids(q.spec)) {
    if (auto it = q.full_precision.find(id); it != q.full_precision.end()) {
      fp(id.str(), it->second);
      continue;
    }
    auto it = q.quantized.find(id);
    if (it == q.quantized.end()) continue;
    const auto& t = it->second;
    w.str(id.str());
    w.u8(1);
    w.u8(static_cast<std::uint8_t>(t.backend));
    w.u8(static_cast<std::uint8_t>(t.bits));
    w.u32(static_cast<std::uint32_t>(t.group_size));
    w.u64(t.rows);
    w.u64(t.cols);
    for (double s : t.scales) w.f64(s);
    for (auto z : t.zeros) w.u32(z);
    const auto packed = pack_codes(t.codes, t.bits);
    w.u64(packed.size());
    w.raw(std::string_view(reinterpret_cast<const char*>(packed.data()), packed.size()));
  }
  return w.bytes();
}

inline QuantizedModel deserialize_quantized(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect("MOEQZ1");
  QuantizedModel q;
  q.spec = spec_from_text(r.str());
  q.spec.validate();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const auto tag = r.u8();
    if (tag == 0) {
      Matrix m = r.matrix();
      if (name == "embedding") q.embedding = std::move(m);
      else if (name == "head") q.head = std::move(m);
      else q.full_precision.emplace(WeightId::parse(name), std::move(m));
      continue;
    }
    if (tag != 1) throw FormatError("unknown record tag in " + name);
    GroupedQuantTensor t;
    const auto backend = r.u8();
    if (backend > 1) throw FormatError("unknown backend tag in " + name);
    t.backend = static_cast<Backend>(backend);
    t.bits = r.u8();
    if (!valid_bits(t.bits)) throw FormatError("invalid bits in " + name);
    t.group_size = r.u32();
    if (t.group_size == 0) throw FormatError("zero group size in " + name);
    t.rows = r.u64();
    t.cols = r.u64();
    if (t.cols != 0 && t.rows > r.remaining() / t.cols) throw FormatError("tensor larger than container: " + name);
    const std::size_t groups = t.rows * t.groups_per_row();
    if (groups > r.remaining() / 12) throw FormatError("group table larger than container: " + name);
    t.scales.resize(groups);
    for (double& s : t.scales) s = r.f64();
    t.zeros.resize(groups);
    for (auto& z : t.zeros) z = r.u32();
    const auto n = r.u64();
    if (n > r.remaining()) throw FormatError("code block larger than container: " + name);
    std::vector<std::uint8_t> packed(n);
    for (auto& b : packed) b = r.u8();
    t.codes = unpack_codes(packed, t.rows * t.cols, t.bits);
    q.quantized.emplace(WeightId::parse(name), std::move(t));
  }
  r.finish();
  return q;
}

// ---- calibration container -------------------------------------------------

inline std::string serialize_calibration(const CalibrationSet& c) {
  ByteWriter w;
  w.raw("CALQ1");
  w.u64(c.seed);
  w.u8(static_cast<std::uint8_t>(c.source));
  w.u32(static_cast<std::uint32_t>(c.sequences.size()));
  for (const auto& s : c.sequences) {
    w.u32(static_cast<std::uint32_t>(s.size()));
    for (auto t : s) w.u32(t);
  }
  return w.bytes();
}

inline CalibrationSet deserialize_calibration(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect("CALQ1");
  CalibrationSet c;
  c.seed = r.u64();
  const auto src = r.u8();
  if (src > 2) throw FormatError("unknown calibration source tag");
  c.source = static_cast<CorpusSource>(src);
  c.sequences.resize(r.u32());
  for (auto& s : c.sequences) {
    const auto n = r.u32();
    if (n > r.remaining() / 4) throw FormatError("sequence longer than container");
    s.resize(n);
    for (auto& t : s) t = r.u32();
  }
  r.finish();
  return c;
}

/// Whitespace-separated token ids, one sequence per line.
inline CalibrationSet calibration_from_token_text(std::string_view text) {
  CalibrationSet c;
  c.source = CorpusSource::file;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::uint32_t> seq;
    std::uint64_t t = 0;
    while (ls >> t) seq.push_back(static_cast<std::uint32_t>(t));
    if (!ls.eof()) throw FormatError("token file: non-numeric entry");
    if (!seq.empty()) c.sequences.push_back(std::move(seq));
  }
  return c;
}

// ---- predictor container ---------------------------------------------------

inline std::string serialize_predictor(const BlockScorePredictor& bsp) {
  ByteWriter w;
  w.raw("BSPQ1");
  w.u32(static_cast<std::uint32_t>(bsp.blocks.size()));
  for (const auto& [layer, p] : bsp.blocks) {
    w.u32(static_cast<std::uint32_t>(layer));
    w.u32(static_cast<std::uint32_t>(p.input_dim()));
    w.u32(static_cast<std::uint32_t>(p.hidden()));
    for (double v : p.w1.data()) w.f64(v);
    for (double v : p.b1) w.f64(v);
    for (double v : p.w2) w.f64(v);
    w.f64(p.b2);
    w.f64(p.final_mse);
  }
  return w.bytes();
}

inline BlockScorePredictor deserialize_predictor(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect("BSPQ1");
  BlockScorePredictor bsp;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto layer = r.u32();
    const auto d = r.u32();
    const auto h = r.u32();
    if (static_cast<std::uint64_t>(h) * (d + 2) > r.remaining() / 8) throw FormatError("predictor larger than container");
    BlockPredictor p;
    p.w1 = Matrix(h, d);
    for (double& v : p.w1.data()) v = r.f64();
    p.b1.resize(h);
    for (double& v : p.b1) v = r.f64();
    p.w2.resize(h);
    for (double& v : p.w2) v = r.f64();
    p.b2 = r.f64();
    p.final_mse = r.f64();
    bsp.blocks.emplace(layer, std::move(p));
  }
  r.finish();
  return bsp;
}

// ---- text formats ----------------------------------------------------------

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.emplace_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline double parse_real(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw FormatError("");
    return v;
  } catch (const std::exception&) {
    throw FormatError("expected a number, got '" + s + "'");
  }
}

}  // namespace detail

/// Canonical plan text: header lines, then `<WeightId> <bits>` in id order.
inline std::string plan_to_text(const BitPlan& plan) {
  std::string out = "# moeq bit plan v1\n";
  out += "default_bits " + std::to_string(plan.default_bits) + "\n";
  out += "provenance ";
  for (std::size_t i = 0; i < plan.provenance.size(); ++i) out += (i ? "," : "") + plan.provenance[i];
  out += "\n";
  for (const auto& [id, bits] : plan.assignments) out += id.str() + " " + std::to_string(bits) + "\n";
  return out;
}

inline BitPlan plan_from_text(std::string_view text) {
  BitPlan plan;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string val = sp == std::string::npos ? "" : line.substr(sp + 1);
    if (key == "default_bits") {
      plan.default_bits = static_cast<int>(detail::parse_real(val));
      if (!valid_bits(plan.default_bits)) throw FormatError("invalid default bits");
    } else if (key == "provenance") {
      plan.provenance.clear();
      if (!val.empty()) plan.provenance = detail::split(val, ',');
    } else {
      const double bits = detail::parse_real(val);
      if (!valid_bits(static_cast<int>(bits)) || bits != static_cast<int>(bits)) throw FormatError("invalid bits in: " + line);
      plan.assignments[WeightId::parse(key)] = static_cast<int>(bits);
    }
  }
  return plan;
}

/// `layer <l> <usage_0> ... <usage_{e-1}>` per MoE block.
inline std::string usage_to_text(const UsageProfile& u) {
  std::string out = "# moeq expert usage v1\n";
  for (const auto& [layer, v] : u.blocks) {
    out += "layer " + std::to_string(layer);
    for (double x : v) out += " " + format_real(x);
    out += "\n";
  }
  return out;
}

inline UsageProfile usage_from_text(std::string_view text) {
  UsageProfile u;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    std::size_t layer = 0;
    if (!(ls >> tag >> layer) || tag != "layer") throw FormatError("usage line must start with 'layer <index>'");
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) v.push_back(detail::parse_real(tok));
    u.blocks[layer] = std::move(v);
  }
  return u;
}

/// `outlier <WeightId> <score>` and `block <layer> <score>` lines.
inline std::string scores_to_text(const OutlierScoreTable* outlier, const std::map<std::size_t, double>* blocks) {
  std::string out = "# moeq scores v1\n";
  if (outlier)
    for (const auto& [id, s] : *outlier) out += "outlier " + id.str() + " " + format_real(s) + "\n";
  if (blocks)
    for (const auto& [l, s] : *blocks) out += "block " + std::to_string(l) + " " + format_real(s) + "\n";
  return out;
}

inline void scores_from_text(std::string_view text, OutlierScoreTable& outlier, std::map<std::size_t, double>& blocks) {
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag, key, val;
    if (!(ls >> tag >> key >> val)) throw FormatError("malformed score line: " + line);
    if (tag == "outlier") outlier[WeightId::parse(key)] = detail::parse_real(val);
    else if (tag == "block") blocks[static_cast<std::size_t>(detail::parse_real(key))] = detail::parse_real(val);
    else throw FormatError("unknown score tag '" + tag + "'");
  }
}

}  // namespace moeq
