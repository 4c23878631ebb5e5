#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "moeq/numerics.hpp"

namespace moeq {

enum class Backend : std::uint8_t { rtn = 0, gptq = 1 };

inline std::string backend_name(Backend b) { return b == Backend::rtn ? "rtn" : "gptq"; }

inline Backend parse_backend(const std::string& s) {
  if (s == "rtn") return Backend::rtn;
  if (s == "gptq") return Backend::gptq;
  throw std::invalid_argument("unknown backend '" + s + "'");
}

inline bool valid_bits(int bits) { return bits == 2 || bits == 3 || bits == 4 || bits == 8; }

inline void check_bits(int bits) {
  if (!valid_bits(bits)) throw std::invalid_argument("bits must be one of {2,3,4,8}, got " + std::to_string(bits));
}

/// Asymmetric grid: value = (code - zero) * scale, code in [0, 2^bits - 1].
struct AffineGrid {
  double scale = 1.0;
  std::uint32_t zero = 0;
  std::uint32_t max_code = 0;

  std::uint32_t encode(double v) const {
    const double c = std::round(v / scale) + static_cast<double>(zero);
    return static_cast<std::uint32_t>(std::clamp(c, 0.0, static_cast<double>(max_code)));
  }
  double decode(std::uint32_t code) const {
    return (static_cast<double>(code) - static_cast<double>(zero)) * scale;
  }
};

/// Fits the min/max grid of a group. The range is widened to contain 0 so
/// that every value lies within scale/2 of a grid point. A constant group c
/// gets scale |c| (1 when c = 0) with the zero point chosen so that c itself
/// is a grid point.
inline AffineGrid fit_grid(std::span<const double> values, int bits) {
  check_bits(bits);
  if (values.empty()) throw std::invalid_argument("fit_grid: empty group");
  AffineGrid g;
  g.max_code = (1u << bits) - 1u;
  if (!std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); }))
    throw NumericalError("fit_grid: non-finite value");
  const auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
  const double mn = *mn_it, mx = *mx_it;
  if (mn == mx) {
    g.scale = mn == 0.0 ? 1.0 : std::abs(mn);
    g.zero = mn < 0.0 ? 1u : 0u;
    return g;
  }
  const double lo = std::min(mn, 0.0), hi = std::max(mx, 0.0);
  g.scale = (hi - lo) / static_cast<double>(g.max_code);
  g.zero = static_cast<std::uint32_t>(std::clamp(std::round(-lo / g.scale), 0.0, static_cast<double>(g.max_code)));
  return g;
}

struct GroupCodes {
  std::vector<std::uint32_t> codes;
  double scale = 1.0;
  std::uint32_t zero_point = 0;
};

inline GroupCodes quantize_group_affine(std::span<const double> values, int bits) {
  const AffineGrid g = fit_grid(values, bits);
  GroupCodes out{{}, g.scale, g.zero};
  out.codes.reserve(values.size());
  for (double v : values) out.codes.push_back(g.encode(v));
  return out;
}

/// One weight matrix as integer codes plus per-(row, group) scale/zero.
struct GroupedQuantTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 4;
  std::size_t group_size = 128;
  Backend backend = Backend::rtn;
  std::vector<double> scales;         // rows × groups_per_row()
  std::vector<std::uint32_t> zeros;   // rows × groups_per_row()
  std::vector<std::uint8_t> codes;    // rows × cols

  std::size_t groups_per_row() const { return (cols + group_size - 1) / group_size; }

  AffineGrid grid(std::size_t r, std::size_t g) const {
    const std::size_t i = r * groups_per_row() + g;
    return {scales[i], zeros[i], (1u << bits) - 1u};
  }

  Matrix dequantize() const {
    Matrix w(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) w(r, c) = grid(r, c / group_size).decode(codes[r * cols + c]);
    return w;
  }

  friend bool operator==(const GroupedQuantTensor&, const GroupedQuantTensor&) = default;
};

namespace detail {

inline GroupedQuantTensor empty_tensor(const Matrix& w, int bits, std::size_t group_size, Backend backend) {
  check_bits(bits);
  if (group_size < 1) throw std::invalid_argument("group_size must be >= 1");
  GroupedQuantTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = bits;
  q.group_size = group_size;
  q.backend = backend;
  q.scales.resize(q.rows * q.groups_per_row());
  q.zeros.resize(q.rows * q.groups_per_row());
  q.codes.resize(q.rows * q.cols);
  return q;
}

}  // namespace detail

inline GroupedQuantTensor rtn_quantize(const Matrix& w, int bits, std::size_t group_size = 128) {
  GroupedQuantTensor q = detail::empty_tensor(w, bits, group_size, Backend::rtn);
  const std::size_t groups = q.groups_per_row();
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t begin = g * group_size;
      const std::size_t len = std::min(group_size, w.cols() - begin);
      const GroupCodes gc = quantize_group_affine(row.subspan(begin, len), bits);
      q.scales[r * groups + g] = gc.scale;
      q.zeros[r * groups + g] = gc.zero_point;
      for (std::size_t i = 0; i < len; ++i) q.codes[r * w.cols() + begin + i] = static_cast<std::uint8_t>(gc.codes[i]);
    }
  }
  return q;
}

/// H = 2·XᵀX + λI with λ = damp_ratio · mean(diag(2·XᵀX)). X holds one
/// calibration input per row.
inline Matrix damped_hessian(const Matrix& x, double damp_ratio) {
  Matrix h = gram(x);
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) mean_diag += 2.0 * h(i, i);
  mean_diag /= static_cast<double>(std::max<std::size_t>(h.rows(), 1));
  const double lambda = damp_ratio * (mean_diag > 0.0 ? mean_diag : 1.0);
  for (auto& v : h.data()) v *= 2.0;
  for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += lambda;
  return h;
}

/// GPTQ: columns in natural order; each column is rounded to its group's
/// grid and the rounding error is propagated to the later columns of the
/// same row through the upper Cholesky factor of H⁻¹. A group's grid is
/// fitted from the (already compensated) values when its first column is
/// reached.
inline GroupedQuantTensor gptq_quantize(const Matrix& w, const Matrix& x, int bits, std::size_t group_size = 128,
                                        double damp_ratio = 0.01) {
  if (x.rows() == 0) throw EmptyCalibration("gptq_quantize: calibration matrix has no rows");
  if (x.cols() != w.cols()) throw ShapeMismatch("gptq_quantize: calibration width != weight columns");
  if (!(damp_ratio > 0.0)) throw std::invalid_argument("gptq_quantize: damp_ratio must be > 0");
  GroupedQuantTensor q = detail::empty_tensor(w, bits, group_size, Backend::gptq);

  const Matrix hinv = cholesky_inverse(damped_hessian(x, damp_ratio));
  // Upper factor U with UᵀU = H⁻¹; row j carries the compensation weights
  // of column j after columns < j have been fixed.
  const Matrix u = cholesky(hinv).transposed();

  Matrix work = w;
  const std::size_t cols = w.cols(), groups = q.groups_per_row();
  std::vector<AffineGrid> grids(w.rows());
  for (std::size_t j = 0; j < cols; ++j) {
    const std::size_t g = j / group_size;
    if (j % group_size == 0) {
      const std::size_t len = std::min(group_size, cols - j);
      for (std::size_t r = 0; r < w.rows(); ++r) {
        grids[r] = fit_grid(work.row(r).subspan(j, len), bits);
        q.scales[r * groups + g] = grids[r].scale;
        q.zeros[r * groups + g] = grids[r].zero;
      }
    }
    const double d = u(j, j);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      auto row = work.row(r);
      const std::uint32_t code = grids[r].encode(row[j]);
      q.codes[r * cols + j] = static_cast<std::uint8_t>(code);
      const double err = (row[j] - grids[r].decode(code)) / d;
      for (std::size_t k = j + 1; k < cols; ++k) row[k] -= err * u(j, k);
    }
  }
  return q;
}

/// ‖(w − ŵ)·Xᵀ‖²_F with X one input per row.
inline double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  return frobenius_sq(matmul_transposed(w - w_hat, x));
}

/// trace(E·XᵀX·Eᵀ) for E = w − ŵ; equals reconstruction_error.
inline double hessian_objective(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  const Matrix e = w - w_hat;
  const Matrix eh = matmul(e, gram(x));
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) s += eh.data()[i] * e.data()[i];
  return s;
}

struct QuantOptions {
  Backend backend = Backend::gptq;
  std::size_t group_size = 128;
  double damp_ratio = 0.01;
};

/// Codec entry point used by plan application: RTN when no calibration rows
/// exist, and up to three 10× dampening retries on a failed factorization.
inline GroupedQuantTensor quantize_matrix(const Matrix& w, const Matrix* x, int bits, const QuantOptions& opt) {
  if (opt.backend == Backend::rtn || x == nullptr || x->rows() == 0) return rtn_quantize(w, bits, opt.group_size);
  double damp = opt.damp_ratio;
  for (int attempt = 0;; ++attempt) {
    try {
      return gptq_quantize(w, *x, bits, opt.group_size, damp);
    } catch (const NotPositiveDefinite&) {
      if (attempt == 3) throw;
      damp *= 10.0;
    }
  }
}

}  // namespace moeq
