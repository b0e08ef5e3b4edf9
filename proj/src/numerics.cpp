#include "helo/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "helo/error.hpp"

namespace helo {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged initializer for Matrix::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + a.shape_string() + " and " +
                         b.shape_string());
  }
}

void require_finite(const Matrix& m, const std::string& where) {
  if (!all_finite(m)) throw NumericalError("non-finite values in " + where);
}

// ------------------------------------------------------------------- matmul

namespace {

// out(i, :) += sum_k a(i, k) * b(k, :), i-k-j order for unit-stride inner loop.
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  const double* bp = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict orow = out.row(i).data();
    const double* arow = a.row(i).data();
    std::size_t k = 0;
    // Four rows of b per sweep; each element still accumulates in k order.
    for (; k + 4 <= inner; k += 4) {
      const double a0 = arow[k], a1 = arow[k + 1], a2 = arow[k + 2], a3 = arow[k + 3];
      const double* __restrict b0 = bp + k * m;
      const double* __restrict b1 = b0 + m;
      const double* __restrict b2 = b1 + m;
      const double* __restrict b3 = b2 + m;
      for (std::size_t j = 0; j < m; ++j) {
        double t = orow[j];
        t += a0 * b0[j];
        t += a1 * b1[j];
        t += a2 * b2[j];
        t += a3 * b3[j];
        orow[j] = t;
      }
    }
    for (; k < inner; ++k) {
      const double aik = arow[k];
      const double* __restrict brow = bp + k * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
}

// out += aᵀ b
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t inner = a.rows(), n = a.cols(), m = b.cols();
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict orow = out.row(i).data();
    std::size_t k = 0;
    for (; k + 4 <= inner; k += 4) {
      const double a0 = ap[k * n + i], a1 = ap[(k + 1) * n + i], a2 = ap[(k + 2) * n + i],
                   a3 = ap[(k + 3) * n + i];
      const double* __restrict b0 = bp + k * m;
      const double* __restrict b1 = b0 + m;
      const double* __restrict b2 = b1 + m;
      const double* __restrict b3 = b2 + m;
      for (std::size_t j = 0; j < m; ++j) {
        double t = orow[j];
        t += a0 * b0[j];
        t += a1 * b1[j];
        t += a2 * b2[j];
        t += a3 * b3[j];
        orow[j] = t;
      }
    }
    for (; k < inner; ++k) {
      const double aki = ap[k * n + i];
      const double* __restrict brow = bp + k * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aki * brow[j];
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul", a, b);
  Matrix out(a.rows(), b.cols());
  gemm_nn(a, b, out);
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows(), "matmul_tn", a, b);
  Matrix out(a.cols(), b.cols());
  gemm_tn(a, b, out);
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.cols(), "matmul_nt", a, b);
  const std::size_t n = a.rows(), m = b.rows(), inner = a.cols();
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* __restrict arow = a.row(i).data();
    for (std::size_t j = 0; j < m; ++j) {
      const double* __restrict brow = b.row(j).data();
      // Four interleaved partial sums, combined in a fixed order.
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t k = 0;
      for (; k + 4 <= inner; k += 4) {
        s0 += arow[k] * brow[k];
        s1 += arow[k + 1] * brow[k + 1];
        s2 += arow[k + 2] * brow[k + 2];
        s3 += arow[k + 3] * brow[k + 3];
      }
      for (; k < inner; ++k) s0 += arow[k] * brow[k];
      out(i, j) = (s0 + s1) + (s2 + s3);
    }
  }
  return out;
}

void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
  require_shape(a.cols() == b.rows(), "matmul_accumulate", a, b);
  require_shape(out.rows() == a.rows() && out.cols() == b.cols(), "matmul_accumulate", out, b);
  gemm_nn(a, b, out);
}

void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out) {
  require_shape(a.rows() == b.rows(), "matmul_tn_accumulate", a, b);
  require_shape(out.rows() == a.cols() && out.cols() == b.cols(), "matmul_tn_accumulate", out, b);
  gemm_tn(a, b, out);
}

// ------------------------------------------------------------- elementwise

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", a, b);
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  return out;
}

Matrix subtract(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "subtract", a, b);
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  return out;
}

Matrix scale(const Matrix& a, double factor) {
  Matrix out = a;
  for (double& x : out.values()) x *= factor;
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", a, b);
  Matrix out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return out;
}

void axpy(double alpha, const Matrix& source, Matrix& target) {
  require_shape(source.rows() == target.rows() && source.cols() == target.cols(), "axpy", source,
                target);
  auto t = target.values();
  auto s = source.values();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += alpha * s[i];
}

Matrix add_row_bias(const Matrix& x, const Matrix& bias) {
  require_shape(bias.rows() == 1 && bias.cols() == x.cols(), "add_row_bias", x, bias);
  Matrix out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias(0, j);
  }
  return out;
}

Matrix column_sums(const Matrix& x) {
  Matrix out(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out(0, j) += r[j];
  }
  return out;
}

Matrix row_mean(const Matrix& x) {
  Matrix out = column_sums(x);
  if (x.rows() > 0) {
    const double inv = 1.0 / static_cast<double>(x.rows());
    for (double& v : out.values()) v *= inv;
  }
  return out;
}

Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_shape(p.cols() == cols, "vstack", parts.front(), p);
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
  return Matrix(rows, cols, std::move(data));
}

Matrix slice_rows(const Matrix& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of range for " + x.shape_string());
  }
  const auto v = x.values();
  std::vector<double> data(v.begin() + static_cast<std::ptrdiff_t>(begin * x.cols()),
                           v.begin() + static_cast<std::ptrdiff_t>((begin + count) * x.cols()));
  return Matrix(count, x.cols(), std::move(data));
}

Matrix slice_cols(const Matrix& x, std::size_t begin, std::size_t count) {
  if (begin + count > x.cols()) {
    throw DimensionError("slice_cols: out of range for " + x.shape_string());
  }
  Matrix out(x.rows(), count);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = x(i, begin + j);
  return out;
}

void set_cols(Matrix& target, std::size_t begin, const Matrix& block) {
  require_shape(block.rows() == target.rows() && begin + block.cols() <= target.cols(), "set_cols",
                target, block);
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) target(i, begin + j) = block(i, j);
}

double frobenius_squared(const Matrix& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x * x;
  return acc;
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "frobenius_dot", a, b);
  double acc = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  return acc;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double x : a.values()) m = std::max(m, std::abs(x));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "max_abs_diff", a, b);
  double m = 0.0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

bool all_finite(const Matrix& a) noexcept {
  for (double x : a.values())
    if (!std::isfinite(x)) return false;
  return true;
}

// ------------------------------------------------------------------ softmax

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (double& v : o) v *= inv;
  }
  return out;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  require_shape(y.rows() == dy.rows() && y.cols() == dy.cols(), "softmax_rows_backward", y, dy);
  Matrix dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto yr = y.row(i);
    auto gr = dy.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
    auto o = dx.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) o[j] = yr[j] * (gr[j] - dot);
  }
  return dx;
}

// --------------------------------------------------------------- layer norm

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps,
                  LayerNormCache* cache) {
  require_shape(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm(gamma)", x, gamma);
  require_shape(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm(beta)", x, beta);
  if (!(eps >= 0.0)) throw ConfigError("layer_norm: eps must be non-negative");
  const std::size_t n = x.cols();
  Matrix normalized(x.rows(), n);
  std::vector<double> inv_std(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double denom = var + eps;
    const double is = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    inv_std[i] = is;
    auto o = normalized.row(i);
    for (std::size_t j = 0; j < n; ++j) o[j] = (r[j] - mean) * is;
  }
  Matrix out(x.rows(), n);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) = gamma(0, j) * normalized(i, j) + beta(0, j);
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma, const Matrix& dy,
                           Matrix& d_gamma, Matrix& d_beta) {
  const Matrix& xhat = cache.normalized;
  require_shape(xhat.rows() == dy.rows() && xhat.cols() == dy.cols(), "layer_norm_backward", xhat,
                dy);
  const std::size_t n = xhat.cols();
  Matrix dx(dy.rows(), n);
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      d_gamma(0, j) += dy(i, j) * xhat(i, j);
      d_beta(0, j) += dy(i, j);
      dxhat[j] = dy(i, j) * gamma(0, j);
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xhat(i, j);
    }
    mean_d /= static_cast<double>(n);
    mean_dx /= static_cast<double>(n);
    const double is = cache.inv_std[i];
    for (std::size_t j = 0; j < n; ++j) dx(i, j) = is * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
  }
  return dx;
}

// ------------------------------------------------------------------- cosine

namespace {

Matrix normalize_rows(const Matrix& a, std::vector<double>& norms, bool& degenerate) {
  Matrix out(a.rows(), a.cols());
  norms.assign(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += v * v;
    const double nrm = std::sqrt(s);
    norms[i] = nrm;
    if (nrm == 0.0) {
      degenerate = true;
      continue;
    }
    auto r = a.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = r[j] / nrm;
  }
  return out;
}

}  // namespace

CosineResult cosine_rows(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.cols(), "cosine_rows", a, b);
  CosineResult result;
  std::vector<double> na, nb;
  const Matrix an = normalize_rows(a, na, result.degenerate);
  const Matrix bn = normalize_rows(b, nb, result.degenerate);
  result.similarity = matmul_nt(an, bn);
  for (double& v : result.similarity.values()) v = std::clamp(v, -1.0, 1.0);
  return result;
}

void cosine_rows_backward(const Matrix& a, const Matrix& b, const Matrix& d_sim, Matrix& d_a,
                          Matrix& d_b) {
  bool degenerate = false;
  std::vector<double> na, nb;
  const Matrix an = normalize_rows(a, na, degenerate);
  const Matrix bn = normalize_rows(b, nb, degenerate);
  const Matrix d_an = matmul(d_sim, bn);
  const Matrix d_bn = matmul_tn(d_sim, an);
  auto backprop = [](const Matrix& unit, const std::vector<double>& norms, const Matrix& d_unit,
                     Matrix& d_raw) {
    for (std::size_t i = 0; i < unit.rows(); ++i) {
      if (norms[i] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < unit.cols(); ++j) dot += unit(i, j) * d_unit(i, j);
      for (std::size_t j = 0; j < unit.cols(); ++j)
        d_raw(i, j) += (d_unit(i, j) - unit(i, j) * dot) / norms[i];
    }
  };
  backprop(an, na, d_an, d_a);
  backprop(bn, nb, d_bn, d_b);
}

// --------------------------------------------------------------------- GELU

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (double& v : out.values()) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    v = 0.5 * v * (1.0 + t);
  }
  return out;
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  require_shape(x.rows() == dy.rows() && x.cols() == dy.cols(), "gelu_backward", x, dy);
  Matrix dx(x.rows(), x.cols());
  auto xv = x.values();
  auto gv = dy.values();
  auto o = dx.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    const double deriv =
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    o[i] = gv[i] * deriv;
  }
  return dx;
}

// ---------------------------------------------------------------------- RNG

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * 3.14159265358979323846 * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) throw ConfigError("Rng::below requires n > 0");
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  std::uint64_t draw = next_u64();
  while (draw >= limit) draw = next_u64();
  return static_cast<std::size_t>(draw % bound);
}

// --------------------------------------------------------------- parameters

Parameter::Parameter(std::string n, Matrix v)
    : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

void Parameter::zero_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix(value.rows(), value.cols());
  } else {
    grad.fill(0.0);
  }
}

Parameter xavier_parameter(std::string name, std::size_t rows, std::size_t cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix v(rows, cols);
  for (double& x : v.values()) x = rng.uniform(-limit, limit);
  return Parameter(std::move(name), std::move(v));
}

Parameter constant_parameter(std::string name, std::size_t rows, std::size_t cols, double value) {
  return Parameter(std::move(name), Matrix(rows, cols, value));
}

void zero_grads(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

// ----------------------------------------------------------- gradient check

GradCheckReport grad_check(const LossFunction& loss, const ParameterList& params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");
  zero_grads(params);
  const double base = loss(true);
  const double again = loss(false);
  const double third = loss(false);
  if (base != again || again != third) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "grad_check: loss is not deterministic (" << base << ", " << again << ", " << third
        << ")";
    throw DeterminismError(msg.str());
  }

  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const Parameter* p : params) analytic.push_back(p->grad);

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    auto values = p.value.values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double original = values[k];
      values[k] = original + eps;
      const double plus = loss(false);
      values[k] = original - eps;
      const double minus = loss(false);
      values[k] = original;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic[pi].values()[k];
      const double scale_ = std::max(std::abs(a), std::abs(numeric));
      const double err = scale_ < 1e-8 ? std::abs(a - numeric) : std::abs(a - numeric) / scale_;
      ++report.entries_checked;
      if (err > report.max_relative_error || report.entries_checked == 1) {
        report.max_relative_error = err;
        report.worst_parameter = p.name;
        report.worst_index = k;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->grad = analytic[pi];
  return report;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace helo
