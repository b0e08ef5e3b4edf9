#pragma once

// Dense row-major double-precision linear algebra with hand-written backward
// kernels, a seeded RNG, trainable parameters and a finite-difference
// gradient checker. Every reduction runs sequentially in row-major order so
// results are bit-reproducible for a given binary.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace helo {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  /// 1×n row vector.
  static Matrix row_vector(std::span<const double> values);

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  [[nodiscard]] std::span<const double> values() const noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& storage() const noexcept { return data_; }

  void fill(double value);
  [[nodiscard]] std::string shape_string() const;

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------- forward ops

/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// out += a · b, out += aᵀ · b. Used to accumulate weight gradients.
void matmul_accumulate(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn_accumulate(const Matrix& a, const Matrix& b, Matrix& out);

Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double factor);
Matrix hadamard(const Matrix& a, const Matrix& b);
/// target += alpha · source
void axpy(double alpha, const Matrix& source, Matrix& target);
/// Adds the 1×cols row `bias` to every row of `x`.
Matrix add_row_bias(const Matrix& x, const Matrix& bias);
/// 1×cols vector of column sums.
Matrix column_sums(const Matrix& x);
/// 1×cols vector of column means (mean over rows).
Matrix row_mean(const Matrix& x);
/// Stacks matrices of equal width along the row axis.
Matrix vstack(std::span<const Matrix> parts);
Matrix slice_rows(const Matrix& x, std::size_t begin, std::size_t count);
Matrix slice_cols(const Matrix& x, std::size_t begin, std::size_t count);
void set_cols(Matrix& target, std::size_t begin, const Matrix& block);

double frobenius_squared(const Matrix& a);
double frobenius_dot(const Matrix& a, const Matrix& b);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a) noexcept;

/// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const Matrix& x);
/// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy);

struct LayerNormCache {
  Matrix normalized;            // (x - mean) / sqrt(var + eps)
  std::vector<double> inv_std;  // per row
};

/// Per-row normalization to zero mean / unit (population) variance followed by
/// gamma ⊙ x̂ + beta. A zero-variance row with eps = 0 normalizes to zeros.
Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, double eps,
                  LayerNormCache* cache = nullptr);
/// Returns dL/dx and accumulates into d_gamma / d_beta.
Matrix layer_norm_backward(const LayerNormCache& cache, const Matrix& gamma, const Matrix& dy,
                           Matrix& d_gamma, Matrix& d_beta);

struct CosineResult {
  Matrix similarity;
  bool degenerate = false;  // some row had zero norm; its similarities are 0
};

/// output(i, j) = <a_i, b_j> / (|a_i| |b_j|); zero-norm rows give 0.
CosineResult cosine_rows(const Matrix& a, const Matrix& b);
/// Backward of cosine_rows. Accumulates into d_a and d_b (rows of zero norm get 0).
void cosine_rows_backward(const Matrix& a, const Matrix& b, const Matrix& d_sim, Matrix& d_a,
                          Matrix& d_b);

/// tanh-approximation GELU and its derivative.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

// ---------------------------------------------------------------------- RNG

/// Seeded generator with portable draws (std distributions are
/// implementation-defined, so conversions are done here).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------- parameters

struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Matrix value);

  std::string name;
  Matrix value;
  Matrix grad;

  void zero_grad();
};

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
Parameter xavier_parameter(std::string name, std::size_t rows, std::size_t cols, Rng& rng);
Parameter constant_parameter(std::string name, std::size_t rows, std::size_t cols, double value);

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);

// ----------------------------------------------------------- gradient check

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;

  [[nodiscard]] bool passed(double tolerance) const { return max_relative_error <= tolerance; }
};

/// Evaluates the loss at the current parameter values. When `with_grad` is
/// true it must also write the analytic gradient into each parameter's grad.
using LossFunction = std::function<double(bool with_grad)>;

/// Compares analytic gradients against central differences
/// (f(θ+eps) − f(θ−eps)) / (2 eps) for every entry of `params`. Relative error
/// is |a − n| / max(|a|, |n|), or |a − n| when both magnitudes are below 1e-8.
/// Throws DeterminismError if repeated evaluation at θ is not bitwise stable.
GradCheckReport grad_check(const LossFunction& loss, const ParameterList& params, double eps);

// ---------------------------------------------------------------- utilities

/// Throws DimensionError with both shapes when the condition fails.
void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b);
/// Throws NumericalError naming `where` when `m` contains NaN/Inf.
void require_finite(const Matrix& m, const std::string& where);

/// FNV-1a 64-bit hash, used for config fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace helo
