#pragma once

// Dense row-major tensors and the handful of kernels the rest of the library
// is built on. BasicTensor<float> is the working type; BasicTensor<double> is
// used for the regression math and by gradient-check oracles in tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hedonic/errors.hpp"

namespace hedonic {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_product(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_product(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  /// Matrix from nested rows, e.g. {{1, 2}, {3, 4}}.
  static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return BasicTensor({m, n}, std::move(data));
  }

  static BasicTensor vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return BasicTensor({n}, std::move(values));
  }

  static BasicTensor identity(std::size_t n) {
    BasicTensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::size_t rows() const {
    require_rank(2);
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank(2);
    return shape_[1];
  }
  /// Extent of the last axis.
  std::size_t last_dim() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  std::span<T> row(std::size_t i) {
    const std::size_t n = last_dim();
    return std::span<T>(data_.data() + i * n, n);
  }
  std::span<const T> row(std::size_t i) const {
    const std::size_t n = last_dim();
    return std::span<const T>(data_.data() + i * n, n);
  }

  /// Same data under a new shape with equal element count.
  BasicTensor reshaped(Shape shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const BasicTensor& other) const = default;

 private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
  }
  void require_rank(std::size_t r) const {
    if (shape_.size() != r) {
      throw ShapeError("expected rank " + std::to_string(r) + " tensor, got " +
                       shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return BasicTensor<To>(t.shape(), std::move(out));
}

template <class T>
bool all_finite(const BasicTensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](T v) { return std::isfinite(v); });
}

template <class T>
void require_finite(const BasicTensor<T>& t, const std::string& where) {
  if (!all_finite(t)) throw NonFiniteError("non-finite value produced in " + where);
}

namespace detail {

template <class T>
void require_matrix(const BasicTensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

// C = A * B, A m-by-k, B k-by-n, all row-major with the given strides.
// Partial sums over short k-panels stay in T and are flushed into a 64-bit
// accumulator, so long dot products are carried in double precision.
template <class T>
void gemm_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  constexpr std::size_t kRowBlock = 4;
  constexpr std::size_t kPanel = 64;
  const std::size_t col_block = std::min<std::size_t>(512, n);
  std::vector<T> part(kRowBlock * col_block);
  std::vector<double> wide(kRowBlock * col_block);

  for (std::size_t j0 = 0; j0 < n; j0 += col_block) {
    const std::size_t nj = std::min(col_block, n - j0);
    for (std::size_t i0 = 0; i0 < m; i0 += kRowBlock) {
      const std::size_t ni = std::min(kRowBlock, m - i0);
      std::fill(wide.begin(), wide.end(), 0.0);
      for (std::size_t k0 = 0; k0 < k; k0 += kPanel) {
        const std::size_t nk = std::min(kPanel, k - k0);
        std::fill(part.begin(), part.end(), T{});
        for (std::size_t kk = k0; kk < k0 + nk; ++kk) {
          const T* brow = b + kk * n + j0;
          for (std::size_t r = 0; r < ni; ++r) {
            const T av = a[(i0 + r) * k + kk];
            if (av == T{}) continue;
            T* acc = part.data() + r * col_block;
            for (std::size_t j = 0; j < nj; ++j) acc[j] += av * brow[j];
          }
        }
        for (std::size_t r = 0; r < ni; ++r) {
          const T* acc = part.data() + r * col_block;
          double* w = wide.data() + r * col_block;
          for (std::size_t j = 0; j < nj; ++j) w[j] += static_cast<double>(acc[j]);
        }
      }
      for (std::size_t r = 0; r < ni; ++r) {
        T* crow = c + (i0 + r) * n + j0;
        const double* w = wide.data() + r * col_block;
        for (std::size_t j = 0; j < nj; ++j) crow[j] = static_cast<T>(w[j]);
      }
    }
  }
}

}  // namespace detail

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  BasicTensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

/// Standard matrix product of an m-by-k and a k-by-n matrix.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()));
  }
  BasicTensor<T> c({a.rows(), b.cols()});
  detail::gemm_kernel(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  require_finite(c, "matmul");
  return c;
}

/// a * b^T
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul(a, transpose(b));
}

/// a^T * b
template <class T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return matmul(transpose(a), b);
}

/// Softmax along the last axis of x / temperature, stabilized by subtracting
/// the slice maximum.
template <class T>
BasicTensor<T> softmax_last_dim(const BasicTensor<T>& x, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("softmax_last_dim: temperature must be positive");
  }
  if (x.empty()) throw ShapeError("softmax_last_dim: empty input");
  BasicTensor<T> out(x.shape());
  const std::size_t n = x.last_dim();
  const std::size_t slices = x.size() / n;
  std::vector<double> e(n);
  for (std::size_t s = 0; s < slices; ++s) {
    const T* in = x.data() + s * n;
    T* o = out.data() + s * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(in[j]) / temperature);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(in[j]) / temperature - mx);
      total += e[j];
    }
    // Underflowed entries are floored at the smallest subnormal so every
    // probability stays strictly positive.
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::max(static_cast<T>(e[j] / total), std::numeric_limits<T>::denorm_min());
    }
  }
  require_finite(out, "softmax_last_dim");
  return out;
}

/// Log-softmax along the last axis of x / temperature.
template <class T>
BasicTensor<T> log_softmax_last_dim(const BasicTensor<T>& x, double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("log_softmax_last_dim: temperature must be positive");
  }
  BasicTensor<T> out(x.shape());
  const std::size_t n = x.last_dim();
  const std::size_t slices = x.size() / n;
  for (std::size_t s = 0; s < slices; ++s) {
    const T* in = x.data() + s * n;
    T* o = out.data() + s * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(in[j]) / temperature);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(in[j]) / temperature - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = static_cast<T>(static_cast<double>(in[j]) / temperature - lse);
  }
  require_finite(out, "log_softmax_last_dim");
  return out;
}

inline constexpr double kLayerNormEps = 1e-6;

/// Normalizes every last-axis slice to zero mean and unit variance, then
/// applies gamma/beta. A zero-variance slice normalizes to zero (output beta).
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, double eps = kLayerNormEps) {
  const std::size_t n = x.last_dim();
  if (gamma.size() != n || beta.size() != n) {
    throw ShapeError("layer_norm: gamma/beta length must equal last axis " + std::to_string(n));
  }
  BasicTensor<T> out(x.shape());
  const std::size_t slices = x.size() / n;
  for (std::size_t s = 0; s < slices; ++s) {
    const T* in = x.data() + s * n;
    T* o = out.data() + s * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = in[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double denom = var + eps;
    const double rstd = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = static_cast<T>((in[j] - mean) * rstd * gamma[j] + beta[j]);
    }
  }
  require_finite(out, "layer_norm");
  return out;
}

/// Solves a * x = b for symmetric positive definite a using a Cholesky
/// factorization (lower triangle of a is read). No pivoting.
template <class T>
BasicTensor<T> solve_spd(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "solve_spd");
  detail::require_matrix(b, "solve_spd");
  const std::size_t n = a.rows();
  if (a.cols() != n || b.rows() != n) {
    throw ShapeError("solve_spd: expected n-by-n system with n-row right-hand side, got " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t p = 0; p < j; ++p) diag -= l[j * n + p] * l[j * n + p];
    // Pivots that cancel to rounding noise mean the matrix is singular.
    if (!(diag > 1e-12 * std::abs(static_cast<double>(a(j, j)))) || !std::isfinite(diag)) {
      throw NotPositiveDefiniteError("solve_spd: matrix is not positive definite (pivot " +
                                     std::to_string(j) + ")");
    }
    const double ljj = std::sqrt(diag);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l[i * n + p] * l[j * n + p];
      l[i * n + j] = s / ljj;
    }
  }
  const std::size_t k = b.cols();
  BasicTensor<T> x(b.shape());
  std::vector<double> y(n);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t p = 0; p < i; ++p) s -= l[i * n + p] * y[p];
      y[i] = s / l[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t p = ii + 1; p < n; ++p) s -= l[p * n + ii] * y[p];
      y[ii] = s / l[ii * n + ii];
    }
    for (std::size_t i = 0; i < n; ++i) x(i, c) = static_cast<T>(y[i]);
  }
  require_finite(x, "solve_spd");
  return x;
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
template <class T, class F>
BasicTensor<T> finite_difference_gradient(F&& f, const BasicTensor<T>& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: h must be positive");
  BasicTensor<T> grad(x.shape());
  BasicTensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = static_cast<T>(orig + h);
    const double up = static_cast<double>(f(probe));
    probe[i] = static_cast<T>(orig - h);
    const double down = static_cast<double>(f(probe));
    probe[i] = orig;
    grad[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return grad;
}

// Small elementwise helpers used across modules.

template <class T>
BasicTensor<T>& add_inplace(BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.size() != b.size()) throw ShapeError("add: size mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

template <class T>
BasicTensor<T> add(BasicTensor<T> a, const BasicTensor<T>& b) {
  add_inplace(a, b);
  return a;
}

/// Adds a length-n bias to every row of an m-by-n matrix.
template <class T>
void add_row_bias(BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::size_t n = x.last_dim();
  if (bias.size() != n) throw ShapeError("bias length does not match last axis");
  const std::size_t rows = x.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    T* p = x.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) p[j] += bias[j];
  }
}

template <class T>
double max_abs(const BasicTensor<T>& t) {
  double m = 0.0;
  for (auto v : t.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <class T>
double l2_norm(const BasicTensor<T>& t) {
  double s = 0.0;
  for (auto v : t.values()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

}  // namespace hedonic
