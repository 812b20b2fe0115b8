#pragma once

// Independent reference solvers for ridge regression: plain gradient descent
// on the uncentered objective and Gauss-Jordan least squares on [1 X].

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "hedonic/rng.hpp"
#include "hedonic/tensor.hpp"

namespace hedonic::testing {

struct Problem {
  Tensor64 x, y;
};

// y = X w* + b* + noise with X columns carrying a mild offset.
inline Problem random_problem(Rng& rng, std::size_t n, std::size_t p, double noise = 0.5) {
  Problem pr{Tensor64({n, p}), Tensor64({n})};
  std::vector<double> w(p);
  for (auto& v : w) v = rng.normal();
  const double b = rng.uniform(-3, 3);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b;
    for (std::size_t j = 0; j < p; ++j) {
      pr.x(i, j) = rng.normal() + 0.3 * static_cast<double>(j % 3);
      s += pr.x(i, j) * w[j];
    }
    pr.y[i] = s + noise * rng.normal();
  }
  return pr;
}

inline double objective(const Problem& pr, const std::vector<double>& w, double b, double alpha) {
  double ss = 0;
  for (std::size_t i = 0; i < pr.x.rows(); ++i) {
    double r = pr.y[i] - b;
    for (std::size_t j = 0; j < w.size(); ++j) r -= pr.x(i, j) * w[j];
    ss += r * r;
  }
  double pen = 0;
  for (double v : w) pen += v * v;
  return ss + alpha * pen;
}

// Plain gradient descent on the uncentered objective with a free intercept.
// Step size is 1/L with L from power iteration on the augmented Hessian.
struct GdResult {
  std::vector<double> w;
  double b = 0;
};

inline GdResult gradient_descent(const Problem& pr, double alpha) {
  const std::size_t n = pr.x.rows(), p = pr.x.cols();
  auto hess_apply = [&](const std::vector<double>& v) {  // v = (w, b)
    std::vector<double> xv(n, 0.0), out(p + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      xv[i] = v[p];
      for (std::size_t j = 0; j < p; ++j) xv[i] += pr.x(i, j) * v[j];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < p; ++j) out[j] += 2 * pr.x(i, j) * xv[i];
      out[p] += 2 * xv[i];
    }
    for (std::size_t j = 0; j < p; ++j) out[j] += 2 * alpha * v[j];
    return out;
  };
  std::vector<double> v(p + 1, 1.0);
  double lmax = 0;
  for (int it = 0; it < 200; ++it) {
    auto hv = hess_apply(v);
    lmax = std::sqrt(std::inner_product(hv.begin(), hv.end(), hv.begin(), 0.0));
    for (std::size_t k = 0; k <= p; ++k) v[k] = hv[k] / lmax;
  }
  const double step = 1.0 / (1.05 * lmax);

  std::vector<double> theta(p + 1, 0.0);
  for (int it = 0; it < 5000000; ++it) {
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = theta[p] - pr.y[i];
      for (std::size_t j = 0; j < p; ++j) r[i] += pr.x(i, j) * theta[j];
    }
    std::vector<double> g(p + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < p; ++j) g[j] += 2 * pr.x(i, j) * r[i];
      g[p] += 2 * r[i];
    }
    for (std::size_t j = 0; j < p; ++j) g[j] += 2 * alpha * theta[j];
    // Stationarity to 1e-10 relative to the objective scale.
    const double gnorm = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
    const double f = std::inner_product(r.begin(), r.end(), r.begin(), 0.0);
    if (gnorm <= 1e-10 * std::max(1.0, f)) break;
    for (std::size_t k = 0; k <= p; ++k) theta[k] -= step * g[k];
  }
  return {{theta.begin(), theta.begin() + static_cast<long>(p)}, theta[p]};
}

// Ordinary least squares with intercept via the normal equations of [1 X].
inline GdResult least_squares(const Problem& pr) {
  const std::size_t n = pr.x.rows(), p = pr.x.cols(), q = p + 1;
  std::vector<std::vector<double>> a(q, std::vector<double>(q + 1, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(q);
    row[0] = 1;
    for (std::size_t j = 0; j < p; ++j) row[j + 1] = pr.x(i, j);
    for (std::size_t r = 0; r < q; ++r) {
      for (std::size_t c = 0; c < q; ++c) a[r][c] += row[r] * row[c];
      a[r][q] += row[r] * pr.y[i];
    }
  }
  for (std::size_t c = 0; c < q; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < q; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    for (std::size_t r = 0; r < q; ++r) {
      if (r == c) continue;
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k <= q; ++k) a[r][k] -= f * a[c][k];
    }
  }
  GdResult out;
  out.b = a[0][q] / a[0][0];
  for (std::size_t j = 0; j < p; ++j) out.w.push_back(a[j + 1][q] / a[j + 1][j + 1]);
  return out;
}

}  // namespace hedonic::testing
