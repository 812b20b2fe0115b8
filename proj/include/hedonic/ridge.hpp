#pragma once

// Closed-form ridge regression, validation sweep over alpha, and the
// per-architecture evaluation report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hedonic/errors.hpp"
#include "hedonic/parallel.hpp"
#include "hedonic/tabular.hpp"
#include "hedonic/tensor.hpp"

namespace hedonic {

struct RidgeModel {
  Tensor64 weights;  // [p]
  double intercept = 0;
  double alpha = 0;
  std::vector<std::string> columns;
};

/// Centered normal equations of one training set, reusable across alphas.
class RidgeProblem {
 public:
  RidgeProblem(const Tensor64& x, const Tensor64& y) {
    if (x.rank() != 2) throw ShapeError("fit_ridge: X must be a matrix");
    const std::size_t n = x.rows(), p = x.cols();
    if (y.size() != n) {
      throw ShapeError("fit_ridge: " + std::to_string(n) + " rows but " + std::to_string(y.size()) + " targets");
    }
    require_finite(x, "fit_ridge X");
    require_finite(y, "fit_ridge y");
    xmean_.assign(p, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      ymean_ += y[i];
      for (std::size_t j = 0; j < p; ++j) xmean_[j] += x(i, j);
    }
    ymean_ /= static_cast<double>(n);
    for (auto& m : xmean_) m /= static_cast<double>(n);

    Tensor64 xc({n, p});
    Tensor64 yc({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      yc[i] = y[i] - ymean_;
      for (std::size_t j = 0; j < p; ++j) xc(i, j) = x(i, j) - xmean_[j];
    }
    gram_ = matmul_tn(xc, xc);
    rhs_ = matmul_tn(xc, yc);
  }

  std::size_t width() const noexcept { return xmean_.size(); }

  RidgeModel solve(double alpha, std::vector<std::string> columns = {}) const {
    if (!(alpha >= 0) || !std::isfinite(alpha)) throw std::invalid_argument("fit_ridge: alpha must be >= 0");
    const std::size_t p = width();
    if (!columns.empty() && columns.size() != p) throw ShapeError("fit_ridge: column names do not match width");
    Tensor64 gram = gram_;
    for (std::size_t j = 0; j < p; ++j) gram(j, j) += alpha;
    Tensor64 w;
    try {
      w = solve_spd(gram, rhs_);
    } catch (const NotPositiveDefiniteError&) {
      throw NotPositiveDefiniteError("fit_ridge: singular normal equations at alpha " + std::to_string(alpha));
    }
    RidgeModel model;
    model.weights = w.reshaped({p});
    model.alpha = alpha;
    model.intercept = ymean_;
    for (std::size_t j = 0; j < p; ++j) model.intercept -= xmean_[j] * model.weights[j];
    model.columns = std::move(columns);
    return model;
  }

 private:
  std::vector<double> xmean_;
  double ymean_ = 0;
  Tensor64 gram_;
  Tensor64 rhs_;
};

/// Minimizes ||y - Xw - b||^2 + alpha ||w||^2. The intercept is recovered
/// from the column means and is not penalized.
inline RidgeModel fit_ridge(const Tensor64& x, const Tensor64& y, double alpha,
                            std::vector<std::string> columns = {}) {
  if (!(alpha >= 0) || !std::isfinite(alpha)) throw std::invalid_argument("fit_ridge: alpha must be >= 0");
  return RidgeProblem(x, y).solve(alpha, std::move(columns));
}

inline Tensor64 predict(const RidgeModel& model, const Tensor64& x) {
  if (x.rank() != 2 || x.cols() != model.weights.size()) {
    throw ShapeError("predict: X is " + shape_string(x.shape()) + ", model width " +
                     std::to_string(model.weights.size()));
  }
  Tensor64 out({x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = model.intercept;
    for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j) * model.weights[j];
    out[i] = s;
  }
  return out;
}

inline double rmse(const Tensor64& pred, const Tensor64& y) {
  if (pred.size() != y.size()) throw ShapeError("rmse: length mismatch");
  if (y.size() == 0) throw std::invalid_argument("rmse: empty vectors");
  double ss = 0;
  for (std::size_t i = 0; i < y.size(); ++i) ss += (pred[i] - y[i]) * (pred[i] - y[i]);
  return std::sqrt(ss / static_cast<double>(y.size()));
}

/// The six alphas selected in the reference evaluation.
inline constexpr double kReportedAlphas[] = {40, 100, 290, 320, 350, 360};

/// 60 log-spaced points over [0.1, 1000] plus the reported alphas, sorted.
inline std::vector<double> default_alpha_grid() {
  std::vector<double> grid;
  for (int i = 0; i < 60; ++i) grid.push_back(std::pow(10.0, -1.0 + 4.0 * i / 59.0));
  grid.insert(grid.end(), std::begin(kReportedAlphas), std::end(kReportedAlphas));
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

/// Parses "default", "a,b,c" or "log:lo:hi:n".
inline std::vector<double> parse_alpha_grid(const std::string& spec) {
  if (spec.empty() || spec == "default") return default_alpha_grid();
  std::vector<double> grid;
  auto parse_number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || !(v >= 0) || !std::isfinite(v)) throw ConfigError("bad alpha '" + s + "' in grid " + spec);
    return v;
  };
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      const auto pos = s.find(sep, start);
      parts.push_back(s.substr(start, pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    return parts;
  };
  if (spec.rfind("log:", 0) == 0) {
    const auto parts = split(spec.substr(4), ':');
    if (parts.size() != 3) throw ConfigError("alpha grid must be log:lo:hi:n");
    const double lo = parse_number(parts[0]), hi = parse_number(parts[1]);
    const double count = parse_number(parts[2]);
    if (!(lo > 0 && hi >= lo) || count < 1 || count != std::floor(count)) {
      throw ConfigError("bad log alpha grid " + spec);
    }
    const int n = static_cast<int>(count);
    for (int i = 0; i < n; ++i) {
      grid.push_back(n == 1 ? lo : std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1)));
    }
  } else {
    for (const auto& part : split(spec, ',')) grid.push_back(parse_number(part));
  }
  return grid;
}

struct SweepPoint {
  double alpha = 0;
  std::optional<double> train_rmse;  // empty when the fit failed
  std::optional<double> val_rmse;
  std::string error;
};

struct AlphaSweepResult {
  std::vector<SweepPoint> points;  // grid order
  double chosen_alpha = 0;
  double chosen_val_rmse = 0;
};

/// Fits on the training rows at every grid alpha and picks the alpha with the
/// lowest validation RMSE (ties go to the smaller alpha). Failed fits are kept
/// in the curve with their error message.
inline AlphaSweepResult sweep_alpha(const Tensor64& xtr, const Tensor64& ytr, const Tensor64& xval,
                                    const Tensor64& yval, std::span<const double> grid,
                                    std::size_t threads = 1) {
  if (grid.empty()) throw std::invalid_argument("sweep_alpha: empty grid");
  for (double a : grid) {
    if (!(a >= 0)) throw std::invalid_argument("sweep_alpha: negative alpha in grid");
  }
  const RidgeProblem problem(xtr, ytr);
  AlphaSweepResult result;
  result.points.resize(grid.size());
  parallel_for(grid.size(), threads, [&](std::size_t i) {
    SweepPoint& pt = result.points[i];
    pt.alpha = grid[i];
    try {
      const RidgeModel m = problem.solve(grid[i]);
      pt.train_rmse = rmse(predict(m, xtr), ytr);
      pt.val_rmse = rmse(predict(m, xval), yval);
    } catch (const NotPositiveDefiniteError& e) {
      pt.error = e.what();
    } catch (const NonFiniteError& e) {
      pt.error = e.what();
    }
  });
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    const auto& pt = result.points[i];
    if (!pt.val_rmse) continue;
    if (!best) {
      best = i;
      continue;
    }
    const auto& b = result.points[*best];
    if (*pt.val_rmse < *b.val_rmse || (*pt.val_rmse == *b.val_rmse && pt.alpha < b.alpha)) best = i;
  }
  if (!best) {
    throw NotPositiveDefiniteError("sweep_alpha: every grid point failed (" + result.points.front().error + ")");
  }
  result.chosen_alpha = result.points[*best].alpha;
  result.chosen_val_rmse = *result.points[*best].val_rmse;
  return result;
}

/// Relative test-RMSE reduction against the baseline, in percent.
inline double improvement_pct(double baseline_test, double model_test) {
  if (!(baseline_test > 0)) throw std::invalid_argument("improvement_pct: baseline RMSE must be positive");
  return (baseline_test - model_test) / baseline_test * 100.0;
}

struct EvalRow {
  std::string name;
  double train_rmse = 0;
  double val_rmse = 0;
  double test_rmse = 0;
  double alpha = 0;
  double improvement = 0;  // percent over the baseline row
  std::size_t columns = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // baseline first
  std::vector<std::pair<std::string, AlphaSweepResult>> sweeps;
};

struct Architecture {
  std::string name;
  PreparedData data;
};

inline constexpr const char* kBaselineName = "Baseline";

/// Sweeps, refits at the chosen alpha and scores every architecture. The
/// entry named "Baseline" provides the reference test RMSE.
inline EvalReport evaluate(std::span<const Architecture> architectures, std::span<const double> grid,
                           std::size_t threads = 1) {
  const auto base = std::find_if(architectures.begin(), architectures.end(),
                                 [](const Architecture& a) { return a.name == kBaselineName; });
  if (base == architectures.end()) throw std::invalid_argument("evaluate: missing baseline row");
  std::vector<const Architecture*> order{&*base};
  for (const auto& a : architectures)
    if (&a != &*base) order.push_back(&a);

  EvalReport report;
  for (const Architecture* arch : order) {
    const auto& d = arch->data;
    auto sweep = sweep_alpha(d.train.values, d.train.y, d.validation.values, d.validation.y, grid, threads);
    const RidgeModel m = fit_ridge(d.train.values, d.train.y, sweep.chosen_alpha, d.columns);
    EvalRow row;
    row.name = arch->name;
    row.alpha = sweep.chosen_alpha;
    row.train_rmse = rmse(predict(m, d.train.values), d.train.y);
    row.val_rmse = rmse(predict(m, d.validation.values), d.validation.y);
    row.test_rmse = rmse(predict(m, d.test.values), d.test.y);
    row.columns = d.columns.size();
    report.rows.push_back(row);
    report.sweeps.emplace_back(arch->name, std::move(sweep));
  }
  const double baseline_test = report.rows.front().test_rmse;
  for (auto& row : report.rows) row.improvement = improvement_pct(baseline_test, row.test_rmse);
  report.rows.front().improvement = 0.0;
  return report;
}

inline std::string format_report_table(const EvalReport& report) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %12s %12s %12s %10s %26s\n", "Architecture", "Train-RMSE",
                "Val-RMSE", "Test-RMSE", "Alpha", "Improvement over Baseline");
  out += buf;
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%-14s %12.2f %12.2f %12.2f %10.4g %25.2f%%\n", r.name.c_str(),
                  r.train_rmse, r.val_rmse, r.test_rmse, r.alpha, r.improvement);
    out += buf;
  }
  return out;
}

inline std::string format_report_csv(const EvalReport& report) {
  std::string out = "architecture,train_rmse,val_rmse,test_rmse,alpha,improvement_pct,columns\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", r.name.c_str(), r.train_rmse,
                  r.val_rmse, r.test_rmse, r.alpha, r.improvement, r.columns);
    out += buf;
  }
  return out;
}

/// Sweep curves for every architecture: architecture, alpha, train_rmse,
/// val_rmse (blank for failed fits).
inline std::string format_sweep_csv(const EvalReport& report) {
  std::string out = "architecture,alpha,train_rmse,val_rmse\n";
  char buf[256];
  for (const auto& [name, sweep] : report.sweeps)
    for (const auto& pt : sweep.points) {
      if (pt.val_rmse) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", name.c_str(), pt.alpha, *pt.train_rmse,
                      *pt.val_rmse);
      } else {
        std::snprintf(buf, sizeof buf, "%s,%.17g,,\n", name.c_str(), pt.alpha);
      }
      out += buf;
    }
  return out;
}

}  // namespace hedonic
