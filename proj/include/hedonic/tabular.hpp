#pragma once

// Listing records and the tabular side of the hedonic model: JSON manifest
// ingestion, imputation, winsorization, one-hot encoding, standardization,
// random splits, descriptive statistics and the $/sqft target.
//
// Pipeline (see prepare_dataset): split ids first, then impute and winsorize
// with statistics from training rows, encode, standardize with training
// statistics, and finally materialize the three splits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hedonic/errors.hpp"
#include "hedonic/features.hpp"
#include "hedonic/rng.hpp"
#include "hedonic/tensor.hpp"

namespace hedonic {

struct PropertyRecord {
  std::string id;
  double sale_price = 0;  // dollars
  std::optional<double> lot_area;  // sqft
  double living_area = 0;          // sqft
  double age = 0;                  // years
  double full_bath = 0;
  double half_bath = 0;
  double three_quarter_bath = 0;
  double parking = 0;
  double hoa_fees = 0;  // dollars per year
  double drive_cbd = 0;  // minutes
  double walk_eschool = 0;
  double walk_mschool = 0;
  double walk_hschool = 0;
  double married_pct = 0;
  double median_income = 0;
  double population = 0;
  std::optional<int> pool_sauna;  // 0/1
  std::optional<int> solar;       // 0/1
  std::string eschool_rank;       // A, B, C
  std::string mschool_rank;       // A, B, C
  std::string hschool_rank;       // A
  std::string region;
  int bedrooms = 0;  // 0..7, categorical
  std::string property_type;
  int crime_level = 1;  // 1..3, categorical
  std::vector<std::string> images;

  bool operator==(const PropertyRecord&) const = default;
};

/// Numeric columns in descriptive-statistics order.
inline const std::vector<std::string>& numeric_columns() {
  static const std::vector<std::string> cols = {
      "sale_price",   "lot_area",     "living_area",  "age",          "full_bath",
      "half_bath",    "three_quarter_bath", "parking", "hoa_fees",   "drive_cbd",
      "walk_eschool", "walk_mschool", "walk_hschool", "married_pct",  "median_income",
      "population"};
  return cols;
}

namespace detail {

inline double PropertyRecord::* numeric_member(std::string_view name) {
  static const std::map<std::string_view, double PropertyRecord::*> members = {
      {"sale_price", &PropertyRecord::sale_price},
      {"living_area", &PropertyRecord::living_area},
      {"age", &PropertyRecord::age},
      {"full_bath", &PropertyRecord::full_bath},
      {"half_bath", &PropertyRecord::half_bath},
      {"three_quarter_bath", &PropertyRecord::three_quarter_bath},
      {"parking", &PropertyRecord::parking},
      {"hoa_fees", &PropertyRecord::hoa_fees},
      {"drive_cbd", &PropertyRecord::drive_cbd},
      {"walk_eschool", &PropertyRecord::walk_eschool},
      {"walk_mschool", &PropertyRecord::walk_mschool},
      {"walk_hschool", &PropertyRecord::walk_hschool},
      {"married_pct", &PropertyRecord::married_pct},
      {"median_income", &PropertyRecord::median_income},
      {"population", &PropertyRecord::population}};
  auto it = members.find(name);
  return it == members.end() ? nullptr : it->second;
}

}  // namespace detail

/// Value of a numeric column; nullopt when missing.
inline std::optional<double> numeric_value(const PropertyRecord& r, std::string_view column) {
  if (column == "lot_area") return r.lot_area;
  if (auto m = detail::numeric_member(column)) return r.*m;
  throw std::invalid_argument("unknown numeric column " + std::string(column));
}

inline void set_numeric_value(PropertyRecord& r, std::string_view column, double v) {
  if (column == "lot_area") {
    r.lot_area = v;
  } else if (auto m = detail::numeric_member(column)) {
    r.*m = v;
  } else {
    throw std::invalid_argument("unknown numeric column " + std::string(column));
  }
}

struct CategoricalVariable {
  std::string name;
  std::vector<std::string> levels;
  std::string (*value)(const PropertyRecord&);
};

/// Categorical variables and their declared level domains.
inline const std::vector<CategoricalVariable>& categorical_variables() {
  static const std::vector<CategoricalVariable> vars = {
      {"eschool_rank", {"A", "B", "C"}, [](const PropertyRecord& r) { return r.eschool_rank; }},
      {"mschool_rank", {"A", "B", "C"}, [](const PropertyRecord& r) { return r.mschool_rank; }},
      {"hschool_rank", {"A"}, [](const PropertyRecord& r) { return r.hschool_rank; }},
      {"region",
       {"Central", "North", "South", "East", "Gunbarrel", "Rural"},
       [](const PropertyRecord& r) { return r.region; }},
      {"bedrooms",
       {"0", "1", "2", "3", "4", "5", "6", "7"},
       [](const PropertyRecord& r) { return std::to_string(r.bedrooms); }},
      {"property_type",
       {"Condominium", "Town-Home", "Single-Family"},
       [](const PropertyRecord& r) { return r.property_type; }},
      {"crime_level", {"1", "2", "3"}, [](const PropertyRecord& r) { return std::to_string(r.crime_level); }},
  };
  return vars;
}

// ---------------------------------------------------------------------------
// Manifest I/O

namespace detail {

inline const std::vector<std::string>& manifest_fields() {
  static const std::vector<std::string> fields = {
      "id",           "sale_price",   "lot_area",     "living_area",  "age",
      "full_bath",    "half_bath",    "three_quarter_bath", "parking", "hoa_fees",
      "drive_cbd",    "walk_eschool", "walk_mschool", "walk_hschool", "married_pct",
      "median_income", "population",  "pool_sauna",   "solar",        "eschool_rank",
      "mschool_rank", "hschool_rank", "region",       "bedrooms",     "property_type",
      "crime_level",  "images"};
  return fields;
}

inline std::string record_label(std::size_t index, const std::string& id) {
  return "record " + std::to_string(index) + (id.empty() ? "" : " (id " + id + ")");
}

}  // namespace detail

/// Checks the record-level invariants: positive price and living area,
/// non-negative numerics, categorical levels inside their domains.
inline void validate_record(const PropertyRecord& r, const std::string& where) {
  if (r.id.empty()) throw ManifestError(where + ": empty id");
  if (!(r.sale_price > 0)) throw ManifestError(where + ": sale_price must be positive");
  if (!(r.living_area > 0)) throw ManifestError(where + ": living_area must be positive");
  for (const auto& col : numeric_columns()) {
    const auto v = numeric_value(r, col);
    if (v && (!std::isfinite(*v) || *v < 0)) {
      throw ManifestError(where + ": " + col + " must be a non-negative number");
    }
  }
  for (const auto* flag : {&r.pool_sauna, &r.solar}) {
    if (*flag && **flag != 0 && **flag != 1) throw ManifestError(where + ": dummy must be 0 or 1");
  }
  for (const auto& var : categorical_variables()) {
    const std::string level = var.value(r);
    if (std::find(var.levels.begin(), var.levels.end(), level) == var.levels.end()) {
      throw ManifestError(where + ": " + var.name + " level '" + level + "' is not in its domain");
    }
  }
}

/// Parses a JSON array of listing records.
inline std::vector<PropertyRecord> ingest(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ManifestError(std::string("malformed manifest JSON: ") + e.what());
  }
  if (!doc.is_array()) throw ManifestError("manifest must be a JSON array");

  const auto& fields = detail::manifest_fields();
  std::vector<PropertyRecord> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const auto& obj = doc[i];
    std::string where = detail::record_label(i, "");
    if (!obj.is_object()) throw ManifestError(where + ": not an object");
    for (const auto& [key, _] : obj.items()) {
      if (std::find(fields.begin(), fields.end(), key) == fields.end()) {
        throw ManifestError(where + ": unknown field '" + key + "'");
      }
    }
    PropertyRecord r;
    const auto& id = obj.contains("id") ? obj["id"] : nlohmann::json();
    if (id.is_string()) {
      r.id = id.get<std::string>();
    } else if (id.is_number_integer()) {
      r.id = std::to_string(id.get<long long>());
    } else {
      throw ManifestError(where + ": id must be a string or integer");
    }
    where = detail::record_label(i, r.id);

    auto number = [&](const char* key, bool nullable) -> std::optional<double> {
      if (!obj.contains(key)) {
        if (nullable) return std::nullopt;
        throw ManifestError(where + ": missing field '" + key + "'");
      }
      const auto& v = obj[key];
      if (v.is_null()) {
        if (nullable) return std::nullopt;
        throw ManifestError(where + ": field '" + std::string(key) + "' may not be null");
      }
      if (!v.is_number()) throw ManifestError(where + ": field '" + std::string(key) + "' must be a number");
      return v.get<double>();
    };
    auto integer = [&](const char* key, bool nullable) -> std::optional<int> {
      const auto v = number(key, nullable);
      if (!v) return std::nullopt;
      if (*v != std::floor(*v)) throw ManifestError(where + ": field '" + std::string(key) + "' must be an integer");
      return static_cast<int>(*v);
    };
    auto text = [&](const char* key) -> std::string {
      if (!obj.contains(key) || !obj[key].is_string()) {
        throw ManifestError(where + ": field '" + std::string(key) + "' must be a string");
      }
      return obj[key].get<std::string>();
    };

    r.sale_price = *number("sale_price", false);
    r.lot_area = number("lot_area", true);
    for (const auto& col : numeric_columns()) {
      if (col == "sale_price" || col == "lot_area") continue;
      set_numeric_value(r, col, *number(col.c_str(), false));
    }
    r.pool_sauna = integer("pool_sauna", true);
    r.solar = integer("solar", true);
    r.eschool_rank = text("eschool_rank");
    r.mschool_rank = text("mschool_rank");
    r.hschool_rank = text("hschool_rank");
    r.region = text("region");
    r.bedrooms = *integer("bedrooms", false);
    r.property_type = text("property_type");
    r.crime_level = *integer("crime_level", false);
    if (obj.contains("images")) {
      const auto& imgs = obj["images"];
      if (!imgs.is_array()) throw ManifestError(where + ": images must be an array of paths");
      for (const auto& p : imgs) {
        if (!p.is_string()) throw ManifestError(where + ": image paths must be strings");
        r.images.push_back(p.get<std::string>());
      }
    }
    validate_record(r, where);
    if (!seen.insert(r.id).second) throw ManifestError(where + ": duplicate id");
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string write_manifest(std::span<const PropertyRecord> records) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : records) {
    nlohmann::ordered_json o;
    o["id"] = r.id;
    for (const auto& col : numeric_columns()) {
      const auto v = numeric_value(r, col);
      o[col] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
    }
    o["pool_sauna"] = r.pool_sauna ? nlohmann::ordered_json(*r.pool_sauna) : nlohmann::ordered_json(nullptr);
    o["solar"] = r.solar ? nlohmann::ordered_json(*r.solar) : nlohmann::ordered_json(nullptr);
    o["eschool_rank"] = r.eschool_rank;
    o["mschool_rank"] = r.mschool_rank;
    o["hschool_rank"] = r.hschool_rank;
    o["region"] = r.region;
    o["bedrooms"] = r.bedrooms;
    o["property_type"] = r.property_type;
    o["crime_level"] = r.crime_level;
    o["images"] = r.images;
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Cleaning

/// Fills missing lot_area with the mean and missing pool_sauna/solar with the
/// mode (ties toward 0), using the observed values of `reference`.
inline std::vector<PropertyRecord> impute(std::vector<PropertyRecord> records,
                                          std::span<const PropertyRecord> reference) {
  double lot_sum = 0;
  std::size_t lot_n = 0;
  std::array<std::size_t, 2> pool_counts{}, solar_counts{};
  for (const auto& r : reference) {
    if (r.lot_area) {
      lot_sum += *r.lot_area;
      ++lot_n;
    }
    if (r.pool_sauna) ++pool_counts[static_cast<std::size_t>(*r.pool_sauna)];
    if (r.solar) ++solar_counts[static_cast<std::size_t>(*r.solar)];
  }
  auto mode = [](const std::array<std::size_t, 2>& c) { return c[1] > c[0] ? 1 : 0; };
  bool need_lot = false, need_pool = false, need_solar = false;
  for (const auto& r : records) {
    need_lot = need_lot || !r.lot_area;
    need_pool = need_pool || !r.pool_sauna;
    need_solar = need_solar || !r.solar;
  }
  if (need_lot && lot_n == 0) throw ManifestError("impute: lot_area is missing for every record");
  if (need_pool && pool_counts[0] + pool_counts[1] == 0) {
    throw ManifestError("impute: pool_sauna is missing for every record");
  }
  if (need_solar && solar_counts[0] + solar_counts[1] == 0) {
    throw ManifestError("impute: solar is missing for every record");
  }
  for (auto& r : records) {
    if (!r.lot_area) r.lot_area = lot_sum / static_cast<double>(lot_n);
    if (!r.pool_sauna) r.pool_sauna = mode(pool_counts);
    if (!r.solar) r.solar = mode(solar_counts);
  }
  return records;
}

inline std::vector<PropertyRecord> impute(std::vector<PropertyRecord> records) {
  const std::vector<PropertyRecord> reference = records;
  return impute(std::move(records), reference);
}

/// Linear-interpolation percentile (0..100) of unsorted values: position
/// p/100 * (n - 1) in the sorted order, interpolated between neighbours.
inline double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile: empty column");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

struct WinsorLimit {
  std::string column;
  double low = 0;
  double high = 0;
};

inline const std::vector<std::string>& default_winsor_columns() {
  static const std::vector<std::string> cols = {"sale_price", "lot_area", "living_area", "hoa_fees"};
  return cols;
}

/// Per-column clamp thresholds at the given percentiles of `reference`
/// (missing values ignored).
inline std::vector<WinsorLimit> winsor_limits(std::span<const PropertyRecord> reference,
                                              double lower_pct, double upper_pct,
                                              const std::vector<std::string>& columns) {
  if (!(lower_pct >= 0 && lower_pct < upper_pct && upper_pct <= 100)) {
    throw std::invalid_argument("winsorize: need 0 <= lower < upper <= 100");
  }
  std::vector<WinsorLimit> out;
  for (const auto& col : columns) {
    std::vector<double> values;
    for (const auto& r : reference)
      if (auto v = numeric_value(r, col)) values.push_back(*v);
    if (values.empty()) throw std::invalid_argument("winsorize: column " + col + " is empty");
    out.push_back({col, percentile(values, lower_pct), percentile(values, upper_pct)});
  }
  return out;
}

inline std::vector<PropertyRecord> apply_winsor_limits(std::vector<PropertyRecord> records,
                                                       const std::vector<WinsorLimit>& limits) {
  for (auto& r : records)
    for (const auto& lim : limits)
      if (auto v = numeric_value(r, lim.column)) {
        set_numeric_value(r, lim.column, std::clamp(*v, lim.low, lim.high));
      }
  return records;
}

/// Clamps each listed column to its own [lower, upper] percentile range.
inline std::vector<PropertyRecord> winsorize(std::vector<PropertyRecord> records, double lower_pct,
                                             double upper_pct,
                                             const std::vector<std::string>& columns) {
  const auto limits = winsor_limits(records, lower_pct, upper_pct, columns);
  return apply_winsor_limits(std::move(records), limits);
}

// ---------------------------------------------------------------------------
// Statistics and target

struct ColumnSummary {
  std::string column;
  std::size_t count = 0;
  double mean = 0;
  double stddev = 0;  // sample standard deviation
  double min = 0;
  double max = 0;
  double cv_percent = 0;  // stddev / mean * 100
};

/// Coefficient of variation in percent; 0 for a zero-spread column.
inline double coefficient_of_variation(double mean, double stddev) {
  if (stddev == 0.0) return 0.0;
  return stddev / mean * 100.0;
}

inline ColumnSummary summarize(const std::string& name, std::span<const double> values) {
  ColumnSummary s;
  s.column = name;
  s.count = values.size();
  if (values.empty()) return s;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  s.min = *lo;
  s.max = *hi;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  double ss = 0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.stddev = values.size() > 1 ? std::sqrt(ss / static_cast<double>(values.size() - 1)) : 0.0;
  s.cv_percent = coefficient_of_variation(s.mean, s.stddev);
  return s;
}

/// Per numeric column: count, mean, sample std, min, max, CV. Missing values
/// are skipped.
inline std::vector<ColumnSummary> describe(std::span<const PropertyRecord> records) {
  if (records.empty()) throw std::invalid_argument("describe: no records");
  std::vector<ColumnSummary> out;
  for (const auto& col : numeric_columns()) {
    std::vector<double> values;
    for (const auto& r : records)
      if (auto v = numeric_value(r, col)) values.push_back(*v);
    out.push_back(summarize(col, values));
  }
  return out;
}

inline std::string format_describe(const std::vector<ColumnSummary>& table) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %6s %16s %16s %14s %14s %9s\n", "variable", "n", "mean",
                "std", "min", "max", "cv%");
  out += buf;
  for (const auto& s : table) {
    std::snprintf(buf, sizeof buf, "%-20s %6zu %16.2f %16.2f %14.2f %14.2f %9.2f\n",
                  s.column.c_str(), s.count, s.mean, s.stddev, s.min, s.max, s.cv_percent);
    out += buf;
  }
  return out;
}

/// Price per square foot of living area.
inline double price_per_sqft(const PropertyRecord& r) {
  if (!(r.living_area > 0)) throw ManifestError("record " + r.id + ": living_area must be positive");
  return r.sale_price / r.living_area;
}

inline Tensor64 make_target(std::span<const PropertyRecord> records) {
  if (records.empty()) throw std::invalid_argument("make_target: no records");
  Tensor64 y({records.size()});
  for (std::size_t i = 0; i < records.size(); ++i) y[i] = price_per_sqft(records[i]);
  return y;
}

// ---------------------------------------------------------------------------
// Encoding, standardization, splits

enum class ColumnKind { Continuous, Indicator };

/// Named feature columns over a fixed row order.
struct ColumnBlock {
  std::vector<std::string> names;
  std::vector<ColumnKind> kinds;
  Tensor64 values;  // rows x names.size()
};

/// One indicator column per declared level of every categorical variable.
inline ColumnBlock one_hot(std::span<const PropertyRecord> records) {
  if (records.empty()) throw std::invalid_argument("one_hot: no records");
  ColumnBlock block;
  for (const auto& var : categorical_variables())
    for (const auto& level : var.levels) {
      block.names.push_back(var.name + "." + level);
      block.kinds.push_back(ColumnKind::Indicator);
    }
  block.values = Tensor64({records.size(), block.names.size()});
  for (std::size_t i = 0; i < records.size(); ++i) {
    std::size_t offset = 0;
    for (const auto& var : categorical_variables()) {
      const std::string level = var.value(records[i]);
      const auto it = std::find(var.levels.begin(), var.levels.end(), level);
      if (it == var.levels.end()) {
        throw ManifestError("record " + records[i].id + ": unseen " + var.name + " level '" + level + "'");
      }
      block.values(i, offset + static_cast<std::size_t>(it - var.levels.begin())) = 1.0;
      offset += var.levels.size();
    }
  }
  return block;
}

/// Continuous hedonic columns (every numeric column except the price) plus the
/// two 0/1 amenity dummies. Records must already be imputed.
inline ColumnBlock numeric_block(std::span<const PropertyRecord> records) {
  ColumnBlock block;
  for (const auto& col : numeric_columns()) {
    if (col == "sale_price") continue;
    block.names.push_back(col);
    block.kinds.push_back(ColumnKind::Continuous);
  }
  block.names.push_back("pool_sauna");
  block.kinds.push_back(ColumnKind::Indicator);
  block.names.push_back("solar");
  block.kinds.push_back(ColumnKind::Indicator);
  block.values = Tensor64({records.size(), block.names.size()});
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    std::size_t c = 0;
    for (const auto& col : numeric_columns()) {
      if (col == "sale_price") continue;
      const auto v = numeric_value(r, col);
      if (!v) throw ManifestError("record " + r.id + ": " + col + " still missing after imputation");
      block.values(i, c++) = *v;
    }
    if (!r.pool_sauna || !r.solar) throw ManifestError("record " + r.id + ": dummy still missing after imputation");
    block.values(i, c++) = *r.pool_sauna;
    block.values(i, c++) = *r.solar;
  }
  return block;
}

inline ColumnBlock concat_columns(const ColumnBlock& a, const ColumnBlock& b) {
  if (a.names.empty()) return b;
  if (b.names.empty()) return a;
  const std::size_t n = a.values.rows();
  if (b.values.rows() != n) throw ShapeError("concat_columns: row counts differ");
  ColumnBlock out;
  out.names = a.names;
  out.names.insert(out.names.end(), b.names.begin(), b.names.end());
  out.kinds = a.kinds;
  out.kinds.insert(out.kinds.end(), b.kinds.begin(), b.kinds.end());
  const std::size_t pa = a.values.cols(), pb = b.values.cols();
  out.values = Tensor64({n, pa + pb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values.data() + i * pa, pa, out.values.data() + i * (pa + pb));
    std::copy_n(b.values.data() + i * pb, pb, out.values.data() + i * (pa + pb) + pa);
  }
  return out;
}

/// Keeps the listed columns, in order.
inline ColumnBlock select_columns(const ColumnBlock& block, const std::vector<std::size_t>& keep) {
  ColumnBlock out;
  const std::size_t n = block.values.rows(), p = block.values.cols();
  for (auto c : keep) {
    out.names.push_back(block.names[c]);
    out.kinds.push_back(block.kinds[c]);
  }
  if (keep.empty()) return out;
  out.values = Tensor64({n, keep.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < keep.size(); ++j) out.values(i, j) = block.values.data()[i * p + keep[j]];
  return out;
}

/// Drops indicator columns that are constant over every row.
inline ColumnBlock drop_constant_indicators(const ColumnBlock& block) {
  std::vector<std::size_t> keep;
  const std::size_t n = block.values.rows();
  for (std::size_t c = 0; c < block.names.size(); ++c) {
    bool constant = true;
    for (std::size_t i = 1; i < n && constant; ++i) constant = block.values(i, c) == block.values(0, c);
    if (block.kinds[c] == ColumnKind::Continuous || !constant) keep.push_back(c);
  }
  return select_columns(block, keep);
}

/// Training-row statistics for the continuous columns of a block.
struct Standardizer {
  std::vector<std::string> names;
  std::vector<ColumnKind> kinds;
  std::vector<double> mean;
  std::vector<double> stddev;  // population std over training rows

  /// (x - mean) / std on continuous columns; indicator columns untouched;
  /// continuous columns with zero training spread are dropped.
  ColumnBlock transform(const ColumnBlock& block) const {
    if (block.names != names) throw ShapeError("standardize: column layout differs from fit");
    ColumnBlock out = block;
    std::vector<std::size_t> keep;
    for (std::size_t c = 0; c < names.size(); ++c) {
      if (kinds[c] == ColumnKind::Indicator) {
        keep.push_back(c);
        continue;
      }
      if (stddev[c] == 0.0) continue;
      keep.push_back(c);
      for (std::size_t i = 0; i < out.values.rows(); ++i) {
        out.values(i, c) = (out.values(i, c) - mean[c]) / stddev[c];
      }
    }
    return select_columns(out, keep);
  }

  /// Inverse of transform for the kept columns.
  ColumnBlock inverse(const ColumnBlock& standardized) const {
    ColumnBlock out = standardized;
    for (std::size_t j = 0; j < out.names.size(); ++j) {
      const auto it = std::find(names.begin(), names.end(), out.names[j]);
      const auto c = static_cast<std::size_t>(it - names.begin());
      if (kinds[c] == ColumnKind::Indicator) continue;
      for (std::size_t i = 0; i < out.values.rows(); ++i) {
        out.values(i, j) = out.values(i, j) * stddev[c] + mean[c];
      }
    }
    return out;
  }
};

inline Standardizer fit_standardizer(const ColumnBlock& block, std::span<const std::size_t> train_rows) {
  if (train_rows.empty()) throw std::invalid_argument("standardize: no training rows");
  Standardizer s;
  s.names = block.names;
  s.kinds = block.kinds;
  const std::size_t p = block.names.size();
  s.mean.assign(p, 0.0);
  s.stddev.assign(p, 0.0);
  for (std::size_t c = 0; c < p; ++c) {
    if (block.kinds[c] == ColumnKind::Indicator) continue;
    double sum = 0;
    for (auto i : train_rows) sum += block.values(i, c);
    const double mean = sum / static_cast<double>(train_rows.size());
    double ss = 0;
    for (auto i : train_rows) ss += (block.values(i, c) - mean) * (block.values(i, c) - mean);
    s.mean[c] = mean;
    s.stddev[c] = std::sqrt(ss / static_cast<double>(train_rows.size()));
  }
  return s;
}

struct SplitIndices {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
  std::uint64_t seed = 0;
};

inline constexpr std::uint64_t kDefaultSplitSeed = 1018;

/// Shuffles ids with a generator seeded by `seed` and cuts at floor(r0 n) and
/// floor((r0 + r1) n).
inline SplitIndices split_random(std::vector<std::string> ids, std::array<double, 3> ratios,
                                 std::uint64_t seed) {
  if (ids.size() < 3) throw std::invalid_argument("split_random: need at least 3 ids");
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (!(ratios[0] > 0 && ratios[1] > 0 && ratios[2] > 0) || std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("split_random: ratios must be positive and sum to 1");
  }
  Rng rng(seed);
  rng.shuffle(ids);
  const double n = static_cast<double>(ids.size());
  const auto cut1 = static_cast<std::size_t>(std::floor(ratios[0] * n + 1e-9));
  const auto cut2 = static_cast<std::size_t>(std::floor((ratios[0] + ratios[1]) * n + 1e-9));
  SplitIndices s;
  s.seed = seed;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(cut1));
  s.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(cut1), ids.begin() + static_cast<std::ptrdiff_t>(cut2));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(cut2), ids.end());
  return s;
}

/// Model-ready rows: ids, column names, standardized values and the target.
struct DesignMatrix {
  std::vector<std::string> row_ids;
  std::vector<std::string> columns;
  Tensor64 values;  // rows x columns
  Tensor64 y;       // $/sqft

  std::size_t rows() const { return row_ids.size(); }
};

struct PipelineOptions {
  double winsor_lower = 1.0;
  double winsor_upper = 99.0;
  std::vector<std::string> winsor_columns = default_winsor_columns();
  std::array<double, 3> split_ratios{0.70, 0.15, 0.15};
  std::uint64_t seed = kDefaultSplitSeed;
};

struct PreparedData {
  DesignMatrix train;
  DesignMatrix validation;
  DesignMatrix test;
  SplitIndices split;
  std::vector<std::string> columns;
};

/// Full tabular pipeline. When `features` is given, only properties present
/// in the cache are used and their pooled image features are appended as
/// continuous columns "img.<k>".
inline PreparedData prepare_dataset(std::span<const PropertyRecord> input,
                                    const PipelineOptions& opt,
                                    const FeatureCache* features = nullptr) {
  std::vector<PropertyRecord> records;
  for (const auto& r : input)
    if (!features || features->contains(r.id)) records.push_back(r);
  if (records.size() < 3) throw ShapeError("pipeline: fewer than 3 usable properties");

  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  SplitIndices split = split_random(ids, opt.split_ratios, opt.seed);

  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < records.size(); ++i) row_of[records[i].id] = i;
  auto rows_for = [&](const std::vector<std::string>& part) {
    std::vector<std::size_t> rows;
    for (const auto& id : part) rows.push_back(row_of.at(id));
    return rows;
  };
  const std::vector<std::size_t> train_rows = rows_for(split.train);
  std::vector<PropertyRecord> train_records;
  for (auto i : train_rows) train_records.push_back(records[i]);

  records = impute(std::move(records), train_records);
  train_records.clear();
  for (auto i : train_rows) train_records.push_back(records[i]);
  records = apply_winsor_limits(
      std::move(records), winsor_limits(train_records, opt.winsor_lower, opt.winsor_upper, opt.winsor_columns));

  ColumnBlock block = concat_columns(numeric_block(records), one_hot(records));
  if (features) {
    ColumnBlock img;
    for (std::size_t k = 0; k < features->dim(); ++k) {
      img.names.push_back("img." + std::to_string(k));
      img.kinds.push_back(ColumnKind::Continuous);
    }
    img.values = Tensor64({records.size(), features->dim()});
    for (std::size_t i = 0; i < records.size(); ++i) {
      const Tensor& f = features->at(records[i].id);
      for (std::size_t k = 0; k < f.size(); ++k) img.values(i, k) = f[k];
    }
    block = concat_columns(block, img);
  }
  block = drop_constant_indicators(block);
  block = fit_standardizer(block, train_rows).transform(block);
  const Tensor64 y = make_target(records);

  auto materialize = [&](const std::vector<std::string>& part) {
    DesignMatrix m;
    m.row_ids = part;
    m.columns = block.names;
    const std::size_t p = block.names.size();
    m.values = Tensor64({part.size(), p});
    m.y = Tensor64({part.size()});
    for (std::size_t i = 0; i < part.size(); ++i) {
      const std::size_t r = row_of.at(part[i]);
      std::copy_n(block.values.data() + r * p, p, m.values.data() + i * p);
      m.y[i] = y[r];
    }
    return m;
  };
  PreparedData out{materialize(split.train), materialize(split.validation), materialize(split.test),
                   std::move(split), block.names};
  return out;
}

}  // namespace hedonic
