#pragma once

// Per-property image features: extract one backbone feature per image, pool
// them into a single vector, and persist the result as a VHFC1 cache.
//
// VHFC1 text format
//   VHFC1 <backbone-id> <dim>
//   <property-id>,<v_1>,...,<v_dim>          one line per property
// Values are printed with 9 significant digits so floats round-trip exactly.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hedonic/errors.hpp"
#include "hedonic/image.hpp"
#include "hedonic/parallel.hpp"
#include "hedonic/vit.hpp"

namespace hedonic {

struct PropertyImageSet {
  std::string id;
  std::vector<std::string> paths;  // interior, exterior and street views, any order
};

/// One feature per decodable image. Undecodable images are skipped with a
/// warning; an error is raised only when every image fails.
inline std::vector<FeatureVector> extract_property_features(
    const PropertyImageSet& set, const WeightStore& weights, const ViTConfig& cfg,
    const std::filesystem::path& base_dir = {}, std::vector<std::string>* warnings = nullptr) {
  if (set.paths.empty()) throw ImageError("property " + set.id + " has no images");
  std::vector<FeatureVector> out;
  std::string last_error;
  for (const auto& rel : set.paths) {
    const std::filesystem::path path = base_dir.empty() ? std::filesystem::path(rel) : base_dir / rel;
    RasterImage img;
    try {
      img = load_image(path);
    } catch (const ImageError& e) {
      last_error = e.what();
      if (warnings) warnings->push_back("property " + set.id + ": skipped " + e.what());
      continue;
    }
    out.push_back(forward(preprocess_for_extraction(img, cfg.input_size), weights, cfg, rel));
  }
  if (out.empty()) {
    throw ImageError("property " + set.id + ": no decodable images (" + last_error + ")");
  }
  return out;
}

namespace detail {

inline void require_uniform(std::span<const FeatureVector> vectors) {
  if (vectors.empty()) throw std::invalid_argument("pool: empty feature list");
  const std::size_t d = vectors.front().dim();
  for (const auto& v : vectors) {
    if (v.dim() != d) throw ShapeError("pool: feature dimensions differ");
  }
}

}  // namespace detail

/// Elementwise mean. Each coordinate is summed in sorted order in double
/// precision, so the result is exactly invariant to the order of the list.
inline FeatureVector pool_average(std::span<const FeatureVector> vectors) {
  detail::require_uniform(vectors);
  const std::size_t d = vectors.front().dim(), n = vectors.size();
  Tensor out({d});
  std::vector<float> column(n);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = vectors[i].values[j];
    std::sort(column.begin(), column.end());
    double sum = 0.0;
    for (float v : column) sum += v;
    out[j] = static_cast<float>(sum / static_cast<double>(n));
  }
  return FeatureVector{std::move(out), {}};
}

/// Weighted mean with non-negative weights (e.g. per image type). Uniform
/// weights reduce to pool_average up to rounding.
inline FeatureVector pool_weighted(std::span<const FeatureVector> vectors,
                                   std::span<const double> weights) {
  detail::require_uniform(vectors);
  if (weights.size() != vectors.size()) throw ShapeError("pool_weighted: one weight per vector");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("pool_weighted: negative weight");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("pool_weighted: weights sum to zero");
  const std::size_t d = vectors.front().dim();
  Tensor out({d});
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < vectors.size(); ++i) s += weights[i] * vectors[i].values[j];
    out[j] = static_cast<float>(s / total);
  }
  return FeatureVector{std::move(out), {}};
}

/// Pooled features keyed by property id, bound to one backbone identity.
class FeatureCache {
 public:
  FeatureCache() = default;
  FeatureCache(std::string backbone_id, std::size_t dim)
      : backbone_id_(std::move(backbone_id)), dim_(dim) {
    if (backbone_id_.empty() || backbone_id_.find_first_of(" \t\r\n") != std::string::npos) {
      throw CacheError("backbone id must be a non-empty token");
    }
  }

  const std::string& backbone_id() const noexcept { return backbone_id_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void add(const std::string& id, Tensor values) {
    if (id.empty() || id.find_first_of(",\r\n") != std::string::npos) {
      throw CacheError("property id '" + id + "' cannot be stored in a feature cache");
    }
    if (values.size() != dim_) throw CacheError("feature for " + id + " has wrong dimension");
    if (index_.count(id)) throw CacheError("duplicate property id " + id);
    index_.emplace(id, entries_.size());
    entries_.emplace_back(id, std::move(values));
  }

  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  const Tensor& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw CacheError("no cached features for " + id);
    return entries_[it->second].second;
  }
  const std::vector<std::pair<std::string, Tensor>>& entries() const noexcept { return entries_; }

  bool operator==(const FeatureCache& o) const {
    return backbone_id_ == o.backbone_id_ && dim_ == o.dim_ && entries_ == o.entries_;
  }

 private:
  std::string backbone_id_;
  std::size_t dim_ = 0;
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline std::string encode_cache(const FeatureCache& cache) {
  std::string out = "VHFC1 " + cache.backbone_id() + " " + std::to_string(cache.dim()) + "\n";
  char buf[32];
  for (const auto& [id, values] : cache.entries()) {
    out += id;
    for (float v : values.values()) {
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(v));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline FeatureCache decode_cache(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw CacheError("VHFC1: empty cache");
  std::istringstream header(line);
  std::string magic, id;
  std::size_t dim = 0;
  if (!(header >> magic >> id >> dim) || magic != "VHFC1" || dim == 0) {
    throw CacheError("VHFC1: bad header '" + line + "'");
  }
  FeatureCache cache(id, dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<float> values;
    values.reserve(dim);
    std::size_t pos = line.find(',');
    if (pos == std::string::npos) throw CacheError("VHFC1: line " + std::to_string(line_no) + " has no values");
    const std::string pid = line.substr(0, pos);
    while (pos != std::string::npos) {
      const std::size_t next = line.find(',', pos + 1);
      const std::string field = line.substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1);
      char* end = nullptr;
      const float v = std::strtof(field.c_str(), &end);
      if (field.empty() || end != field.c_str() + field.size()) {
        throw CacheError("VHFC1: bad number on line " + std::to_string(line_no));
      }
      values.push_back(v);
      pos = next;
    }
    if (values.size() != dim) {
      throw CacheError("VHFC1: line " + std::to_string(line_no) + " has " +
                       std::to_string(values.size()) + " values, expected " + std::to_string(dim));
    }
    cache.add(pid, Tensor::vector(std::move(values)));
  }
  return cache;
}

inline void save_cache(const FeatureCache& cache, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CacheError("cannot write " + path.string());
  out << encode_cache(cache);
}

inline FeatureCache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CacheError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_cache(ss.str());
}

struct Exclusion {
  std::string id;
  std::string reason;
  bool operator==(const Exclusion&) const = default;
};

struct CacheBuildResult {
  FeatureCache cache;
  std::vector<Exclusion> excluded;
  std::vector<std::string> warnings;
};

/// Pools features for every property with at least one decodable image.
/// Properties without images, or whose images all fail to decode, are listed
/// in `excluded` instead. Extraction runs on up to `threads` workers; output
/// order follows the input order.
inline CacheBuildResult build_cache(std::span<const PropertyImageSet> sets,
                                    const WeightStore& weights, const ViTConfig& cfg,
                                    const std::string& backbone, const std::filesystem::path& base_dir,
                                    std::size_t threads = 1) {
  validate_backbone(weights, cfg);
  struct Slot {
    bool ok = false;
    Tensor pooled;
    std::string error;
    std::vector<std::string> warnings;
  };
  std::vector<Slot> slots(sets.size());
  parallel_for(sets.size(), threads, [&](std::size_t i) {
    Slot& slot = slots[i];
    if (sets[i].paths.empty()) {
      slot.error = "no images";
      return;
    }
    try {
      const auto feats = extract_property_features(sets[i], weights, cfg, base_dir, &slot.warnings);
      slot.pooled = pool_average(feats).values;
      slot.ok = true;
    } catch (const ImageError& e) {
      slot.error = e.what();
    }
  });

  CacheBuildResult result{FeatureCache(backbone, cfg.dim), {}, {}};
  for (std::size_t i = 0; i < sets.size(); ++i) {
    auto& slot = slots[i];
    result.warnings.insert(result.warnings.end(), slot.warnings.begin(), slot.warnings.end());
    if (slot.ok) {
      result.cache.add(sets[i].id, std::move(slot.pooled));
    } else {
      result.excluded.push_back({sets[i].id, slot.error});
    }
  }
  return result;
}

inline std::string encode_exclusions(const std::vector<Exclusion>& excluded) {
  std::string out;
  for (const auto& e : excluded) out += e.id + "\t" + e.reason + "\n";
  return out;
}

}  // namespace hedonic
