#pragma once

// Vision Transformer backbone: configuration presets, named parameter store,
// and a forward pass that can optionally record the activations needed for
// backpropagation (see vit_backward.hpp).
//
// Layout conventions
//   * linear layers store weights as [in, out] and compute y = x W + b
//   * qkv output columns are [q | k | v], each split into heads of D/heads
//   * patches are flattened channel-major: c * N * N + py * N + px
//   * blocks are pre-norm: x + attn(ln1(x)), then x + mlp(ln2(x))

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "hedonic/errors.hpp"
#include "hedonic/image.hpp"
#include "hedonic/rng.hpp"
#include "hedonic/tensor.hpp"

namespace hedonic {

struct ViTConfig {
  std::string name;
  std::size_t patch_size = 16;
  std::size_t depth = 12;
  std::size_t dim = 384;
  std::size_t heads = 6;
  double mlp_ratio = 4.0;
  std::size_t input_size = 224;
  double ln_eps = kLayerNormEps;

  std::size_t grid() const { return input_size / patch_size; }
  std::size_t token_count() const { return grid() * grid() + 1; }
  std::size_t head_dim() const { return dim / heads; }
  std::size_t hidden_dim() const {
    return static_cast<std::size_t>(std::lround(mlp_ratio * static_cast<double>(dim)));
  }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  void validate() const {
    if (patch_size == 0 || depth == 0 || dim == 0 || heads == 0 || input_size == 0) {
      throw ConfigError("ViTConfig: all extents must be positive");
    }
    if (dim % heads != 0) throw ConfigError("ViTConfig: dim must be divisible by heads");
    if (input_size % patch_size != 0) {
      throw ConfigError("ViTConfig: input size must be divisible by patch size");
    }
    if (!(mlp_ratio > 0.0)) throw ConfigError("ViTConfig: mlp_ratio must be positive");
  }

  bool operator==(const ViTConfig&) const = default;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"vit-s/16", "vit-s/8", "vit-b/16", "vit-b/8",
                                                 "vit-mini/8"};
  return names;
}

/// Named architecture presets. "vit-mini/8" is a 32x32-input toy backbone
/// used for desk-scale pretraining and tests.
inline ViTConfig preset(std::string_view name) {
  ViTConfig c;
  c.name = std::string(name);
  if (name == "vit-s/16" || name == "vit-s/8") {
    c.depth = 12;
    c.dim = 384;
    c.heads = 6;
    c.patch_size = name == "vit-s/16" ? 16 : 8;
  } else if (name == "vit-b/16" || name == "vit-b/8") {
    c.depth = 12;
    c.dim = 768;
    c.heads = 12;
    c.patch_size = name == "vit-b/16" ? 16 : 8;
  } else if (name == "vit-mini/8") {
    c.depth = 2;
    c.dim = 64;
    c.heads = 4;
    c.patch_size = 8;
    c.input_size = 32;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "'");
  }
  c.validate();
  return c;
}

/// Display name used in reports, e.g. "ViT-B/8".
inline std::string display_name(std::string_view preset_name) {
  std::string out(preset_name);
  if (out.rfind("vit-", 0) == 0) {
    out[0] = 'V';
    out[1] = 'i';
    out[2] = 'T';
    for (std::size_t i = 4; i < out.size() && out[i] != '/'; ++i) {
      out[i] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[i])));
    }
  }
  return out;
}

/// Ordered map from dotted parameter name to tensor.
template <class T>
class BasicWeightStore {
 public:
  using map_type = std::map<std::string, BasicTensor<T>>;

  void insert(const std::string& name, BasicTensor<T> t) {
    if (!params_.emplace(name, std::move(t)).second) {
      throw WeightFormatError("duplicate parameter " + name);
    }
  }
  void assign(const std::string& name, BasicTensor<T> t) { params_[name] = std::move(t); }

  const BasicTensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw WeightFormatError("missing parameter " + name);
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw WeightFormatError("missing parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }

  /// Total number of scalar parameters whose names start with prefix.
  std::size_t parameter_count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_)
      if (std::string_view(k).substr(0, prefix.size()) == prefix) n += v.size();
    return n;
  }

  /// Copy without the parameters under prefix.
  BasicWeightStore without_prefix(std::string_view prefix) const {
    BasicWeightStore out;
    for (const auto& [k, v] : params_)
      if (std::string_view(k).substr(0, prefix.size()) != prefix) out.params_.emplace(k, v);
    return out;
  }

  /// Zero tensors with the same names and shapes.
  BasicWeightStore zeros_like() const {
    BasicWeightStore out;
    for (const auto& [k, v] : params_) out.params_.emplace(k, BasicTensor<T>(v.shape()));
    return out;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  bool operator==(const BasicWeightStore&) const = default;

 private:
  map_type params_;
};

using WeightStore = BasicWeightStore<float>;

template <class To, class From>
BasicWeightStore<To> store_cast(const BasicWeightStore<From>& s) {
  BasicWeightStore<To> out;
  for (const auto& [k, v] : s) out.insert(k, tensor_cast<To>(v));
  return out;
}

inline std::string block_key(std::size_t i, std::string_view leaf) {
  return "blocks." + std::to_string(i) + "." + std::string(leaf);
}

/// Every backbone parameter the config demands, with its exact shape.
inline std::vector<std::pair<std::string, Shape>> backbone_shapes(const ViTConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.dim, h = cfg.hidden_dim();
  std::vector<std::pair<std::string, Shape>> out = {
      {"patch_embed.weight", {cfg.patch_dim(), d}},
      {"patch_embed.bias", {d}},
      {"cls_token", {1, d}},
      {"pos_embed", {cfg.token_count(), d}},
  };
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    out.push_back({block_key(i, "norm1.weight"), {d}});
    out.push_back({block_key(i, "norm1.bias"), {d}});
    out.push_back({block_key(i, "attn.qkv.weight"), {d, 3 * d}});
    out.push_back({block_key(i, "attn.qkv.bias"), {3 * d}});
    out.push_back({block_key(i, "attn.proj.weight"), {d, d}});
    out.push_back({block_key(i, "attn.proj.bias"), {d}});
    out.push_back({block_key(i, "norm2.weight"), {d}});
    out.push_back({block_key(i, "norm2.bias"), {d}});
    out.push_back({block_key(i, "mlp.fc1.weight"), {d, h}});
    out.push_back({block_key(i, "mlp.fc1.bias"), {h}});
    out.push_back({block_key(i, "mlp.fc2.weight"), {h, d}});
    out.push_back({block_key(i, "mlp.fc2.bias"), {d}});
  }
  out.push_back({"norm.weight", {d}});
  out.push_back({"norm.bias", {d}});
  return out;
}

/// Checks the store holds exactly the backbone parameters of cfg. Names
/// starting with allowed_extra_prefix are ignored.
template <class T>
void validate_backbone(const BasicWeightStore<T>& w, const ViTConfig& cfg,
                       std::string_view allowed_extra_prefix = {}) {
  const auto shapes = backbone_shapes(cfg);
  for (const auto& [name, shape] : shapes) {
    if (!w.contains(name)) throw WeightFormatError("missing parameter " + name);
    if (w.at(name).shape() != shape) {
      throw WeightFormatError("parameter " + name + " has shape " +
                              shape_string(w.at(name).shape()) + ", expected " +
                              shape_string(shape));
    }
  }
  for (const auto& [name, t] : w) {
    if (!allowed_extra_prefix.empty() &&
        std::string_view(name).substr(0, allowed_extra_prefix.size()) == allowed_extra_prefix) {
      continue;
    }
    bool known = false;
    for (const auto& s : shapes) known = known || s.first == name;
    if (!known) throw WeightFormatError("unexpected parameter " + name);
  }
}

/// Random backbone: truncated normal (std 0.02) for matrices and the
/// cls/positional embeddings, zero biases, unit layer-norm scales.
template <class T = float>
BasicWeightStore<T> init_backbone(const ViTConfig& cfg, Rng& rng) {
  BasicWeightStore<T> w;
  for (const auto& [name, shape] : backbone_shapes(cfg)) {
    BasicTensor<T> t(shape);
    const bool is_norm = name.find("norm") != std::string::npos;
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    if (is_norm && !is_bias) {
      t.fill(T{1});
    } else if (!is_bias) {
      for (auto& v : t.values()) v = static_cast<T>(rng.truncated_normal(0.02));
    }
    w.insert(name, std::move(t));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Primitive layers. Each forward optionally fills a cache used by the matching
// backward in vit_backward.hpp.

template <class T>
struct LayerNormCache {
  BasicTensor<T> xhat;
  std::vector<double> rstd;
};

template <class T>
BasicTensor<T> layer_norm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                                  const BasicTensor<T>& beta, double eps,
                                  LayerNormCache<T>* cache) {
  if (!cache) return layer_norm(x, gamma, beta, eps);
  const std::size_t n = x.last_dim();
  if (gamma.size() != n || beta.size() != n) throw ShapeError("layer_norm: gamma/beta mismatch");
  const std::size_t rows = x.size() / n;
  BasicTensor<T> out(x.shape());
  cache->xhat = BasicTensor<T>(x.shape());
  cache->rstd.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    const double denom = var + eps;
    const double rstd = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
    cache->rstd[r] = rstd;
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (in[j] - mean) * rstd;
      cache->xhat.data()[r * n + j] = static_cast<T>(xh);
      out.data()[r * n + j] = static_cast<T>(xh * gamma[j] + beta[j]);
    }
  }
  require_finite(out, "layer_norm");
  return out;
}

/// x W + b for row-major x.
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  BasicTensor<T> y = matmul(x, w);
  add_row_bias(y, b);
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_derivative(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

template <class T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(gelu(static_cast<double>(x[i])));
  return y;
}

/// Columns [c0, c0 + width) of a matrix.
template <class T>
BasicTensor<T> column_slice(const BasicTensor<T>& m, std::size_t c0, std::size_t width) {
  const std::size_t rows = m.rows(), cols = m.cols();
  BasicTensor<T> out({rows, width});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(m.data() + r * cols + c0, width, out.data() + r * width);
  return out;
}

template <class T>
void column_assign(BasicTensor<T>& m, std::size_t c0, const BasicTensor<T>& part) {
  const std::size_t rows = m.rows(), cols = m.cols(), width = part.cols();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(part.data() + r * width, width, m.data() + r * cols + c0);
}

/// Views into one encoder block's parameters.
template <class T>
struct BlockParams {
  const BasicTensor<T>& norm1_w;
  const BasicTensor<T>& norm1_b;
  const BasicTensor<T>& qkv_w;
  const BasicTensor<T>& qkv_b;
  const BasicTensor<T>& proj_w;
  const BasicTensor<T>& proj_b;
  const BasicTensor<T>& norm2_w;
  const BasicTensor<T>& norm2_b;
  const BasicTensor<T>& fc1_w;
  const BasicTensor<T>& fc1_b;
  const BasicTensor<T>& fc2_w;
  const BasicTensor<T>& fc2_b;
};

template <class T>
BlockParams<T> block_params(const BasicWeightStore<T>& w, std::size_t i) {
  return BlockParams<T>{w.at(block_key(i, "norm1.weight")),    w.at(block_key(i, "norm1.bias")),
                        w.at(block_key(i, "attn.qkv.weight")), w.at(block_key(i, "attn.qkv.bias")),
                        w.at(block_key(i, "attn.proj.weight")), w.at(block_key(i, "attn.proj.bias")),
                        w.at(block_key(i, "norm2.weight")),    w.at(block_key(i, "norm2.bias")),
                        w.at(block_key(i, "mlp.fc1.weight")),  w.at(block_key(i, "mlp.fc1.bias")),
                        w.at(block_key(i, "mlp.fc2.weight")),  w.at(block_key(i, "mlp.fc2.bias"))};
}

template <class T>
struct AttentionCache {
  LayerNormCache<T> ln;
  BasicTensor<T> normed;              // ln1(x), input of the qkv projection
  BasicTensor<T> qkv;                 // T x 3D
  std::vector<BasicTensor<T>> probs;  // per head, T x T
  BasicTensor<T> context;             // concatenated heads, input of proj
};

template <class T>
struct MlpCache {
  LayerNormCache<T> ln;
  BasicTensor<T> normed;  // ln2(x)
  BasicTensor<T> pre;     // fc1 output before GELU
  BasicTensor<T> act;     // GELU output
};

/// Called with (block, head, softmax probabilities) for every attention map.
template <class T>
using AttentionObserver = std::function<void(std::size_t, std::size_t, const BasicTensor<T>&)>;

/// x + MHSA(LN(x)) for a T x D token matrix.
template <class T>
BasicTensor<T> attention_block(const BasicTensor<T>& x, const BlockParams<T>& p,
                               const ViTConfig& cfg,
                               std::type_identity_t<AttentionCache<T>>* cache = nullptr,
                               const std::type_identity_t<AttentionObserver<T>>* observer = nullptr,
                               std::size_t block_index = 0) {
  const std::size_t d = cfg.dim, heads = cfg.heads, hd = cfg.head_dim();
  if (x.rank() != 2 || x.cols() != d) {
    throw ShapeError("attention_block: expected Tx" + std::to_string(d) + " tokens, got " +
                     shape_string(x.shape()));
  }
  if (p.qkv_w.shape() != Shape{d, 3 * d} || p.qkv_b.size() != 3 * d ||
      p.proj_w.shape() != Shape{d, d} || p.proj_b.size() != d) {
    throw ShapeError("attention_block: mis-shaped attention weights");
  }
  const std::size_t tokens = x.rows();
  BasicTensor<T> normed =
      layer_norm_forward(x, p.norm1_w, p.norm1_b, cfg.ln_eps, cache ? &cache->ln : nullptr);
  BasicTensor<T> qkv = linear(normed, p.qkv_w, p.qkv_b);
  BasicTensor<T> context({tokens, d});
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (cache) cache->probs.clear();
  for (std::size_t h = 0; h < heads; ++h) {
    BasicTensor<T> q = column_slice(qkv, h * hd, hd);
    BasicTensor<T> k = column_slice(qkv, d + h * hd, hd);
    BasicTensor<T> v = column_slice(qkv, 2 * d + h * hd, hd);
    BasicTensor<T> scores = matmul_nt(q, k);
    for (auto& s : scores.values()) s = static_cast<T>(s * scale);
    BasicTensor<T> probs = softmax_last_dim(scores, 1.0);
    if (observer && *observer) (*observer)(block_index, h, probs);
    column_assign(context, h * hd, matmul(probs, v));
    if (cache) cache->probs.push_back(std::move(probs));
  }
  BasicTensor<T> out = linear(context, p.proj_w, p.proj_b);
  add_inplace(out, x);
  if (cache) {
    cache->normed = std::move(normed);
    cache->qkv = std::move(qkv);
    cache->context = std::move(context);
  }
  return out;
}

/// x + fc2(gelu(fc1(LN(x)))) applied row-wise.
template <class T>
BasicTensor<T> mlp_block(const BasicTensor<T>& x, const BlockParams<T>& p, const ViTConfig& cfg,
                         std::type_identity_t<MlpCache<T>>* cache = nullptr) {
  const std::size_t d = cfg.dim, hidden = cfg.hidden_dim();
  if (p.fc1_w.shape() != Shape{d, hidden} || p.fc1_b.size() != hidden ||
      p.fc2_w.shape() != Shape{hidden, d} || p.fc2_b.size() != d) {
    throw ShapeError("mlp_block: mis-shaped MLP weights");
  }
  BasicTensor<T> normed =
      layer_norm_forward(x, p.norm2_w, p.norm2_b, cfg.ln_eps, cache ? &cache->ln : nullptr);
  BasicTensor<T> pre = linear(normed, p.fc1_w, p.fc1_b);
  BasicTensor<T> act = gelu(pre);
  BasicTensor<T> out = linear(act, p.fc2_w, p.fc2_b);
  add_inplace(out, x);
  if (cache) {
    cache->normed = std::move(normed);
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

/// Splits a 3xSxS image into (S/N)^2 rows of 3N^2 values, row r*(S/N)+c
/// holding patch (r, c).
template <class T>
BasicTensor<T> patchify(const BasicTensor<T>& img, std::size_t patch) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw ShapeError("patchify: expected 3xHxW image, got " + shape_string(img.shape()));
  }
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: image " + shape_string(img.shape()) +
                     " is not divisible into " + std::to_string(patch) + "-pixel patches");
  }
  const std::size_t gh = h / patch, gw = w / patch;
  BasicTensor<T> out({gh * gw, 3 * patch * patch});
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c) {
      T* dst = out.data() + (r * gw + c) * 3 * patch * patch;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px)
            *dst++ = img[(ch * h + r * patch + py) * w + c * patch + px];
    }
  return out;
}

inline Tensor patchify(const ImageTensor& img, const ViTConfig& cfg) {
  if (img.height() != cfg.input_size || img.width() != cfg.input_size) {
    throw ShapeError("patchify: expected " + std::to_string(cfg.input_size) + "x" +
                     std::to_string(cfg.input_size) + " input");
  }
  return patchify(img.tensor(), cfg.patch_size);
}

/// Linear map taking a (from x from) positional grid to (to x to) by bilinear
/// interpolation with half-pixel alignment. Rows index target cells.
inline Tensor64 grid_interpolation_matrix(std::size_t from, std::size_t to) {
  auto axis = [&](std::size_t t, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(t) + 0.5) * static_cast<double>(from) / static_cast<double>(to) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(from - 1));
    i0 = static_cast<std::size_t>(s);
    i1 = std::min(i0 + 1, from - 1);
    f = s - static_cast<double>(i0);
  };
  Tensor64 m({to * to, from * from});
  for (std::size_t y = 0; y < to; ++y) {
    std::size_t y0, y1;
    double fy;
    axis(y, y0, y1, fy);
    for (std::size_t x = 0; x < to; ++x) {
      std::size_t x0, x1;
      double fx;
      axis(x, x0, x1, fx);
      const std::size_t row = y * to + x;
      m(row, y0 * from + x0) += (1 - fy) * (1 - fx);
      m(row, y0 * from + x1) += (1 - fy) * fx;
      m(row, y1 * from + x0) += fy * (1 - fx);
      m(row, y1 * from + x1) += fy * fx;
    }
  }
  return m;
}

/// Positional embeddings for a grid x grid token layout: the stored table when
/// the grid matches, otherwise the patch rows interpolated bilinearly.
template <class T>
BasicTensor<T> positional_embedding(const BasicTensor<T>& pos, std::size_t stored_grid,
                                    std::size_t grid) {
  if (grid == stored_grid) return pos;
  const std::size_t d = pos.cols();
  const Tensor64 m = grid_interpolation_matrix(stored_grid, grid);
  BasicTensor<T> out({grid * grid + 1, d});
  std::copy_n(pos.data(), d, out.data());
  for (std::size_t r = 0; r < grid * grid; ++r)
    for (std::size_t c = 0; c < stored_grid * stored_grid; ++c) {
      const double wgt = m(r, c);
      if (wgt == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j)
        out((r + 1), j) += static_cast<T>(wgt * pos((c + 1), j));
    }
  return out;
}

/// Token matrix: row 0 = cls + pos_0, row i = patch_i W + b + pos_i.
template <class T>
BasicTensor<T> embed(const BasicTensor<T>& patches, const BasicWeightStore<T>& w,
                     const ViTConfig& cfg) {
  const auto& proj = w.at("patch_embed.weight");
  const auto& bias = w.at("patch_embed.bias");
  const auto& cls = w.at("cls_token");
  const auto& pos = w.at("pos_embed");
  const std::size_t d = cfg.dim;
  if (proj.shape() != Shape{cfg.patch_dim(), d} || bias.size() != d || cls.size() != d ||
      pos.shape() != Shape{cfg.token_count(), d}) {
    throw WeightFormatError("embed: missing or mis-shaped embedding weights");
  }
  if (patches.rank() != 2 || patches.cols() != cfg.patch_dim()) {
    throw ShapeError("embed: patch matrix has shape " + shape_string(patches.shape()));
  }
  const std::size_t n = patches.rows();
  const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  if (grid * grid != n) throw ShapeError("embed: patch count is not a square grid");
  const BasicTensor<T> pe = positional_embedding(pos, cfg.grid(), grid);
  const BasicTensor<T> projected = linear(patches, proj, bias);
  BasicTensor<T> tokens({n + 1, d});
  for (std::size_t j = 0; j < d; ++j) tokens(0, j) = cls[j] + pe(0, j);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) tokens(i + 1, j) = projected(i, j) + pe(i + 1, j);
  return tokens;
}

/// Activations recorded by encode() for backpropagation.
template <class T>
struct EncoderCache {
  std::size_t grid = 0;
  BasicTensor<T> patches;
  std::vector<AttentionCache<T>> attn;
  std::vector<MlpCache<T>> mlp;
  LayerNormCache<T> final_ln;
};

/// Runs the encoder on a 3xSxS image (S a multiple of the patch size) and
/// returns the final layer-normalized token matrix.
template <class T>
BasicTensor<T> encode(const BasicTensor<T>& image, const BasicWeightStore<T>& w,
                      const ViTConfig& cfg, std::type_identity_t<EncoderCache<T>>* cache = nullptr,
                      const std::type_identity_t<AttentionObserver<T>>* observer = nullptr) {
  BasicTensor<T> patches = patchify(image, cfg.patch_size);
  BasicTensor<T> x = embed(patches, w, cfg);
  if (cache) {
    cache->grid = image.dim(1) / cfg.patch_size;
    cache->patches = std::move(patches);
    cache->attn.clear();
    cache->mlp.clear();
    cache->attn.resize(cfg.depth);
    cache->mlp.resize(cfg.depth);
  }
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    try {
      const BlockParams<T> p = block_params(w, i);
      x = attention_block(x, p, cfg, cache ? &cache->attn[i] : nullptr, observer, i);
      x = mlp_block(x, p, cfg, cache ? &cache->mlp[i] : nullptr);
      require_finite(x, "encoder block");
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("non-finite activation in encoder block " + std::to_string(i) + " (" +
                           e.what() + ")");
    }
  }
  return layer_norm_forward(x, w.at("norm.weight"), w.at("norm.bias"), cfg.ln_eps,
                            cache ? &cache->final_ln : nullptr);
}

/// One image's backbone feature: the final-norm CLS token.
struct FeatureVector {
  Tensor values;  // [D]
  std::string image_id;

  std::size_t dim() const { return values.size(); }
  bool operator==(const FeatureVector&) const = default;
};

/// Full inference pass: embed, depth x (attention, MLP), final norm, CLS row.
inline FeatureVector forward(const ImageTensor& img, const WeightStore& w, const ViTConfig& cfg,
                             std::string image_id = {},
                             const AttentionObserver<float>* observer = nullptr) {
  validate_backbone(w, cfg);
  if (img.height() != cfg.input_size || img.width() != cfg.input_size) {
    throw ShapeError("forward: expected a " + std::to_string(cfg.input_size) + "x" +
                     std::to_string(cfg.input_size) + " image");
  }
  const Tensor tokens = encode(img.tensor(), w, cfg, nullptr, observer);
  std::vector<float> cls(tokens.data(), tokens.data() + cfg.dim);
  return FeatureVector{Tensor::vector(std::move(cls)), std::move(image_id)};
}

}  // namespace hedonic
