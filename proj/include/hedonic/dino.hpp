#pragma once

// Self-distillation pretraining (student/teacher with centering, sharpened
// teacher softmax, cross-entropy, stop-gradient and EMA teacher updates).
//
// The student and teacher each hold a backbone plus a projection head under
// "head.fc<i>.weight/bias" (i = 1..head_layers, GELU between layers). Only
// the student receives gradients; the teacher follows it by EMA.

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "hedonic/errors.hpp"
#include "hedonic/image.hpp"
#include "hedonic/rng.hpp"
#include "hedonic/tensor.hpp"
#include "hedonic/vit.hpp"
#include "hedonic/vit_backward.hpp"

namespace hedonic {

struct DinoConfig {
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double ema_momentum = 0.996;
  double center_momentum = 0.9;
  std::size_t prototypes = 4096;  // K
  std::size_t head_hidden = 2048;
  std::size_t head_layers = 3;
  double learning_rate = 0.01;
  double grad_clip = 3.0;  // max global gradient L2 norm, 0 disables
  double head_init_std = 0.02;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  CropConfig crop;  // crop.local_views is the local view count L

  /// Desk-scale settings for the 32x32 "vit-mini/8" backbone.
  static DinoConfig toy() {
    DinoConfig d;
    d.prototypes = 64;
    d.head_hidden = 128;
    d.learning_rate = 0.1;
    d.head_init_std = 0.1;
    d.steps = 200;
    d.batch_size = 8;
    d.crop.global_size = 32;
    d.crop.local_size = 16;
    d.crop.local_views = 2;
    return d;
  }

  void validate() const {
    if (!(teacher_temperature > 0.0 && teacher_temperature < student_temperature)) {
      throw ConfigError("DinoConfig: need 0 < teacher temperature < student temperature");
    }
    if (!(ema_momentum > 0.0 && ema_momentum < 1.0)) {
      throw ConfigError("DinoConfig: EMA momentum must lie in (0, 1)");
    }
    if (!(center_momentum > 0.0 && center_momentum < 1.0)) {
      throw ConfigError("DinoConfig: center momentum must lie in (0, 1)");
    }
    if (prototypes == 0 || head_hidden == 0 || head_layers == 0 || batch_size == 0) {
      throw ConfigError("DinoConfig: prototypes, head sizes and batch size must be positive");
    }
    if (!(learning_rate >= 0.0)) throw ConfigError("DinoConfig: learning rate must be >= 0");
  }
};

inline std::string head_key(std::size_t layer, std::string_view leaf) {
  return "head.fc" + std::to_string(layer + 1) + "." + std::string(leaf);
}

/// Shapes of the projection head D -> hidden -> ... -> K.
inline std::vector<std::pair<std::string, Shape>> head_shapes(std::size_t dim,
                                                              const DinoConfig& dcfg) {
  std::vector<std::pair<std::string, Shape>> out;
  for (std::size_t l = 0; l < dcfg.head_layers; ++l) {
    const std::size_t in = l == 0 ? dim : dcfg.head_hidden;
    const std::size_t o = l + 1 == dcfg.head_layers ? dcfg.prototypes : dcfg.head_hidden;
    out.push_back({head_key(l, "weight"), {in, o}});
    out.push_back({head_key(l, "bias"), {o}});
  }
  return out;
}

template <class T>
struct HeadCache {
  std::vector<BasicTensor<T>> inputs;  // input of each linear layer
  std::vector<BasicTensor<T>> pre;     // pre-activation of each hidden layer
};

/// Projection head over a batch of feature rows.
template <class T>
BasicTensor<T> head_forward(const BasicTensor<T>& features, const BasicWeightStore<T>& w,
                            const DinoConfig& dcfg,
                            std::type_identity_t<HeadCache<T>>* cache = nullptr) {
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  BasicTensor<T> x = features;
  for (std::size_t l = 0; l < dcfg.head_layers; ++l) {
    BasicTensor<T> y = linear(x, w.at(head_key(l, "weight")), w.at(head_key(l, "bias")));
    if (cache) cache->inputs.push_back(x);
    if (l + 1 < dcfg.head_layers) {
      x = gelu(y);
      if (cache) cache->pre.push_back(std::move(y));
    } else {
      x = std::move(y);
    }
  }
  return x;
}

/// Returns d(loss)/d(features); accumulates head parameter gradients.
template <class T>
BasicTensor<T> head_backward(const BasicTensor<T>& dlogits, const BasicWeightStore<T>& w,
                             const DinoConfig& dcfg, const HeadCache<T>& cache,
                             BasicWeightStore<T>& grads) {
  BasicTensor<T> d = dlogits;
  for (std::size_t l = dcfg.head_layers; l-- > 0;) {
    d = linear_backward(cache.inputs[l], w.at(head_key(l, "weight")), d,
                        grads.at(head_key(l, "weight")), grads.at(head_key(l, "bias")));
    if (l > 0) {
      const BasicTensor<T>& pre = cache.pre[l - 1];
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = static_cast<T>(d[i] * gelu_derivative(static_cast<double>(pre[i])));
      }
    }
  }
  return d;
}

/// Teacher targets softmax((t - c) / tau_t), one row per global view.
template <class T>
BasicTensor<T> teacher_probabilities(const BasicTensor<T>& teacher_logits,
                                     const BasicTensor<T>& center, const DinoConfig& dcfg) {
  if (teacher_logits.rank() != 2 || teacher_logits.cols() != center.size()) {
    throw ShapeError("teacher logits do not match the center length");
  }
  BasicTensor<T> centered = teacher_logits;
  for (std::size_t r = 0; r < centered.rows(); ++r)
    for (std::size_t k = 0; k < centered.cols(); ++k) centered(r, k) -= center[k];
  return softmax_last_dim(centered, dcfg.teacher_temperature);
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor64 dstudent;  // d(loss)/d(student logits)
};

/// Cross-entropy between teacher and student view distributions, averaged
/// over all (teacher view t, student view s) pairs with s != t. Teacher views
/// are student views 0..V_t-1. The teacher side is a constant.
template <class T>
LossAndGrad dino_loss_and_grad(const BasicTensor<T>& student_logits,
                               const BasicTensor<T>& teacher_logits, const BasicTensor<T>& center,
                               const DinoConfig& dcfg) {
  if (student_logits.rank() != 2 || teacher_logits.rank() != 2 || student_logits.empty() ||
      teacher_logits.empty()) {
    throw ShapeError("dino_loss: empty view set");
  }
  const std::size_t k = student_logits.cols();
  if (teacher_logits.cols() != k || center.size() != k) {
    throw ShapeError("dino_loss: prototype counts disagree");
  }
  const std::size_t vs = student_logits.rows(), vt = teacher_logits.rows();
  const BasicTensor<T> pt = teacher_probabilities(teacher_logits, center, dcfg);
  const Tensor64 s64 = tensor_cast<double>(student_logits);
  const Tensor64 logp = log_softmax_last_dim(s64, dcfg.student_temperature);

  std::size_t pairs = 0;
  for (std::size_t t = 0; t < vt; ++t)
    for (std::size_t s = 0; s < vs; ++s) pairs += s != t;
  if (pairs == 0) throw ShapeError("dino_loss: need at least one cross-view pair");

  LossAndGrad out;
  out.dstudent = Tensor64({vs, k});
  for (std::size_t t = 0; t < vt; ++t) {
    for (std::size_t s = 0; s < vs; ++s) {
      if (s == t) continue;
      double h = 0.0;
      for (std::size_t j = 0; j < k; ++j) h -= static_cast<double>(pt(t, j)) * logp(s, j);
      out.loss += h;
      for (std::size_t j = 0; j < k; ++j) {
        out.dstudent(s, j) += (std::exp(logp(s, j)) - static_cast<double>(pt(t, j))) /
                              dcfg.student_temperature;
      }
    }
  }
  out.loss /= static_cast<double>(pairs);
  for (auto& v : out.dstudent.values()) v /= static_cast<double>(pairs);
  return out;
}

template <class T>
double dino_loss(const BasicTensor<T>& student_logits, const BasicTensor<T>& teacher_logits,
                 const BasicTensor<T>& center, const DinoConfig& dcfg) {
  return dino_loss_and_grad(student_logits, teacher_logits, center, dcfg).loss;
}

/// Mean entropy (nats) of the teacher target distributions.
inline double teacher_entropy(const Tensor& teacher_logits, const Tensor& center,
                              const DinoConfig& dcfg) {
  const Tensor p = teacher_probabilities(teacher_logits, center, dcfg);
  double h = 0.0;
  for (float v : p.values())
    if (v > 0.0f) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
  return h / static_cast<double>(p.rows());
}

/// c' = m c + (1 - m) * mean of the batch rows.
inline Tensor update_center(const Tensor& center, const Tensor& teacher_logits_batch, double m) {
  if (!(m > 0.0 && m < 1.0)) throw std::invalid_argument("update_center: m must lie in (0, 1)");
  if (teacher_logits_batch.rank() != 2 || teacher_logits_batch.empty()) {
    throw ShapeError("update_center: empty batch");
  }
  const std::size_t k = center.size();
  if (teacher_logits_batch.cols() != k) throw ShapeError("update_center: width mismatch");
  const std::size_t n = teacher_logits_batch.rows();
  Tensor out(center.shape());
  for (std::size_t j = 0; j < k; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += teacher_logits_batch(r, j);
    mean /= static_cast<double>(n);
    out[j] = static_cast<float>(m * center[j] + (1.0 - m) * mean);
  }
  return out;
}

struct DinoState {
  WeightStore student;
  WeightStore teacher;
  Tensor center;  // [K]
  std::size_t step = 0;
};

/// Random student (backbone + head), teacher copied from it, zero center.
inline DinoState init_dino_state(const ViTConfig& cfg, const DinoConfig& dcfg, Rng& rng) {
  dcfg.validate();
  DinoState s;
  s.student = init_backbone(cfg, rng);
  for (const auto& [name, shape] : head_shapes(cfg.dim, dcfg)) {
    Tensor t(shape);
    if (name.compare(name.size() - 6, 6, "weight") == 0) {
      for (auto& v : t.values()) v = static_cast<float>(rng.truncated_normal(dcfg.head_init_std));
    }
    s.student.insert(name, std::move(t));
  }
  s.teacher = s.student;
  s.center = Tensor({dcfg.prototypes});
  return s;
}

/// teacher' = lambda teacher + (1 - lambda) student, per parameter.
inline void update_teacher_ema(DinoState& state, double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw std::invalid_argument("update_teacher_ema: lambda must lie in (0, 1)");
  }
  if (state.teacher.size() != state.student.size()) {
    throw WeightFormatError("update_teacher_ema: student and teacher key sets differ");
  }
  const double take = 1.0 - lambda;
  for (auto& [name, t] : state.teacher) {
    if (!state.student.contains(name)) {
      throw WeightFormatError("update_teacher_ema: student lacks " + name);
    }
    const Tensor& s = state.student.at(name);
    if (s.shape() != t.shape()) throw WeightFormatError("update_teacher_ema: shape mismatch " + name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<float>(t[i] + take * (static_cast<double>(s[i]) - t[i]));
    }
  }
}

/// Backbone CLS feature of every view, stacked as rows.
template <class T>
BasicTensor<T> view_features(const std::vector<BasicTensor<T>>& views,
                             const BasicWeightStore<T>& w, const ViTConfig& cfg,
                             std::type_identity_t<std::vector<EncoderCache<T>>>* caches) {
  const std::size_t d = cfg.dim;
  BasicTensor<T> feats({views.size(), d});
  if (caches) {
    caches->clear();
    caches->resize(views.size());
  }
  for (std::size_t v = 0; v < views.size(); ++v) {
    const BasicTensor<T> tokens = encode(views[v], w, cfg, caches ? &(*caches)[v] : nullptr);
    std::copy_n(tokens.data(), d, feats.data() + v * d);
  }
  return feats;
}

/// Mean dino loss over images for fixed teacher logits; when grads is given,
/// also accumulates d(loss)/d(student parameters) into it. Each image's
/// teacher views are its first teacher_logits[i].rows() student views.
template <class T>
double student_objective(const BasicWeightStore<T>& student, const ViTConfig& cfg,
                         const DinoConfig& dcfg,
                         const std::vector<std::vector<BasicTensor<T>>>& views,
                         const std::vector<BasicTensor<T>>& teacher_logits,
                         const BasicTensor<T>& center, BasicWeightStore<T>* grads) {
  if (views.empty() || views.size() != teacher_logits.size()) {
    throw ShapeError("student_objective: empty or mismatched batch");
  }
  const double inv_batch = 1.0 / static_cast<double>(views.size());
  double total = 0.0;
  for (std::size_t b = 0; b < views.size(); ++b) {
    std::vector<EncoderCache<T>> caches;
    HeadCache<T> head_cache;
    const BasicTensor<T> feats = view_features(views[b], student, cfg, grads ? &caches : nullptr);
    const BasicTensor<T> logits =
        head_forward(feats, student, dcfg, grads ? &head_cache : nullptr);
    const LossAndGrad lg = dino_loss_and_grad(logits, teacher_logits[b], center, dcfg);
    total += lg.loss;
    if (!grads) continue;
    BasicTensor<T> dlogits(lg.dstudent.shape());
    for (std::size_t i = 0; i < dlogits.size(); ++i) {
      dlogits[i] = static_cast<T>(lg.dstudent[i] * inv_batch);
    }
    const BasicTensor<T> dfeats = head_backward(dlogits, student, dcfg, head_cache, *grads);
    for (std::size_t v = 0; v < views[b].size(); ++v) {
      const std::size_t tokens = caches[v].patches.rows() + 1;
      BasicTensor<T> dtokens({tokens, cfg.dim});
      std::copy_n(dfeats.data() + v * cfg.dim, cfg.dim, dtokens.data());
      encode_backward(dtokens, student, cfg, caches[v], *grads);
    }
  }
  return total * inv_batch;
}

struct StepStats {
  std::size_t step = 0;
  double loss = 0.0;
  double teacher_entropy = 0.0;
  double center_norm = 0.0;
  Tensor batch_teacher_mean;  // mean teacher logits of this step's batch
};

/// One tab-separated training log line: step, loss, teacher entropy, center norm.
inline std::string format_log_line(const StepStats& s) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g", s.step, s.loss, s.teacher_entropy,
                s.center_norm);
  return buf;
}

/// multi-crop -> teacher on global views, student on all views -> loss ->
/// student backprop + SGD -> teacher EMA -> center update.
inline StepStats train_step(DinoState& state, const ViTConfig& cfg, const DinoConfig& dcfg,
                            std::span<const RasterImage> batch, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const std::size_t k = dcfg.prototypes;

  std::vector<std::vector<Tensor>> views(batch.size());
  std::vector<Tensor> teacher_logits(batch.size());
  Tensor all_teacher({batch.size() * 2, k});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Rng view_rng = rng.derive(b);
    for (auto& v : multi_crop(batch[b], view_rng, dcfg.crop)) views[b].push_back(v.tensor());
    const std::vector<Tensor> globals(views[b].begin(), views[b].begin() + 2);
    teacher_logits[b] = head_forward(view_features(globals, state.teacher, cfg, nullptr),
                                     state.teacher, dcfg);
    std::copy_n(teacher_logits[b].data(), 2 * k, all_teacher.data() + b * 2 * k);
  }
  rng.next_u64();

  WeightStore grads = state.student.zeros_like();
  const double loss =
      student_objective(state.student, cfg, dcfg, views, teacher_logits, state.center, &grads);
  if (!std::isfinite(loss)) {
    throw NonFiniteError("non-finite DINO loss at step " + std::to_string(state.step + 1));
  }

  StepStats stats;
  stats.loss = loss;
  stats.teacher_entropy = teacher_entropy(all_teacher, state.center, dcfg);

  float lr = static_cast<float>(dcfg.learning_rate);
  if (dcfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += l2_norm(g) * l2_norm(g);
    const double norm = std::sqrt(sq);
    if (norm > dcfg.grad_clip) lr = static_cast<float>(dcfg.learning_rate * dcfg.grad_clip / norm);
  }
  for (auto& [name, p] : state.student) {
    const Tensor& g = grads.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
  update_teacher_ema(state, dcfg.ema_momentum);
  state.center = update_center(state.center, all_teacher, dcfg.center_momentum);
  ++state.step;

  stats.step = state.step;
  stats.center_norm = l2_norm(state.center);
  stats.batch_teacher_mean = Tensor({k});
  for (std::size_t j = 0; j < k; ++j) {
    double m = 0.0;
    for (std::size_t r = 0; r < all_teacher.rows(); ++r) m += all_teacher(r, j);
    stats.batch_teacher_mean[j] = static_cast<float>(m / static_cast<double>(all_teacher.rows()));
  }
  return stats;
}

/// Called after every step with the updated state.
using StepObserver = std::function<void(const DinoState&, const StepStats&)>;

struct PretrainResult {
  WeightStore backbone;  // teacher backbone, head stripped
  std::vector<StepStats> log;
  DinoState final_state;
};

/// Runs dcfg.steps training steps over batches drawn without replacement from
/// a reshuffled epoch order, and returns the teacher backbone.
inline PretrainResult pretrain(std::span<const RasterImage> images, const ViTConfig& cfg,
                               const DinoConfig& dcfg, Rng& rng,
                               const StepObserver& observer = {}) {
  dcfg.validate();
  if (images.size() < dcfg.batch_size) {
    throw std::invalid_argument("pretrain: need at least batch_size images");
  }
  PretrainResult result;
  result.final_state = init_dino_state(cfg, dcfg, rng);
  DinoState& state = result.final_state;

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::vector<RasterImage> batch;
  for (std::size_t s = 0; s < dcfg.steps; ++s) {
    batch.clear();
    while (batch.size() < dcfg.batch_size) {
      if (cursor == order.size()) {
        order.resize(images.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(images[order[cursor++]]);
    }
    StepStats stats = train_step(state, cfg, dcfg, batch, rng);
    if (observer) observer(state, stats);
    result.log.push_back(std::move(stats));
  }
  result.backbone = state.teacher.without_prefix("head.");
  return result;
}

}  // namespace hedonic
