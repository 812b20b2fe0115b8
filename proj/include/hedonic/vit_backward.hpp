#pragma once

// Reverse-mode gradients for the encoder in vit.hpp. Every backward function
// consumes the cache filled by its forward and accumulates parameter
// gradients into a store with the same names as the weights.

#include <cmath>
#include <cstddef>

#include "hedonic/tensor.hpp"
#include "hedonic/vit.hpp"

namespace hedonic {

template <class T>
BasicTensor<T> layer_norm_backward(const BasicTensor<T>& dy, const BasicTensor<T>& gamma,
                                   const LayerNormCache<T>& cache, BasicTensor<T>& dgamma,
                                   BasicTensor<T>& dbeta) {
  const std::size_t n = dy.last_dim();
  const std::size_t rows = dy.size() / n;
  BasicTensor<T> dx(dy.shape());
  std::vector<double> g(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy.data() + r * n;
    const T* xh = cache.xhat.data() + r * n;
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dgamma[j] += static_cast<T>(dyr[j] * xh[j]);
      dbeta[j] += dyr[j];
      g[j] = static_cast<double>(dyr[j]) * gamma[j];
      mean_g += g[j];
      mean_gx += g[j] * xh[j];
    }
    mean_g /= static_cast<double>(n);
    mean_gx /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      dx.data()[r * n + j] = static_cast<T>(cache.rstd[r] * (g[j] - mean_g - xh[j] * mean_gx));
    }
  }
  return dx;
}

/// Backward of y = x W + b. Accumulates dW and db, returns dx.
template <class T>
BasicTensor<T> linear_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                               const BasicTensor<T>& dy, BasicTensor<T>& dw, BasicTensor<T>& db) {
  add_inplace(dw, matmul_tn(x, dy));
  const std::size_t n = dy.cols();
  for (std::size_t r = 0; r < dy.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) db[j] += dy(r, j);
  return matmul_nt(dy, w);
}

/// Gradient views matching BlockParams.
template <class T>
struct BlockGrads {
  BasicTensor<T>& norm1_w;
  BasicTensor<T>& norm1_b;
  BasicTensor<T>& qkv_w;
  BasicTensor<T>& qkv_b;
  BasicTensor<T>& proj_w;
  BasicTensor<T>& proj_b;
  BasicTensor<T>& norm2_w;
  BasicTensor<T>& norm2_b;
  BasicTensor<T>& fc1_w;
  BasicTensor<T>& fc1_b;
  BasicTensor<T>& fc2_w;
  BasicTensor<T>& fc2_b;
};

template <class T>
BlockGrads<T> block_grads(BasicWeightStore<T>& g, std::size_t i) {
  return BlockGrads<T>{g.at(block_key(i, "norm1.weight")),    g.at(block_key(i, "norm1.bias")),
                       g.at(block_key(i, "attn.qkv.weight")), g.at(block_key(i, "attn.qkv.bias")),
                       g.at(block_key(i, "attn.proj.weight")), g.at(block_key(i, "attn.proj.bias")),
                       g.at(block_key(i, "norm2.weight")),    g.at(block_key(i, "norm2.bias")),
                       g.at(block_key(i, "mlp.fc1.weight")),  g.at(block_key(i, "mlp.fc1.bias")),
                       g.at(block_key(i, "mlp.fc2.weight")),  g.at(block_key(i, "mlp.fc2.bias"))};
}

template <class T>
BasicTensor<T> mlp_block_backward(const BasicTensor<T>& dout, const BlockParams<T>& p,
                                  const MlpCache<T>& c, BlockGrads<T>& g) {
  BasicTensor<T> dact = linear_backward(c.act, p.fc2_w, dout, g.fc2_w, g.fc2_b);
  for (std::size_t i = 0; i < dact.size(); ++i) {
    dact[i] = static_cast<T>(dact[i] * gelu_derivative(static_cast<double>(c.pre[i])));
  }
  BasicTensor<T> dnormed = linear_backward(c.normed, p.fc1_w, dact, g.fc1_w, g.fc1_b);
  BasicTensor<T> dx = layer_norm_backward(dnormed, p.norm2_w, c.ln, g.norm2_w, g.norm2_b);
  add_inplace(dx, dout);
  return dx;
}

template <class T>
BasicTensor<T> attention_block_backward(const BasicTensor<T>& dout, const BlockParams<T>& p,
                                        const ViTConfig& cfg, const AttentionCache<T>& c,
                                        BlockGrads<T>& g) {
  const std::size_t d = cfg.dim, hd = cfg.head_dim();
  const std::size_t tokens = dout.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  BasicTensor<T> dcontext = linear_backward(c.context, p.proj_w, dout, g.proj_w, g.proj_b);
  BasicTensor<T> dqkv({tokens, 3 * d});
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const BasicTensor<T> q = column_slice(c.qkv, h * hd, hd);
    const BasicTensor<T> k = column_slice(c.qkv, d + h * hd, hd);
    const BasicTensor<T> v = column_slice(c.qkv, 2 * d + h * hd, hd);
    const BasicTensor<T>& probs = c.probs[h];
    const BasicTensor<T> dctx = column_slice(dcontext, h * hd, hd);

    BasicTensor<T> dprobs = matmul_nt(dctx, v);
    const BasicTensor<T> dv = matmul_tn(probs, dctx);
    // softmax backward, row-wise: ds = p * (dp - <dp, p>)
    BasicTensor<T> dscores({tokens, tokens});
    for (std::size_t r = 0; r < tokens; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) dot += static_cast<double>(dprobs(r, j)) * probs(r, j);
      for (std::size_t j = 0; j < tokens; ++j) {
        dscores(r, j) = static_cast<T>(probs(r, j) * (dprobs(r, j) - dot) * scale);
      }
    }
    column_assign(dqkv, h * hd, matmul(dscores, k));
    column_assign(dqkv, d + h * hd, matmul_tn(dscores, q));
    column_assign(dqkv, 2 * d + h * hd, dv);
  }
  BasicTensor<T> dnormed = linear_backward(c.normed, p.qkv_w, dqkv, g.qkv_w, g.qkv_b);
  BasicTensor<T> dx = layer_norm_backward(dnormed, p.norm1_w, c.ln, g.norm1_w, g.norm1_b);
  add_inplace(dx, dout);
  return dx;
}

/// Backpropagates d(loss)/d(final tokens) through the whole encoder,
/// accumulating into grads (which must hold every backbone name).
template <class T>
void encode_backward(const BasicTensor<T>& dtokens, const BasicWeightStore<T>& w,
                     const ViTConfig& cfg, const EncoderCache<T>& cache,
                     BasicWeightStore<T>& grads) {
  BasicTensor<T> dx = layer_norm_backward(dtokens, w.at("norm.weight"), cache.final_ln,
                                          grads.at("norm.weight"), grads.at("norm.bias"));
  for (std::size_t i = cfg.depth; i-- > 0;) {
    const BlockParams<T> p = block_params(w, i);
    BlockGrads<T> g = block_grads(grads, i);
    dx = mlp_block_backward(dx, p, cache.mlp[i], g);
    dx = attention_block_backward(dx, p, cfg, cache.attn[i], g);
  }

  // Embedding: row 0 = cls + pos_0, rows i >= 1 = patches W + b + pos_i.
  const std::size_t d = cfg.dim, n = dx.rows() - 1;
  BasicTensor<T>& dcls = grads.at("cls_token");
  for (std::size_t j = 0; j < d; ++j) dcls[j] += dx(0, j);
  BasicTensor<T> dproj({n, d});
  std::copy_n(dx.data() + d, n * d, dproj.data());
  linear_backward(cache.patches, w.at("patch_embed.weight"), dproj,
                  grads.at("patch_embed.weight"), grads.at("patch_embed.bias"));

  BasicTensor<T>& dpos = grads.at("pos_embed");
  if (cache.grid == cfg.grid()) {
    add_inplace(dpos, dx);
    return;
  }
  for (std::size_t j = 0; j < d; ++j) dpos(0, j) += dx(0, j);
  const Tensor64 m = grid_interpolation_matrix(cfg.grid(), cache.grid);
  const std::size_t stored = cfg.grid() * cfg.grid();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < stored; ++c) {
      const double wgt = m(r, c);
      if (wgt == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) dpos(c + 1, j) += static_cast<T>(wgt * dx(r + 1, j));
    }
}

}  // namespace hedonic
