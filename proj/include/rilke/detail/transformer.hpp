#pragma once

// Forward and reverse-mode kernels for the decoder stack, shared by
// pretraining (all weight gradients) and edit training (activation gradients
// only). Templated so that gradient checks can run the same code in double.

#include <cmath>
#include <limits>
#include <type_traits>
#include <vector>

#include "rilke/model.hpp"

namespace rilke::detail {

template <typename T>
using Mat = BasicMatrix<T>;

inline constexpr double kNormEps = 1e-5;

template <typename T>
struct BlockCache {
  Mat<T> x_in;
  Mat<T> xn1;
  std::vector<T> inv1;
  Mat<T> q, k, v;  // q and k after rotation
  std::vector<Mat<T>> probs;  // per head, n x n
  Mat<T> att;
  Mat<T> x_mid;
  Mat<T> xn2;
  std::vector<T> inv2;
  Mat<T> pre, act;
};

template <typename T>
struct HeadCache {
  Mat<T> x_in;
  Mat<T> xn;
  std::vector<T> inv;
};

// Records the activations of blocks above `from_layer` plus the output head,
// so that backward() can replay them in reverse.
template <typename T>
struct Tape {
  int from_layer = 0;
  std::vector<BlockCache<T>> blocks;
  HeadCache<T> head;
};

template <typename T>
void linear(const Mat<T>& x, const Mat<T>& w, Mat<T>& y) {
  y = Mat<T>(x.rows(), w.rows());
  y.map().noalias() = x.map() * w.map().transpose();
}

// dx = dy w; dw += dy^T x
template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>* dw) {
  Mat<T> dx(dy.rows(), w.cols());
  dx.map().noalias() = dy.map() * w.map();
  if (dw != nullptr) dw->map().noalias() += dy.map().transpose() * x.map();
  return dx;
}

template <typename T>
void rms_norm(const Mat<T>& x, const Mat<T>& gain, Mat<T>& y, std::vector<T>& inv) {
  const std::size_t n = x.rows(), d = x.cols();
  y = Mat<T>(n, d);
  inv.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    T ss = 0;
    for (T v : xr) ss += v * v;
    const T s = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(kNormEps));
    inv[i] = s;
    auto yr = y.row(i);
    for (std::size_t c = 0; c < d; ++c) yr[c] = gain(0, c) * xr[c] * s;
  }
}

template <typename T>
Mat<T> rms_norm_backward(const Mat<T>& x, const Mat<T>& gain, const std::vector<T>& inv,
                         const Mat<T>& dy, Mat<T>* dgain) {
  const std::size_t n = x.rows(), d = x.cols();
  Mat<T> dx(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto xr = x.row(i);
    auto gr = dy.row(i);
    const T s = inv[i];
    T dotv = 0;
    for (std::size_t c = 0; c < d; ++c) dotv += gain(0, c) * gr[c] * xr[c];
    const T coef = s * s * s * dotv / static_cast<T>(d);
    auto out = dx.row(i);
    for (std::size_t c = 0; c < d; ++c) out[c] = gain(0, c) * gr[c] * s - xr[c] * coef;
    if (dgain != nullptr)
      for (std::size_t c = 0; c < d; ++c) (*dgain)(0, c) += gr[c] * xr[c] * s;
  }
  return dx;
}

// Rotates (i, i + hw/2) pairs of every head; direction -1 applies the inverse.
template <typename T>
void apply_rope(Mat<T>& m, const RopeTable<T>& rope, int heads, int head_width, int direction) {
  const int half = head_width / 2;
  for (std::size_t p = 0; p < m.rows(); ++p) {
    auto row = m.row(p);
    for (int h = 0; h < heads; ++h) {
      T* base = row.data() + h * head_width;
      for (int i = 0; i < half; ++i) {
        const T c = rope.cos(p, i);
        const T s = direction > 0 ? rope.sin(p, i) : -rope.sin(p, i);
        const T a = base[i];
        const T b = base[i + half];
        base[i] = a * c - b * s;
        base[i + half] = a * s + b * c;
      }
    }
  }
}

template <typename T>
T gelu(T a) {
  const T c = static_cast<T>(0.7978845608028654);
  return static_cast<T>(0.5) * a * (T(1) + std::tanh(c * (a + static_cast<T>(0.044715) * a * a * a)));
}

template <typename T>
T gelu_grad(T a) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  const T t = std::tanh(c * (a + k * a * a * a));
  return static_cast<T>(0.5) * (T(1) + t) +
         static_cast<T>(0.5) * a * (T(1) - t * t) * c * (T(1) + T(3) * k * a * a);
}

// x <- x + attn(norm1(x)); x <- x + mlp(norm2(x))
template <typename T>
void block_forward(const BlockWeights<T>& w, const ModelConfig& cfg, const RopeTable<T>& rope,
                   Mat<T>& x, std::type_identity_t<BlockCache<T>>* cache) {
  BlockCache<T> local;
  BlockCache<T>& c = cache != nullptr ? *cache : local;
  const std::size_t n = x.rows();
  const int heads = cfg.heads;
  const int hw = cfg.head_width();
  if (cache != nullptr) c.x_in = x;

  rms_norm(x, w.norm1, c.xn1, c.inv1);
  linear(c.xn1, w.wq, c.q);
  linear(c.xn1, w.wk, c.k);
  linear(c.xn1, w.wv, c.v);
  apply_rope(c.q, rope, heads, hw, +1);
  apply_rope(c.k, rope, heads, hw, +1);

  c.att = Mat<T>(n, static_cast<std::size_t>(cfg.width));
  c.probs.assign(static_cast<std::size_t>(heads), Mat<T>(n, n));
  const T scale = T(1) / std::sqrt(static_cast<T>(hw));
  for (int h = 0; h < heads; ++h) {
    auto qh = c.q.map().middleCols(h * hw, hw);
    auto kh = c.k.map().middleCols(h * hw, hw);
    auto vh = c.v.map().middleCols(h * hw, hw);
    Mat<T>& p = c.probs[static_cast<std::size_t>(h)];
    p.map().noalias() = (qh * kh.transpose()) * scale;
    for (std::size_t i = 0; i < n; ++i) {
      auto row = p.row(i);
      T mx = row[0];
      for (std::size_t j = 1; j <= i; ++j) mx = row[j] > mx ? row[j] : mx;
      T sum = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      const T inv = T(1) / sum;
      for (std::size_t j = 0; j <= i; ++j) row[j] *= inv;
      for (std::size_t j = i + 1; j < n; ++j) row[j] = T(0);
    }
    c.att.map().middleCols(h * hw, hw).noalias() = p.map() * vh;
  }
  Mat<T> attn_out;
  linear(c.att, w.wo, attn_out);
  x.map() += attn_out.map();
  if (cache != nullptr) c.x_mid = x;

  rms_norm(x, w.norm2, c.xn2, c.inv2);
  linear(c.xn2, w.w1, c.pre);
  c.act = Mat<T>(c.pre.rows(), c.pre.cols());
  for (std::size_t i = 0; i < c.pre.size(); ++i) c.act.flat()[i] = gelu(c.pre.flat()[i]);
  Mat<T> mlp_out;
  linear(c.act, w.w2, mlp_out);
  x.map() += mlp_out.map();
}

template <typename T>
Mat<T> block_backward(const BlockWeights<T>& w, const ModelConfig& cfg, const RopeTable<T>& rope,
                      const BlockCache<T>& c, const Mat<T>& dy, BlockWeights<T>* g) {
  const std::size_t n = dy.rows();
  const int heads = cfg.heads;
  const int hw = cfg.head_width();

  // MLP branch
  Mat<T> dact = linear_backward(c.act, w.w2, dy, g ? &g->w2 : nullptr);
  for (std::size_t i = 0; i < dact.size(); ++i) dact.flat()[i] *= gelu_grad(c.pre.flat()[i]);
  Mat<T> dxn2 = linear_backward(c.xn2, w.w1, dact, g ? &g->w1 : nullptr);
  Mat<T> dmid = rms_norm_backward(c.x_mid, w.norm2, c.inv2, dxn2, g ? &g->norm2 : nullptr);
  dmid.map() += dy.map();

  // attention branch
  Mat<T> datt = linear_backward(c.att, w.wo, dmid, g ? &g->wo : nullptr);
  Mat<T> dq(n, static_cast<std::size_t>(cfg.width));
  Mat<T> dk(n, static_cast<std::size_t>(cfg.width));
  Mat<T> dv(n, static_cast<std::size_t>(cfg.width));
  const T scale = T(1) / std::sqrt(static_cast<T>(hw));
  Mat<T> dp(n, n);
  for (int h = 0; h < heads; ++h) {
    const Mat<T>& p = c.probs[static_cast<std::size_t>(h)];
    auto qh = c.q.map().middleCols(h * hw, hw);
    auto kh = c.k.map().middleCols(h * hw, hw);
    auto vh = c.v.map().middleCols(h * hw, hw);
    auto dah = datt.map().middleCols(h * hw, hw);
    dp.map().noalias() = dah * vh.transpose();
    dv.map().middleCols(h * hw, hw).noalias() = p.map().transpose() * dah;
    for (std::size_t i = 0; i < n; ++i) {
      auto pr = p.row(i);
      auto dr = dp.row(i);
      T s = 0;
      for (std::size_t j = 0; j <= i; ++j) s += pr[j] * dr[j];
      for (std::size_t j = 0; j < n; ++j) dr[j] = j <= i ? pr[j] * (dr[j] - s) * scale : T(0);
    }
    dq.map().middleCols(h * hw, hw).noalias() = dp.map() * kh;
    dk.map().middleCols(h * hw, hw).noalias() = dp.map().transpose() * qh;
  }
  apply_rope(dq, rope, heads, hw, -1);
  apply_rope(dk, rope, heads, hw, -1);
  Mat<T> dxn1 = linear_backward(c.xn1, w.wq, dq, g ? &g->wq : nullptr);
  dxn1.map() += linear_backward(c.xn1, w.wk, dk, g ? &g->wk : nullptr).map();
  dxn1.map() += linear_backward(c.xn1, w.wv, dv, g ? &g->wv : nullptr).map();
  Mat<T> dx = rms_norm_backward(c.x_in, w.norm1, c.inv1, dxn1, g ? &g->norm1 : nullptr);
  dx.map() += dmid.map();
  return dx;
}

template <typename T>
Mat<T> embed(const BasicModel<T>& model, std::span<const int> tokens) {
  const auto& emb = model.weights().tok_emb;
  Mat<T> x(tokens.size(), emb.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto src = emb.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  return x;
}

// Runs blocks from_layer+1 .. to_layer (1-based layer numbering) in place.
template <typename T>
void run_blocks(const BasicModel<T>& model, Mat<T>& x, int from_layer, int to_layer,
                std::type_identity_t<std::vector<BlockCache<T>>>* caches) {
  if (caches != nullptr) caches->resize(static_cast<std::size_t>(to_layer - from_layer));
  for (int b = from_layer; b < to_layer; ++b) {
    block_forward(model.weights().blocks[static_cast<std::size_t>(b)], model.config(),
                  model.rope(), x,
                  caches != nullptr ? &(*caches)[static_cast<std::size_t>(b - from_layer)] : nullptr);
  }
}

template <typename T>
Mat<T> run_head(const BasicModel<T>& model, const Mat<T>& x, std::type_identity_t<HeadCache<T>>* cache) {
  HeadCache<T> local;
  HeadCache<T>& c = cache != nullptr ? *cache : local;
  if (cache != nullptr) c.x_in = x;
  rms_norm(x, model.weights().final_norm, c.xn, c.inv);
  Mat<T> logits;
  linear(c.xn, model.weights().unembed, logits);
  return logits;
}

// States after the last block -> logits, recording the tape.
template <typename T>
Mat<T> run_from(const BasicModel<T>& model, Mat<T> x, int from_layer, std::type_identity_t<Tape<T>>* tape) {
  if (tape != nullptr) tape->from_layer = from_layer;
  run_blocks(model, x, from_layer, model.config().layers, tape ? &tape->blocks : nullptr);
  return run_head(model, x, tape ? &tape->head : nullptr);
}

// Replays the tape in reverse; returns the gradient w.r.t. the input states of
// block from_layer+1. Weight gradients accumulate into `grads` when non-null.
template <typename T>
Mat<T> backward(const BasicModel<T>& model, const Tape<T>& tape, const Mat<T>& dlogits,
                Weights<T>* grads) {
  const auto& w = model.weights();
  Mat<T> dxn = linear_backward(tape.head.xn, w.unembed, dlogits, grads ? &grads->unembed : nullptr);
  Mat<T> dx = rms_norm_backward(tape.head.x_in, w.final_norm, tape.head.inv, dxn,
                                grads ? &grads->final_norm : nullptr);
  for (int b = model.config().layers - 1; b >= tape.from_layer; --b) {
    const auto bi = static_cast<std::size_t>(b);
    dx = block_backward(w.blocks[bi], model.config(), model.rope(),
                        tape.blocks[static_cast<std::size_t>(b - tape.from_layer)], dx,
                        grads ? &grads->blocks[bi] : nullptr);
  }
  return dx;
}

}  // namespace rilke::detail
