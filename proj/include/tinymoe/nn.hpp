#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "tinymoe/params.hpp"

namespace tinymoe::nn {

inline constexpr ParamId kNoParam = static_cast<ParamId>(-1);

// --- activation ---------------------------------------------------------
// SiLU, x * sigmoid(x), is the single nonlinearity used by the adaptor and
// every feed-forward block.

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
Mat<T> silu(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return v * sigmoid(v); });
}

template <class T>
Mat<T> silu_backward(const Mat<T>& pre, const Mat<T>& dy) {
  return pre.binaryExpr(dy, [](T v, T g) {
    const T s = sigmoid(v);
    return g * s * (T(1) + v * (T(1) - s));
  });
}

// --- affine -------------------------------------------------------------

// y = x W^T + b with W stored [out x in].
template <class T>
Mat<T> linear(const ParamStore<T>& ps, const Mat<T>& x, ParamId w, ParamId b) {
  Mat<T> y = x * ps[w].value.transpose();
  if (b != kNoParam) {
    y.rowwise() += ps[b].value.row(0);
  }
  return y;
}

// Accumulates dW/db for trainable params; returns dx when requested.
template <class T>
Mat<T> linear_backward(ParamStore<T>& ps, const Mat<T>& x, const Mat<T>& dy, ParamId w, ParamId b,
                       bool need_dx = true) {
  if (ps[w].trainable) {
    ps[w].grad.noalias() += dy.transpose() * x;
  }
  if (b != kNoParam && ps[b].trainable) {
    ps[b].grad.row(0) += dy.colwise().sum();
  }
  if (!need_dx) {
    return {};
  }
  return dy * ps[w].value;
}

// --- RMSNorm ------------------------------------------------------------

template <class T>
inline constexpr T kNormEps = T(1e-5);

template <class T>
struct NormCache {
  Mat<T> xhat;               // x / rms(x), per row
  std::vector<T> inv_rms;    // per row
};

template <class T>
Mat<T> rms_norm(const ParamStore<T>& ps, const Mat<T>& x, ParamId gain, NormCache<T>* cache) {
  const auto rows = x.rows();
  const auto d = x.cols();
  Mat<T> xhat(rows, d);
  std::vector<T> inv(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T ms = x.row(i).squaredNorm() / static_cast<T>(d);
    inv[static_cast<std::size_t>(i)] = T(1) / std::sqrt(ms + kNormEps<T>);
    xhat.row(i) = x.row(i) * inv[static_cast<std::size_t>(i)];
  }
  Mat<T> y = xhat.array().rowwise() * ps[gain].value.row(0).array();
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_rms = std::move(inv);
  }
  return y;
}

template <class T>
Mat<T> rms_norm_backward(ParamStore<T>& ps, const NormCache<T>& cache, const Mat<T>& dy, ParamId gain) {
  if (ps[gain].trainable) {
    ps[gain].grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  }
  const Mat<T> dxhat = dy.array().rowwise() * ps[gain].value.row(0).array();
  const auto d = static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T proj = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    dx.row(i) = cache.inv_rms[static_cast<std::size_t>(i)] * (dxhat.row(i) - proj * cache.xhat.row(i));
  }
  return dx;
}

// --- feed-forward block ---------------------------------------------------

struct FfnParams {
  ParamId up_w = kNoParam;
  ParamId up_b = kNoParam;
  ParamId down_w = kNoParam;
  ParamId down_b = kNoParam;
};

template <class T>
struct FfnCache {
  Mat<T> pre;  // up projection before activation
  Mat<T> act;
};

template <class T>
Mat<T> ffn_forward(const ParamStore<T>& ps, const FfnParams& f, const Mat<T>& x, FfnCache<T>* cache) {
  Mat<T> pre = linear(ps, x, f.up_w, f.up_b);
  Mat<T> act = silu(pre);
  Mat<T> y = linear(ps, act, f.down_w, f.down_b);
  if (cache != nullptr) {
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <class T>
Mat<T> ffn_backward(ParamStore<T>& ps, const FfnParams& f, const Mat<T>& x, const FfnCache<T>& cache,
                    const Mat<T>& dy) {
  const Mat<T> dact = linear_backward(ps, cache.act, dy, f.down_w, f.down_b);
  const Mat<T> dpre = silu_backward(cache.pre, dact);
  return linear_backward(ps, x, dpre, f.up_w, f.up_b);
}

// --- causal multi-head self-attention --------------------------------------

struct AttnParams {
  ParamId wq = kNoParam;
  ParamId wk = kNoParam;
  ParamId wv = kNoParam;
  ParamId wo = kNoParam;
};

template <class T>
struct AttnCache {
  Mat<T> q, k, v;
  std::vector<Mat<T>> probs;  // one [L x L] lower-triangular matrix per head
  Mat<T> heads;               // concatenated head outputs [L x d]
};

template <class T>
Mat<T> attention_forward(const ParamStore<T>& ps, const AttnParams& a, int n_heads, const Mat<T>& x,
                         AttnCache<T>* cache) {
  const auto len = x.rows();
  const auto d = x.cols();
  const auto dh = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Mat<T> q = linear(ps, x, a.wq, kNoParam);
  Mat<T> k = linear(ps, x, a.wk, kNoParam);
  Mat<T> v = linear(ps, x, a.wv, kNoParam);
  Mat<T> heads(len, d);
  std::vector<Mat<T>> probs;
  probs.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Mat<T> s = (qh * kh.transpose()) * scale;
    Mat<T> p = Mat<T>::Zero(len, len);
    for (Eigen::Index i = 0; i < len; ++i) {
      T mx = s(i, 0);
      for (Eigen::Index j = 1; j <= i; ++j) {
        mx = std::max(mx, s(i, j));
      }
      T sum = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        p(i, j) = std::exp(s(i, j) - mx);
        sum += p(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) {
        p(i, j) /= sum;
      }
    }
    heads.middleCols(h * dh, dh) = p * vh;
    probs.push_back(std::move(p));
  }
  Mat<T> y = linear(ps, heads, a.wo, kNoParam);
  if (cache != nullptr) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->heads = std::move(heads);
  }
  return y;
}

template <class T>
Mat<T> attention_backward(ParamStore<T>& ps, const AttnParams& a, int n_heads, const Mat<T>& x,
                          const AttnCache<T>& c, const Mat<T>& dy) {
  const auto len = x.rows();
  const auto d = x.cols();
  const auto dh = d / n_heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Mat<T> dheads = linear_backward(ps, c.heads, dy, a.wo, kNoParam);
  Mat<T> dq(len, d), dk(len, d), dv(len, d);
  for (int h = 0; h < n_heads; ++h) {
    const auto& p = c.probs[static_cast<std::size_t>(h)];
    const auto dout = dheads.middleCols(h * dh, dh);
    const Mat<T> dp = dout * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) = p.transpose() * dout;
    Mat<T> ds = Mat<T>::Zero(len, len);
    for (Eigen::Index i = 0; i < len; ++i) {
      T dot = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        dot += p(i, j) * dp(i, j);
      }
      for (Eigen::Index j = 0; j <= i; ++j) {
        ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
      }
    }
    dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  Mat<T> dx = linear_backward(ps, x, dq, a.wq, kNoParam);
  dx += linear_backward(ps, x, dk, a.wk, kNoParam);
  dx += linear_backward(ps, x, dv, a.wv, kNoParam);
  return dx;
}

}  // namespace tinymoe::nn
