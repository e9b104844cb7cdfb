// Copyright (c) 2026 The compose-probe Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "compose_probe/align_params.hpp"
#include "compose_probe/error.hpp"

namespace compose_probe {

/// A frozen input sequence: `length` rows of width `dim`, with mask[i] = 1
/// for real rows and 0 for padding.
template <class T>
struct Sequence {
  std::size_t length = 0;
  std::size_t dim = 0;
  std::vector<T> values;
  std::vector<std::uint8_t> mask;

  static Sequence dense(std::size_t length, std::size_t dim, std::vector<T> values) {
    if (values.size() != length * dim) throw Error(ErrorKind::Shape, "sequence data does not match length*dim");
    return {length, dim, std::move(values), std::vector<std::uint8_t>(length, 1)};
  }

  /// Copy with `extra` masked rows of `fill` appended.
  Sequence padded(std::size_t extra, T fill = T(0)) const {
    Sequence s = *this;
    s.length += extra;
    s.values.resize(s.length * dim, fill);
    s.mask.resize(s.length, 0);
    return s;
  }

  const T* row(std::size_t i) const { return values.data() + i * dim; }

  template <class U>
  Sequence<U> cast() const {
    return {length, dim, std::vector<U>(values.begin(), values.end()), mask};
  }
};

namespace detail {

// out[n x o] = in[n x i] W^T + b, W row-major o x i.
template <class T>
void linear(const T* in, std::size_t n, std::size_t i_dim, const T* w, const T* b, std::size_t o_dim, T* out) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* x = in + r * i_dim;
    T* y = out + r * o_dim;
    for (std::size_t o = 0; o < o_dim; ++o) {
      const T* wr = w + o * i_dim;
      T acc = b ? b[o] : T(0);
      for (std::size_t k = 0; k < i_dim; ++k) acc += wr[k] * x[k];
      y[o] = acc;
    }
  }
}

// Accumulates dW += dout^T in, db += colsum(dout); din (if given) = dout W.
template <class T>
void linear_backward(const T* dout, const T* in, std::size_t n, std::size_t i_dim, const T* w, std::size_t o_dim,
                     T* dw, T* db, T* din) {
  if (din) std::fill(din, din + n * i_dim, T(0));
  for (std::size_t r = 0; r < n; ++r) {
    const T* g = dout + r * o_dim;
    const T* x = in + r * i_dim;
    for (std::size_t o = 0; o < o_dim; ++o) {
      const T go = g[o];
      if (go == T(0)) continue;
      if (db) db[o] += go;
      T* dwr = dw + o * i_dim;
      for (std::size_t k = 0; k < i_dim; ++k) dwr[k] += go * x[k];
      if (din) {
        const T* wr = w + o * i_dim;
        T* dx = din + r * i_dim;
        for (std::size_t k = 0; k < i_dim; ++k) dx[k] += go * wr[k];
      }
    }
  }
}

template <class T>
void layer_norm(const T* x, std::size_t n, std::size_t d, const T* g, const T* b, double eps, T* xhat, T* rstd,
                T* y) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * d;
    T mean = 0;
    for (std::size_t k = 0; k < d; ++k) mean += xr[k];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t k = 0; k < d; ++k) var += (xr[k] - mean) * (xr[k] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[r] = rs;
    for (std::size_t k = 0; k < d; ++k) {
      const T h = (xr[k] - mean) * rs;
      xhat[r * d + k] = h;
      y[r * d + k] = g[k] * h + b[k];
    }
  }
}

// dx += LN backward of dy; accumulates dg, db.
template <class T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, std::size_t n, std::size_t d, const T* g, T* dg,
                         T* db, T* dx) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy + r * d;
    const T* hr = xhat + r * d;
    T mean_dh = 0, mean_dh_h = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const T dh = dyr[k] * g[k];
      dg[k] += dyr[k] * hr[k];
      db[k] += dyr[k];
      mean_dh += dh;
      mean_dh_h += dh * hr[k];
    }
    mean_dh /= static_cast<T>(d);
    mean_dh_h /= static_cast<T>(d);
    for (std::size_t k = 0; k < d; ++k) {
      dx[r * d + k] += rstd[r] * (dyr[k] * g[k] - mean_dh - hr[k] * mean_dh_h);
    }
  }
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
struct BlockCache {
  std::vector<T> x_in, xhat1, rstd1, h1, q, k, v, probs, ctx, x_mid, xhat2, rstd2, h2, pre, act;
};

template <class T>
struct ForwardCache {
  std::size_t n = 0;
  std::size_t n_vis = 0;
  std::vector<std::uint8_t> key_mask;
  std::vector<BlockCache<T>> blocks;
  std::vector<T> x_out;  // residual stream after the last block
  std::vector<T> xhat_f, rstd_f, cls_out;
  T score = 0;
};

template <class T>
bool all_finite(const std::vector<T>& v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(static_cast<double>(x)); });
}

}  // namespace detail

/// Checks an input pair against the model's declared shapes.
template <class T>
void check_inputs(const TransformerConfig& c, const Sequence<T>& image, const Sequence<T>& text) {
  auto check = [](const Sequence<T>& s, std::size_t dim, std::size_t max_len, const char* what) {
    if (s.dim != dim) {
      throw Error(ErrorKind::Shape, std::string(what) + " width " + std::to_string(s.dim) + " != expected " +
                                        std::to_string(dim));
    }
    if (s.length == 0 || s.length > max_len) {
      throw Error(ErrorKind::Shape, std::string(what) + " length " + std::to_string(s.length) + " outside [1, " +
                                        std::to_string(max_len) + "]");
    }
    if (s.values.size() != s.length * s.dim || s.mask.size() != s.length) {
      throw Error(ErrorKind::Shape, std::string(what) + " buffers do not match its length");
    }
  };
  check(image, c.visual_dim, c.max_patches, "image input");
  check(text, c.text_dim, c.max_tokens, "text input");
}

/// Score of one (image, text) pair; fills `cache` for backward when given.
/// Sequence layout is [CLS | visual | text]; masked rows are excluded as
/// attention keys, so padding cannot reach the CLS state.
template <class T>
T forward(const ModelParams<T>& p, const Sequence<T>& image, const Sequence<T>& text,
          detail::ForwardCache<T>* cache = nullptr) {
  const auto& c = p.config;
  const auto& L = *p.layout;
  check_inputs(c, image, text);
  const std::size_t d = c.model_dim, H = c.heads, dh = c.head_dim(), F = c.ff_dim;
  const std::size_t nv = image.length, nt = text.length, n = 1 + nv + nt;

  detail::ForwardCache<T> local;
  auto& fc = cache ? *cache : local;
  fc.n = n;
  fc.n_vis = nv;
  fc.key_mask.assign(n, 1);
  for (std::size_t i = 0; i < nv; ++i) fc.key_mask[1 + i] = image.mask[i];
  for (std::size_t i = 0; i < nt; ++i) fc.key_mask[1 + nv + i] = text.mask[i];

  std::vector<T> x(n * d);
  std::copy(p.ptr(L.cls), p.ptr(L.cls) + d, x.begin());
  detail::linear(image.values.data(), nv, c.visual_dim, p.ptr(L.vis_w), p.ptr(L.vis_b), d, x.data() + d);
  detail::linear(text.values.data(), nt, c.text_dim, p.ptr(L.txt_w), p.ptr(L.txt_b), d, x.data() + (1 + nv) * d);
  for (std::size_t i = 0; i < nv; ++i) {
    for (std::size_t k = 0; k < d; ++k) x[(1 + i) * d + k] += p.ptr(L.vis_pos)[i * d + k] + p.ptr(L.modality)[k];
  }
  for (std::size_t i = 0; i < nt; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      x[(1 + nv + i) * d + k] += p.ptr(L.txt_pos)[i * d + k] + p.ptr(L.modality)[d + k];
    }
  }

  fc.blocks.resize(c.layers);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& s = L.blocks[l];
    auto& b = fc.blocks[l];
    b.x_in = x;
    b.xhat1.resize(n * d);
    b.rstd1.resize(n);
    b.h1.resize(n * d);
    detail::layer_norm(x.data(), n, d, p.ptr(s.ln1_g), p.ptr(s.ln1_b), c.ln_eps, b.xhat1.data(), b.rstd1.data(),
                       b.h1.data());
    b.q.resize(n * d);
    b.k.resize(n * d);
    b.v.resize(n * d);
    detail::linear(b.h1.data(), n, d, p.ptr(s.wq), p.ptr(s.bq), d, b.q.data());
    detail::linear(b.h1.data(), n, d, p.ptr(s.wk), p.ptr(s.bk), d, b.k.data());
    detail::linear(b.h1.data(), n, d, p.ptr(s.wv), p.ptr(s.bv), d, b.v.data());
    b.probs.assign(H * n * n, T(0));
    b.ctx.assign(n * d, T(0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        T* pr = b.probs.data() + (h * n + i) * n;
        const T* qi = b.q.data() + i * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!fc.key_mask[j]) continue;
          const T* kj = b.k.data() + j * d + h * dh;
          T acc = 0;
          for (std::size_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
          pr[j] = acc * scale;
          mx = std::max(mx, pr[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!fc.key_mask[j]) continue;
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        T* ci = b.ctx.data() + i * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          if (!fc.key_mask[j]) continue;
          pr[j] /= z;
          const T* vj = b.v.data() + j * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) ci[e] += pr[j] * vj[e];
        }
      }
    }
    std::vector<T> attn(n * d);
    detail::linear(b.ctx.data(), n, d, p.ptr(s.wo), p.ptr(s.bo), d, attn.data());
    for (std::size_t i = 0; i < n * d; ++i) x[i] += attn[i];
    b.x_mid = x;
    b.xhat2.resize(n * d);
    b.rstd2.resize(n);
    b.h2.resize(n * d);
    detail::layer_norm(x.data(), n, d, p.ptr(s.ln2_g), p.ptr(s.ln2_b), c.ln_eps, b.xhat2.data(), b.rstd2.data(),
                       b.h2.data());
    b.pre.resize(n * F);
    b.act.resize(n * F);
    detail::linear(b.h2.data(), n, d, p.ptr(s.w1), p.ptr(s.b1), F, b.pre.data());
    for (std::size_t i = 0; i < n * F; ++i) b.act[i] = detail::gelu(b.pre[i]);
    std::vector<T> ff(n * d);
    detail::linear(b.act.data(), n, F, p.ptr(s.w2), p.ptr(s.b2), d, ff.data());
    for (std::size_t i = 0; i < n * d; ++i) x[i] += ff[i];
    if (!detail::all_finite(x)) {
      throw Error(ErrorKind::Numeric, "non-finite activation in layer " + std::to_string(l));
    }
  }
  fc.x_out = x;
  fc.xhat_f.resize(d);
  fc.rstd_f.resize(1);
  fc.cls_out.resize(d);
  detail::layer_norm(x.data(), 1, d, p.ptr(L.lnf_g), p.ptr(L.lnf_b), c.ln_eps, fc.xhat_f.data(), fc.rstd_f.data(),
                     fc.cls_out.data());
  T score = p.ptr(L.head_b)[0];
  for (std::size_t k = 0; k < d; ++k) score += p.ptr(L.head_w)[k] * fc.cls_out[k];
  if (!std::isfinite(static_cast<double>(score))) {
    throw Error(ErrorKind::Numeric, "non-finite score after layer " + std::to_string(c.layers - 1));
  }
  fc.score = score;
  return score;
}

/// Adds dscore * d(score)/d(params) into `grad` (same layout as p), using the
/// cache of a forward call on the same pair. Inputs receive no gradient.
template <class T>
void backward(const ModelParams<T>& p, const Sequence<T>& image, const Sequence<T>& text,
              const detail::ForwardCache<T>& fc, T dscore, std::vector<T>& grad) {
  const auto& c = p.config;
  const auto& L = *p.layout;
  const std::size_t d = c.model_dim, H = c.heads, dh = c.head_dim(), F = c.ff_dim;
  const std::size_t n = fc.n, nv = fc.n_vis, nt = n - 1 - nv;
  T* G = grad.data();

  G[L.head_b] += dscore;
  std::vector<T> dcls(d);
  for (std::size_t k = 0; k < d; ++k) {
    G[L.head_w + k] += dscore * fc.cls_out[k];
    dcls[k] = dscore * p.ptr(L.head_w)[k];
  }
  std::vector<T> dx(n * d, T(0));
  detail::layer_norm_backward(dcls.data(), fc.xhat_f.data(), fc.rstd_f.data(), 1, d, p.ptr(L.lnf_g), G + L.lnf_g,
                              G + L.lnf_b, dx.data());

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<T> tmp, dh2(n * d), dpre(n * F), dctx(n * d), dq(n * d), dk(n * d), dv(n * d), dh1(n * d),
      dprob(n);
  for (std::size_t li = c.layers; li-- > 0;) {
    const auto& s = L.blocks[li];
    const auto& b = fc.blocks[li];
    // feed-forward branch: x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
    std::vector<T> dact(n * F);
    detail::linear_backward(dx.data(), b.act.data(), n, F, p.ptr(s.w2), d, G + s.w2, G + s.b2, dact.data());
    for (std::size_t i = 0; i < n * F; ++i) dpre[i] = dact[i] * detail::gelu_grad(b.pre[i]);
    detail::linear_backward(dpre.data(), b.h2.data(), n, d, p.ptr(s.w1), F, G + s.w1, G + s.b1, dh2.data());
    detail::layer_norm_backward(dh2.data(), b.xhat2.data(), b.rstd2.data(), n, d, p.ptr(s.ln2_g), G + s.ln2_g,
                                G + s.ln2_b, dx.data());
    // attention branch: x_mid = x_in + Wo ctx + bo
    detail::linear_backward(dx.data(), b.ctx.data(), n, d, p.ptr(s.wo), d, G + s.wo, G + s.bo, dctx.data());
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* pr = b.probs.data() + (h * n + i) * n;
        const T* dci = dctx.data() + i * d + h * dh;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!fc.key_mask[j]) continue;
          const T* vj = b.v.data() + j * d + h * dh;
          T acc = 0;
          for (std::size_t e = 0; e < dh; ++e) acc += dci[e] * vj[e];
          dprob[j] = acc;
          dot += pr[j] * acc;
          T* dvj = dv.data() + j * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) dvj[e] += pr[j] * dci[e];
        }
        const T* qi = b.q.data() + i * d + h * dh;
        T* dqi = dq.data() + i * d + h * dh;
        for (std::size_t j = 0; j < n; ++j) {
          if (!fc.key_mask[j]) continue;
          const T ds = pr[j] * (dprob[j] - dot) * scale;
          if (ds == T(0)) continue;
          const T* kj = b.k.data() + j * d + h * dh;
          T* dkj = dk.data() + j * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    detail::linear_backward(dq.data(), b.h1.data(), n, d, p.ptr(s.wq), d, G + s.wq, G + s.bq, dh1.data());
    tmp.resize(n * d);
    detail::linear_backward(dk.data(), b.h1.data(), n, d, p.ptr(s.wk), d, G + s.wk, G + s.bk, tmp.data());
    for (std::size_t i = 0; i < n * d; ++i) dh1[i] += tmp[i];
    detail::linear_backward(dv.data(), b.h1.data(), n, d, p.ptr(s.wv), d, G + s.wv, G + s.bv, tmp.data());
    for (std::size_t i = 0; i < n * d; ++i) dh1[i] += tmp[i];
    detail::layer_norm_backward(dh1.data(), b.xhat1.data(), b.rstd1.data(), n, d, p.ptr(s.ln1_g), G + s.ln1_g,
                                G + s.ln1_b, dx.data());
  }

  for (std::size_t k = 0; k < d; ++k) G[L.cls + k] += dx[k];
  const T* dvis = dx.data() + d;
  const T* dtxt = dx.data() + (1 + nv) * d;
  detail::linear_backward<T>(dvis, image.values.data(), nv, c.visual_dim, p.ptr(L.vis_w), d, G + L.vis_w,
                             G + L.vis_b, nullptr);
  detail::linear_backward<T>(dtxt, text.values.data(), nt, c.text_dim, p.ptr(L.txt_w), d, G + L.txt_w, G + L.txt_b,
                             nullptr);
  for (std::size_t i = 0; i < nv; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      G[L.vis_pos + i * d + k] += dvis[i * d + k];
      G[L.modality + k] += dvis[i * d + k];
    }
  }
  for (std::size_t i = 0; i < nt; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      G[L.txt_pos + i * d + k] += dtxt[i * d + k];
      G[L.modality + d + k] += dtxt[i * d + k];
    }
  }
}

/// Runs fn(i) for i in [0, count) on up to `jobs` threads, contiguous
/// chunks per thread. The first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t count, unsigned jobs, Fn&& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(jobs, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i, std::size_t{0});
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        const std::size_t lo = count * w / workers, hi = count * (w + 1) / workers;
        try {
          for (std::size_t i = lo; i < hi; ++i) fn(i, w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Row i, column j = forward(images[i], texts[j]).
template <class T>
std::vector<T> score_matrix(const ModelParams<T>& p, std::span<const Sequence<T>> images,
                            std::span<const Sequence<T>> texts, unsigned jobs = 1) {
  if (images.empty() || texts.empty()) throw Error(ErrorKind::Precondition, "score_matrix needs at least one item per side");
  std::vector<T> out(images.size() * texts.size());
  parallel_for(out.size(), jobs, [&](std::size_t k, std::size_t) {
    out[k] = forward(p, images[k / texts.size()], texts[k % texts.size()]);
  });
  return out;
}

}  // namespace compose_probe
