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

// Independent checks of the alignment transformer, shared by the unit suite
// and the acceptance binary. The reference forward works on nested vectors
// and looks every weight up by tensor name, so it shares no code path with
// the library's flat-buffer kernels.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "compose_probe/align_model.hpp"
#include "compose_probe/align_train.hpp"
#include "compose_probe/rng.hpp"

namespace test_support {

using Mat = std::vector<std::vector<double>>;

inline Mat weight(const compose_probe::ModelParams<double>& p, const std::string& name) {
  const auto& t = p.layout->find(name);
  Mat m(t.rows, std::vector<double>(t.cols));
  for (std::size_t r = 0; r < t.rows; ++r) {
    for (std::size_t c = 0; c < t.cols; ++c) m[r][c] = p.values[t.offset + r * t.cols + c];
  }
  return m;
}

inline std::vector<double> vec(const compose_probe::ModelParams<double>& p, const std::string& name) {
  return weight(p, name).at(0);
}

// y = W x + b for one row.
inline std::vector<double> affine(const Mat& w, const std::vector<double>& b, const std::vector<double>& x) {
  std::vector<double> y(w.size());
  for (std::size_t o = 0; o < w.size(); ++o) {
    double s = b[o];
    for (std::size_t i = 0; i < x.size(); ++i) s += w[o][i] * x[i];
    y[o] = s;
  }
  return y;
}

inline std::vector<double> ln(const std::vector<double>& x, const std::vector<double>& g,
                              const std::vector<double>& b, double eps) {
  double sum = 0, sq = 0;
  for (double v : x) sum += v;
  const double mean = sum / static_cast<double>(x.size());
  for (double v : x) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(x.size()) + eps);
  std::vector<double> y(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) y[k] = g[k] * (x[k] - mean) / sd + b[k];
  return y;
}

/// Straight-line float64 evaluation of one (image, text) score. Padded rows
/// are dropped up front rather than masked, which is what masking is
/// supposed to be equivalent to.
inline double reference_score(const compose_probe::ModelParams<double>& p,
                              const compose_probe::Sequence<double>& image,
                              const compose_probe::Sequence<double>& text) {
  const auto& c = p.config;
  const std::size_t d = c.model_dim, H = c.heads, dh = d / H;
  const auto cls = vec(p, "cls");
  const auto vpos = weight(p, "visual_pos"), tpos = weight(p, "text_pos"), mod = weight(p, "modality");
  const auto vw = weight(p, "visual_proj.weight"), tw = weight(p, "text_proj.weight");
  const auto vb = vec(p, "visual_proj.bias"), tb = vec(p, "text_proj.bias");

  Mat xs{cls};
  for (std::size_t i = 0; i < image.length; ++i) {
    if (!image.mask[i]) continue;
    auto y = affine(vw, vb, std::vector<double>(image.row(i), image.row(i) + image.dim));
    for (std::size_t k = 0; k < d; ++k) y[k] += vpos[i][k] + mod[0][k];
    xs.push_back(y);
  }
  for (std::size_t i = 0; i < text.length; ++i) {
    if (!text.mask[i]) continue;
    auto y = affine(tw, tb, std::vector<double>(text.row(i), text.row(i) + text.dim));
    for (std::size_t k = 0; k < d; ++k) y[k] += tpos[i][k] + mod[1][k];
    xs.push_back(y);
  }
  const std::size_t n = xs.size();

  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    const auto g1 = vec(p, pre + "ln1.gamma"), b1 = vec(p, pre + "ln1.beta");
    const auto wq = weight(p, pre + "attn.wq"), wk = weight(p, pre + "attn.wk"), wv = weight(p, pre + "attn.wv");
    const auto wo = weight(p, pre + "attn.wo");
    const auto bq = vec(p, pre + "attn.bq"), bk = vec(p, pre + "attn.bk"), bv = vec(p, pre + "attn.bv");
    const auto bo = vec(p, pre + "attn.bo");
    Mat q, k, v;
    for (const auto& x : xs) {
      const auto h = ln(x, g1, b1, c.ln_eps);
      q.push_back(affine(wq, bq, h));
      k.push_back(affine(wk, bk, h));
      v.push_back(affine(wv, bv, h));
    }
    Mat ctx(n, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < H; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logits(n);
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0;
          for (std::size_t e = head * dh; e < (head + 1) * dh; ++e) s += q[i][e] * k[j][e];
          logits[j] = s / std::sqrt(static_cast<double>(dh));
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (double& a : logits) z += (a = std::exp(a - mx));
        for (std::size_t j = 0; j < n; ++j) {
          for (std::size_t e = head * dh; e < (head + 1) * dh; ++e) ctx[i][e] += logits[j] / z * v[j][e];
        }
      }
    }
    const auto g2 = vec(p, pre + "ln2.gamma"), b2 = vec(p, pre + "ln2.beta");
    const auto w1 = weight(p, pre + "ff1.weight"), w2 = weight(p, pre + "ff2.weight");
    const auto c1 = vec(p, pre + "ff1.bias"), c2 = vec(p, pre + "ff2.bias");
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = affine(wo, bo, ctx[i]);
      for (std::size_t e = 0; e < d; ++e) xs[i][e] += a[e];
      auto hidden = affine(w1, c1, ln(xs[i], g2, b2, c.ln_eps));
      for (double& u : hidden) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
      const auto f = affine(w2, c2, hidden);
      for (std::size_t e = 0; e < d; ++e) xs[i][e] += f[e];
    }
  }
  const auto out = ln(xs[0], vec(p, "final_ln.gamma"), vec(p, "final_ln.beta"), c.ln_eps);
  return affine(weight(p, "head.weight"), vec(p, "head.bias"), out)[0];
}

inline compose_probe::Sequence<double> random_sequence(compose_probe::Rng& rng, std::size_t len, std::size_t dim,
                                                       double sd = 1.0) {
  std::vector<double> v(len * dim);
  for (auto& x : v) x = sd * rng.normal();
  return compose_probe::Sequence<double>::dense(len, dim, std::move(v));
}

/// Tiny Local config used for gradient checks.
inline compose_probe::TransformerConfig gradcheck_config() {
  compose_probe::TransformerConfig c;
  c.layers = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.max_patches = 5;
  c.max_tokens = 6;
  c.visual_dim = 6;
  c.text_dim = 5;
  return c;
}

struct GradCheckReport {
  double worst = 0.0;
  std::string worst_tensor;
  std::size_t tensors = 0;
};

/// Three pairs with padded rows; inputs ~ N(0, 0.5^2).
inline compose_probe::Batch<double> gradcheck_batch(std::uint64_t seed) {
  compose_probe::Rng rng(seed + 100);
  compose_probe::Batch<double> b;
  for (std::size_t i = 0; i < 3; ++i) {
    b.images.push_back(random_sequence(rng, 2 + i, 6, 0.5).padded(1));
    b.texts.push_back(random_sequence(rng, 3, 5, 0.5).padded(i));
  }
  b.n_pos = 3;
  return b;
}

/// Analytic gradient of the contrastive loss against central differences
/// for every scalar, reduced per tensor as max|a-f| / max(max|a|, max|f|, 1e-6).
/// Weights ~ N(0, 0.25^2) and a learnable logit scale of 0.
inline GradCheckReport gradient_check(const compose_probe::Batch<double>& batch, std::uint64_t seed,
                                      double eps = 1e-3) {
  using namespace compose_probe;
  auto p = init_params<double>(gradcheck_config(), {seed, 0.25, false});
  p.values[p.layout->logit_scale] = 0.0;
  const auto analytic = grad(p, batch).grads;
  std::vector<double> numeric(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p.values[i];
    p.values[i] = keep + eps;
    const double up = grad(p, batch).loss;
    p.values[i] = keep - eps;
    const double down = grad(p, batch).loss;
    p.values[i] = keep;
    numeric[i] = (up - down) / (2 * eps);
  }
  GradCheckReport r;
  for (const auto& t : p.layout->tensors) {
    double diff = 0, ma = 0, mf = 0;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
      diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
      ma = std::max(ma, std::abs(analytic[i]));
      mf = std::max(mf, std::abs(numeric[i]));
    }
    const double err = diff / std::max({ma, mf, 1e-6});
    ++r.tensors;
    if (err >= r.worst) {
      r.worst = err;
      r.worst_tensor = t.name;
    }
  }
  return r;
}

inline GradCheckReport gradient_check(std::uint64_t seed, double eps = 1e-3) {
  return gradient_check(gradcheck_batch(seed), seed, eps);
}

/// Small 4-layer Local model with the stock optimizer settings.
inline compose_probe::TransformerConfig overfit_config() {
  compose_probe::TransformerConfig c;
  c.layers = 4;
  c.model_dim = 32;
  c.heads = 4;
  c.ff_dim = 64;
  c.max_patches = 8;
  c.max_tokens = 8;
  c.visual_dim = 16;
  c.text_dim = 16;
  return c;
}

inline compose_probe::TrainResult<float> overfit_run(std::uint64_t seed, std::size_t steps = 500) {
  using namespace compose_probe;
  const auto mc = overfit_config();
  const auto data = separable_pairs<float>(mc, 8, seed);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.epochs = steps;  // 8 pairs at batch 8: one update per epoch
  tc.eval_every = 1;
  tc.target_accuracy = 1.0;
  tc.seed = seed;
  return train(tc, init_params<float>(mc, {seed, 0.02, false}), data);
}

}  // namespace test_support
