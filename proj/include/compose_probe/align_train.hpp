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
#include <numbers>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "compose_probe/align_model.hpp"
#include "compose_probe/align_params.hpp"
#include "compose_probe/error.hpp"
#include "compose_probe/rng.hpp"

namespace compose_probe {

struct ContrastiveResult {
  double loss = 0.0;
  std::vector<double> d_scores;  // dloss/dscores, same layout as the input
};

/// Symmetric InfoNCE over a rows x cols score matrix. The first n_pos rows
/// and columns are matched pairs (target = diagonal); any further rows or
/// columns are hard negatives that only appear in the softmax denominators.
/// Scores are divided by the temperature first.
inline ContrastiveResult contrastive_loss_hard(std::span<const double> scores, std::size_t rows, std::size_t cols,
                                               std::size_t n_pos, double temperature) {
  if (scores.size() != rows * cols) throw Error(ErrorKind::Shape, "score buffer does not match rows*cols");
  if (n_pos == 0 || n_pos > rows || n_pos > cols) {
    throw Error(ErrorKind::Shape, "positives must index a leading square block of the score matrix");
  }
  if (!(temperature > 0.0)) throw Error(ErrorKind::Precondition, "temperature must be positive");
  ContrastiveResult r;
  r.d_scores.assign(scores.size(), 0.0);
  const double w = 0.5 / static_cast<double>(n_pos);
  auto logit = [&](std::size_t i, std::size_t j) { return scores[i * cols + j] / temperature; };
  for (std::size_t i = 0; i < n_pos; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, logit(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(logit(i, j) - mx);
    const double lse = mx + std::log(z);
    r.loss += w * (lse - logit(i, i));
    for (std::size_t j = 0; j < cols; ++j) {
      const double pj = std::exp(logit(i, j) - lse);
      r.d_scores[i * cols + j] += w * (pj - (i == j ? 1.0 : 0.0)) / temperature;
    }
  }
  for (std::size_t j = 0; j < n_pos; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rows; ++i) mx = std::max(mx, logit(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < rows; ++i) z += std::exp(logit(i, j) - mx);
    const double lse = mx + std::log(z);
    r.loss += w * (lse - logit(j, j));
    for (std::size_t i = 0; i < rows; ++i) {
      const double pi = std::exp(logit(i, j) - lse);
      r.d_scores[i * cols + j] += w * (pi - (i == j ? 1.0 : 0.0)) / temperature;
    }
  }
  return r;
}

/// Symmetric form on a square B x B matrix.
inline ContrastiveResult contrastive_loss(std::span<const double> scores, std::size_t rows, std::size_t cols,
                                          double temperature) {
  if (rows != cols) {
    throw Error(ErrorKind::Shape, "symmetric contrastive loss needs a square matrix, got " + std::to_string(rows) +
                                      "x" + std::to_string(cols));
  }
  return contrastive_loss_hard(scores, rows, cols, rows, temperature);
}

/// Image i and text i are a pair for i < n_pos; later entries are hard
/// negatives (negative images as extra rows, negative captions as extra
/// columns).
template <class T>
struct Batch {
  std::vector<Sequence<T>> images;
  std::vector<Sequence<T>> texts;
  std::size_t n_pos = 0;
};

struct LossOptions {
  /// Fixed temperature; when unset the model's logit scale is used and
  /// receives a gradient.
  std::optional<double> temperature;
  unsigned jobs = 1;
};

template <class T>
double model_temperature(const ModelParams<T>& p) {
  const double ls = std::min(static_cast<double>(p.values[p.layout->logit_scale]), kMaxLogitScale);
  return std::exp(-ls);
}

struct GradResult {
  double loss = 0.0;
  std::vector<double> scores;
  std::vector<double> grads;  // flat, same layout as the parameters
};

/// Loss of the batch and its exact gradient with respect to every model
/// parameter. Each worker sums its per-pair gradients in double.
template <class T>
GradResult grad(const ModelParams<T>& p, const Batch<T>& batch, const LossOptions& opt = {}) {
  const std::size_t R = batch.images.size(), C = batch.texts.size();
  const auto s = score_matrix<T>(p, batch.images, batch.texts, opt.jobs);
  GradResult out;
  out.scores.assign(s.begin(), s.end());
  const double temp = opt.temperature ? *opt.temperature : model_temperature(p);
  auto loss = contrastive_loss_hard(out.scores, R, C, batch.n_pos, temp);
  out.loss = loss.loss;
  if (!std::isfinite(out.loss)) throw Error(ErrorKind::Numeric, "contrastive loss is not finite");

  const std::size_t P = p.size();
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(opt.jobs, R * C));
  std::vector<std::vector<double>> acc(workers, std::vector<double>(P, 0.0));
  std::vector<std::vector<T>> scratch(workers, std::vector<T>(P, T(0)));
  parallel_for(R * C, static_cast<unsigned>(workers), [&](std::size_t k, std::size_t w) {
    const double ds = loss.d_scores[k];
    if (ds == 0.0) return;
    const auto& img = batch.images[k / C];
    const auto& txt = batch.texts[k % C];
    detail::ForwardCache<T> cache;
    forward(p, img, txt, &cache);
    auto& g = scratch[w];
    std::fill(g.begin(), g.end(), T(0));
    backward(p, img, txt, cache, static_cast<T>(ds), g);
    auto& a = acc[w];
    for (std::size_t i = 0; i < P; ++i) a[i] += static_cast<double>(g[i]);
  });
  out.grads = std::move(acc[0]);
  for (std::size_t w = 1; w < workers; ++w) {
    for (std::size_t i = 0; i < P; ++i) out.grads[i] += acc[w][i];
  }
  // logits = scores * exp(logit_scale), so dL/dlogit_scale = sum(dL/dscores * scores).
  const auto ls = p.layout->logit_scale;
  if (!opt.temperature && static_cast<double>(p.values[ls]) < kMaxLogitScale) {
    double g = 0.0;
    for (std::size_t k = 0; k < out.scores.size(); ++k) g += loss.d_scores[k] * out.scores[k];
    out.grads[ls] = g;
  }
  for (std::size_t i = 0; i < P; ++i) {
    if (!std::isfinite(out.grads[i])) {
      throw Error(ErrorKind::Numeric, "non-finite gradient in tensor " + p.layout->owner(i).name);
    }
  }
  return out;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-7;
};

struct AdamState {
  std::vector<double> m, v;
  std::size_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias correction at learning
/// rate `lr`. Flat indices in `frozen` are left untouched.
template <class T>
void adamw_step(ModelParams<T>& p, std::span<const double> g, AdamState& st, double lr, const AdamWConfig& cfg,
                std::span<const std::size_t> frozen = {}) {
  const std::size_t P = p.size();
  if (g.size() != P) throw Error(ErrorKind::Shape, "gradient size does not match the parameters");
  if (st.m.empty()) {
    st.m.assign(P, 0.0);
    st.v.assign(P, 0.0);
  }
  if (st.m.size() != P || st.v.size() != P) throw Error(ErrorKind::Shape, "optimizer state does not match the parameters");
  std::vector<T> keep;
  for (auto i : frozen) keep.push_back(p.values.at(i));
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < P; ++i) {
    p.values[i] *= decay;
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g[i];
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
    p.values[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
  for (std::size_t k = 0; k < frozen.size(); ++k) p.values[frozen[k]] = keep[k];
}

/// Linear warm-up from 0 to 1 over warmup_frac * total_steps, then a half
/// cosine down to 0 at total_steps.
inline double cosine_schedule(std::size_t step, std::size_t total_steps, double warmup_frac) {
  if (total_steps == 0) return 0.0;
  const double s = static_cast<double>(std::min(step, total_steps));
  const double total = static_cast<double>(total_steps);
  const double warm = warmup_frac * total;
  if (s < warm) return s / warm;
  if (total <= warm) return 1.0;
  const double progress = (s - warm) / (total - warm);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

struct TrainConfig {
  double lr = 1e-4;
  AdamWConfig adamw;
  double warmup_frac = 0.10;
  /// Items per batch: all positives, or half positives and half hard
  /// negatives when hard_negatives is set.
  std::size_t batch_size = 50;
  bool hard_negatives = false;
  std::size_t epochs = 5;
  bool learn_temperature = true;
  /// Validate every this many steps; 0 validates at the end of each epoch.
  std::size_t eval_every = 0;
  /// Stop once validation accuracy reaches this value.
  std::optional<double> target_accuracy;
  unsigned jobs = 1;
  std::uint64_t seed = 0;

  std::size_t positives_per_batch() const { return hard_negatives ? batch_size / 2 : batch_size; }

  void validate() const {
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw Error(ErrorKind::Config, "warmup fraction must lie in (0, 1)");
    if (positives_per_batch() < 2) throw Error(ErrorKind::Config, "a batch needs at least 2 positive pairs");
    if (epochs == 0) throw Error(ErrorKind::Config, "epochs must be at least 1");
    if (!(lr >= 0.0)) throw Error(ErrorKind::Config, "learning rate must be non-negative");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j = {{"lr", c.lr},
                      {"beta1", c.adamw.beta1},
                      {"beta2", c.adamw.beta2},
                      {"eps", c.adamw.eps},
                      {"weight_decay", c.adamw.weight_decay},
                      {"warmup_frac", c.warmup_frac},
                      {"batch_size", c.batch_size},
                      {"hard_negatives", c.hard_negatives},
                      {"epochs", c.epochs},
                      {"learn_temperature", c.learn_temperature},
                      {"eval_every", c.eval_every},
                      {"seed", c.seed}};
  if (c.target_accuracy) j["target_accuracy"] = *c.target_accuracy;
  return j;
}

/// Frozen embeddings for training. negative_images/negative_texts are
/// either empty or aligned with the positives.
template <class T>
struct TrainData {
  std::vector<Sequence<T>> images, texts;
  std::vector<Sequence<T>> negative_images, negative_texts;
  std::vector<Sequence<T>> val_images, val_texts;
};

struct HistoryRow {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  std::optional<double> val_accuracy;
  bool operator==(const HistoryRow&) const = default;
};

inline void write_history_csv(std::ostream& out, std::span<const HistoryRow> rows) {
  out << "step,lr,loss,val_accuracy\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,", r.step, r.lr, r.loss);
    out << buf;
    if (r.val_accuracy) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.val_accuracy);
      out << buf;
    }
    out << '\n';
  }
}

template <class T>
struct TrainResult {
  ModelParams<T> best;
  ModelParams<T> last;
  std::vector<HistoryRow> history;
  std::size_t best_step = 0;
  double best_accuracy = -1.0;
  std::size_t steps = 0;
  std::size_t total_steps = 0;
};

/// Fraction of rows whose diagonal entry beats every other entry of the
/// row strictly; the validation pairs are scored in batches.
template <class T>
double batch_accuracy(const ModelParams<T>& p, std::span<const Sequence<T>> images, std::span<const Sequence<T>> texts,
                      std::size_t batch, unsigned jobs = 1) {
  if (images.size() != texts.size() || images.empty()) {
    throw Error(ErrorKind::Precondition, "validation needs equally many images and texts");
  }
  std::size_t hits = 0;
  for (std::size_t lo = 0; lo < images.size(); lo += batch) {
    const std::size_t b = std::min(batch, images.size() - lo);
    const auto s = score_matrix<T>(p, images.subspan(lo, b), texts.subspan(lo, b), jobs);
    for (std::size_t i = 0; i < b; ++i) {
      bool ok = true;
      for (std::size_t j = 0; j < b && ok; ++j) ok = j == i || s[i * b + i] > s[i * b + j];
      hits += ok ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(images.size());
}

/// Seeded epoch loop with shuffled batches, AdamW under the cosine schedule
/// and validation; keeps the parameters with the best validation accuracy
/// (earliest on ties).
template <class T>
TrainResult<T> train(const TrainConfig& cfg, ModelParams<T> params, const TrainData<T>& data) {
  cfg.validate();
  const auto& mc = params.config;
  const std::size_t N = data.images.size();
  if (N < 2 || data.texts.size() != N) throw Error(ErrorKind::Precondition, "training needs at least 2 aligned pairs");
  if (data.val_images.empty()) throw Error(ErrorKind::Precondition, "training needs validation pairs");
  if (cfg.hard_negatives && (data.negative_images.size() != N || data.negative_texts.size() != N)) {
    throw Error(ErrorKind::Precondition, "hard-negative batches need one negative image and caption per pair");
  }
  for (std::size_t i = 0; i < N; ++i) check_inputs(mc, data.images[i], data.texts[i]);
  for (std::size_t i = 0; i < data.negative_images.size() && cfg.hard_negatives; ++i) {
    check_inputs(mc, data.negative_images[i], data.negative_texts[i]);
  }
  for (std::size_t i = 0; i < data.val_images.size(); ++i) check_inputs(mc, data.val_images[i], data.val_texts.at(i));

  const std::size_t k = std::min(cfg.positives_per_batch(), N);
  const std::size_t per_epoch = N / k + (N % k >= 2 ? 1 : 0);
  TrainResult<T> res;
  res.total_steps = per_epoch * cfg.epochs;
  AdamState state;
  std::vector<std::size_t> frozen;
  if (!cfg.learn_temperature) frozen.push_back(params.layout->logit_scale);
  LossOptions lopt;
  lopt.jobs = cfg.jobs;
  if (!cfg.learn_temperature) lopt.temperature = model_temperature(params);

  Rng rng = Rng::derive(cfg.seed, "batches");
  std::vector<std::size_t> order(N);
  bool stop = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !stop; ++epoch) {
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    rng.shuffle(std::span(order));
    for (std::size_t b = 0; b < per_epoch && !stop; ++b) {
      const std::size_t lo = b * k, hi = std::min(N, lo + k);
      Batch<T> batch;
      for (std::size_t i = lo; i < hi; ++i) {
        batch.images.push_back(data.images[order[i]]);
        batch.texts.push_back(data.texts[order[i]]);
      }
      batch.n_pos = hi - lo;
      if (cfg.hard_negatives) {
        for (std::size_t i = lo; i < hi; ++i) {
          batch.images.push_back(data.negative_images[order[i]]);
          batch.texts.push_back(data.negative_texts[order[i]]);
        }
      }
      const auto g = grad(params, batch, lopt);
      const std::size_t step = res.steps + 1;
      const double lr = cfg.lr * cosine_schedule(step, res.total_steps, cfg.warmup_frac);
      adamw_step(params, g.grads, state, lr, cfg.adamw, frozen);
      params.check_finite("parameter");
      res.steps = step;
      HistoryRow row{step, lr, g.loss, std::nullopt};
      const bool eval_now = cfg.eval_every ? step % cfg.eval_every == 0 : b + 1 == per_epoch;
      if (eval_now || step == res.total_steps) {
        const double acc = batch_accuracy<T>(params, data.val_images, data.val_texts, k, cfg.jobs);
        row.val_accuracy = acc;
        if (acc > res.best_accuracy) {
          res.best_accuracy = acc;
          res.best_step = step;
          res.best = params;
        }
        if (cfg.target_accuracy && acc >= *cfg.target_accuracy) stop = true;
      }
      res.history.push_back(row);
    }
  }
  res.last = std::move(params);
  return res;
}

/// n pairs whose image and text share a latent one-hot code: image rows are
/// A e_i and text rows are B e_i for fixed random A, B, plus small per-row
/// noise. The pairs are linearly separable by construction.
template <class T>
TrainData<T> separable_pairs(const TransformerConfig& cfg, std::size_t n, std::uint64_t seed,
                             std::size_t patches = 4, std::size_t tokens = 4, double noise = 0.05) {
  patches = std::min(patches, cfg.max_patches);
  tokens = std::min(tokens, cfg.max_tokens);
  Rng rng = Rng::derive(seed, "separable");
  auto random_unit_columns = [&](std::size_t dim) {
    std::vector<std::vector<double>> cols(n, std::vector<double>(dim));
    for (auto& c : cols) {
      double norm = 0.0;
      for (auto& x : c) {
        x = rng.normal();
        norm += x * x;
      }
      for (auto& x : c) x /= std::sqrt(norm);
    }
    return cols;
  };
  const auto A = random_unit_columns(cfg.visual_dim);
  const auto B = random_unit_columns(cfg.text_dim);
  auto make = [&](const std::vector<double>& base, std::size_t rows) {
    std::vector<T> v(rows * base.size());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < base.size(); ++k) {
        v[r * base.size() + k] = static_cast<T>(base[k] * std::sqrt(static_cast<double>(base.size())) +
                                                noise * rng.normal());
      }
    }
    return Sequence<T>::dense(rows, base.size(), std::move(v));
  };
  TrainData<T> d;
  for (std::size_t i = 0; i < n; ++i) {
    d.images.push_back(make(A[i], patches));
    d.texts.push_back(make(B[i], tokens));
  }
  d.val_images = d.images;
  d.val_texts = d.texts;
  return d;
}

}  // namespace compose_probe
