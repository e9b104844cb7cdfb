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


#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "compose_probe/align_model.hpp"
#include "compose_probe/align_params.hpp"
#include "compose_probe/align_train.hpp"
#include "compose_probe/scorers.hpp"
#include "mock_source.hpp"
#include "test_support.hpp"
#include "transformer_oracle.hpp"

using namespace compose_probe;
using test_support::random_sequence;

namespace {

TransformerConfig tiny(std::size_t layers = 1) {
  TransformerConfig c;
  c.layers = layers;
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.max_patches = 5;
  c.max_tokens = 6;
  c.visual_dim = 4;
  c.text_dim = 3;
  return c;
}

ModelParams<double> random_params(const TransformerConfig& c, std::uint64_t seed, double sd = 0.3) {
  return init_params<double>(c, {seed, sd, false});
}

}  // namespace

// ---------------------------------------------------------------------------
// forward

TEST(Forward, ZeroHeadScoresZero) {
  const auto c = tiny(2);
  auto p = init_params<double>(c, {3, 0.5, true});
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    const auto img = random_sequence(rng, 1 + rng.uniform_index(5), 4, 3.0);
    const auto txt = random_sequence(rng, 1 + rng.uniform_index(6), 3, 3.0);
    EXPECT_EQ(forward(p, img, txt), 0.0);
  }
}

TEST(Forward, MatchesFloat64Reference) {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const auto c = tiny(1);
    const auto p = random_params(c, seed);
    Rng rng(seed * 31);
    const auto img = random_sequence(rng, 1 + rng.uniform_index(5), 4);
    const auto txt = random_sequence(rng, 1 + rng.uniform_index(6), 3);
    const double want = test_support::reference_score(p, img, txt);
    EXPECT_NEAR(forward(p, img, txt), want, 1e-10 * std::max(1.0, std::abs(want))) << "seed " << seed;
  }
}

TEST(Forward, MatchesReferenceWithPaddingAndDepth) {
  const auto c = tiny(3);
  const auto p = random_params(c, 77);
  Rng rng(5);
  const auto img = random_sequence(rng, 2, 4).padded(2, 9.0);
  const auto txt = random_sequence(rng, 3, 3).padded(3, -4.0);
  EXPECT_NEAR(forward(p, img, txt), test_support::reference_score(p, img, txt), 1e-10);
}

TEST(Forward, PaddingDoesNotChangeScore) {
  // Property: any amount of padding with any fill value leaves the score alone.
  Rng rng(12);
  for (int t = 0; t < 50; ++t) {
    const auto c = tiny(1 + t % 3);
    const auto p = random_params(c, 100 + t);
    const std::size_t nv = 1 + rng.uniform_index(3), nt = 1 + rng.uniform_index(3);
    const auto img = random_sequence(rng, nv, 4);
    const auto txt = random_sequence(rng, nt, 3);
    const double base = forward(p, img, txt);
    const auto pv = rng.uniform_index(c.max_patches - nv + 1);
    const auto pt = rng.uniform_index(c.max_tokens - nt + 1);
    const double fill = 10.0 * rng.normal();
    EXPECT_DOUBLE_EQ(forward(p, img.padded(pv, fill), txt.padded(pt, fill)), base);
  }
}

TEST(Forward, GlobalZeroInputsIgnorePaddingLength) {
  auto c = TransformerConfig::global(6);
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.layers = 2;
  const auto p = random_params(c, 4);
  const auto zi = Sequence<double>::dense(1, 6, std::vector<double>(6, 0.0));
  const auto zt = Sequence<double>::dense(1, 6, std::vector<double>(6, 0.0));
  // A Global model only admits length 1; the same zero pair scored through
  // a Local model with extra padding must agree with its unpadded score.
  const double s = forward(p, zi, zt);
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_NEAR(s, test_support::reference_score(p, zi, zt), 1e-10);
  auto lc = tiny(2);
  lc.visual_dim = lc.text_dim = 6;
  const auto lp = random_params(lc, 4);
  EXPECT_DOUBLE_EQ(forward(lp, zi.padded(3), zt.padded(1)), forward(lp, zi.padded(1), zt.padded(4)));
}

TEST(Forward, ShapeErrors) {
  const auto c = tiny(1);
  const auto p = random_params(c, 1);
  Rng rng(1);
  const auto img = random_sequence(rng, 2, 4);
  const auto txt = random_sequence(rng, 2, 3);
  auto expect_shape = [&](const Sequence<double>& a, const Sequence<double>& b) {
    try {
      forward(p, a, b);
      ADD_FAILURE() << "no error";
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::Shape);
    }
  };
  expect_shape(random_sequence(rng, 2, 5), txt);
  expect_shape(img, random_sequence(rng, 2, 4));
  expect_shape(random_sequence(rng, 6, 4), txt);
  expect_shape(img, random_sequence(rng, 7, 3));
  expect_shape(Sequence<double>{0, 4, {}, {}}, txt);
  EXPECT_THROW(Sequence<double>::dense(2, 3, std::vector<double>(5)), Error);
}

TEST(Forward, NumericErrorNamesLayer) {
  const auto c = tiny(2);
  auto p = random_params(c, 2);
  p.tensor("blocks.1.ff2.bias")[0] = std::numeric_limits<double>::infinity();
  Rng rng(1);
  try {
    forward(p, random_sequence(rng, 2, 4), random_sequence(rng, 2, 3));
    FAIL() << "no error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numeric);
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(ScoreMatrix, EntriesAreIndependentForwardCalls) {
  const auto c = tiny(2);
  const auto p = random_params(c, 8);
  Rng rng(3);
  std::vector<Sequence<double>> imgs, txts;
  for (int i = 0; i < 3; ++i) imgs.push_back(random_sequence(rng, 1 + i, 4));
  for (int i = 0; i < 3; ++i) txts.push_back(random_sequence(rng, 3 - i, 3));
  const auto s = score_matrix<double>(p, imgs, txts);
  ASSERT_EQ(s.size(), 9u);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) EXPECT_EQ(s[i * 3 + j], forward(p, imgs[i], txts[j])) << i << "," << j;
  }
  EXPECT_EQ(score_matrix<double>(p, imgs, txts, 4), s);

  const std::vector<Sequence<double>> one_i{imgs[1]}, one_t{txts[2]};
  EXPECT_EQ(score_matrix<double>(p, one_i, one_t), std::vector<double>{forward(p, imgs[1], txts[2])});

  auto dup = txts;
  dup.push_back(txts[0]);
  const auto s2 = score_matrix<double>(p, imgs, dup);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(s2[i * 4 + 3], s2[i * 4 + 0]);

  EXPECT_THROW(score_matrix<double>(p, {}, txts), Error);
}

// ---------------------------------------------------------------------------
// loss

namespace {

// Hand-rolled symmetric InfoNCE on an R x C matrix with positives on the
// leading diagonal.
double oracle_loss(const std::vector<double>& s, std::size_t R, std::size_t C, std::size_t n, double temp) {
  double rows = 0, cols = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0;
    for (std::size_t j = 0; j < C; ++j) z += std::exp(s[i * C + j] / temp);
    rows += -std::log(std::exp(s[i * C + i] / temp) / z);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double z = 0;
    for (std::size_t i = 0; i < R; ++i) z += std::exp(s[i * C + j] / temp);
    cols += -std::log(std::exp(s[j * C + j] / temp) / z);
  }
  return 0.5 * (rows / n + cols / n);
}

}  // namespace

TEST(Loss, SingleItemIsZero) {
  const std::vector<double> s{3.7};
  EXPECT_NEAR(contrastive_loss(s, 1, 1, 0.5).loss, 0.0, 1e-15);
}

TEST(Loss, SaturatedDiagonalIsNearZero) {
  std::vector<double> s(16, -1000.0);
  for (int i = 0; i < 4; ++i) s[i * 5] = 1000.0;
  EXPECT_LT(contrastive_loss(s, 4, 4, 1.0).loss, 1e-6);
}

TEST(Loss, MatchesLogSumExpOracle) {
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> s(16);
    for (auto& x : s) x = rng.normal();
    const double temp = 0.1 + rng.uniform01();
    EXPECT_NEAR(contrastive_loss(s, 4, 4, temp).loss, oracle_loss(s, 4, 4, 4, temp), 1e-6);
  }
}

TEST(Loss, HardNegativeFormMatchesOracle) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + rng.uniform_index(3), R = n + rng.uniform_index(4), C = n + rng.uniform_index(4);
    std::vector<double> s(R * C);
    for (auto& x : s) x = 2.0 * rng.normal();
    EXPECT_NEAR(contrastive_loss_hard(s, R, C, n, 0.3).loss, oracle_loss(s, R, C, n, 0.3), 1e-9);
  }
}

TEST(Loss, GradientMatchesDifferences) {
  Rng rng(6);
  const std::size_t R = 5, C = 4, n = 3;
  std::vector<double> s(R * C);
  for (auto& x : s) x = rng.normal();
  const auto r = contrastive_loss_hard(s, R, C, n, 0.7);
  for (std::size_t k = 0; k < s.size(); ++k) {
    auto up = s, down = s;
    up[k] += 1e-6;
    down[k] -= 1e-6;
    const double fd = (oracle_loss(up, R, C, n, 0.7) - oracle_loss(down, R, C, n, 0.7)) / 2e-6;
    EXPECT_NEAR(r.d_scores[k], fd, 1e-7);
  }
}

TEST(Loss, Errors) {
  const std::vector<double> s(6, 0.0);
  try {
    contrastive_loss(s, 2, 3, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Shape);
  }
  EXPECT_THROW(contrastive_loss_hard(s, 2, 3, 3, 1.0), Error);
  EXPECT_THROW(contrastive_loss_hard(s, 2, 3, 0, 1.0), Error);
  EXPECT_THROW(contrastive_loss(std::vector<double>(4), 2, 2, 0.0), Error);
  EXPECT_THROW(contrastive_loss(std::vector<double>(3), 2, 2, 1.0), Error);
}

// ---------------------------------------------------------------------------
// gradients

TEST(Grad, MatchesCentralDifferencesOnEveryTensor) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto r = test_support::gradient_check(seed);
    EXPECT_EQ(r.tensors, ParamLayout::build(test_support::gradcheck_config()).tensors.size());
    EXPECT_LT(r.worst, 1e-4) << "seed " << seed << " worst tensor " << r.worst_tensor;
  }
}

TEST(Grad, HardNegativeBatchMatchesDifferences) {
  // Extra rows and columns sharpen the loss in the CLS vector, so the step
  // is smaller here to keep truncation error below the bound.
  Rng rng(41);
  Batch<double> b;
  b.images = {random_sequence(rng, 2, 6, 0.5), random_sequence(rng, 3, 6, 0.5).padded(1),
              random_sequence(rng, 1, 6, 0.5).padded(2)};
  b.texts = {random_sequence(rng, 3, 5, 0.5).padded(1), random_sequence(rng, 2, 5, 0.5),
             random_sequence(rng, 4, 5, 0.5)};
  b.n_pos = 2;
  for (std::uint64_t seed : {2u, 6u}) {
    const auto r = test_support::gradient_check(b, seed, 2.5e-4);
    EXPECT_LT(r.worst, 1e-4) << "seed " << seed << " worst tensor " << r.worst_tensor;
  }
}

TEST(Grad, ZeroHeadGivesZeroBlockGradients) {
  const auto c = tiny(2);
  const auto p = init_params<double>(c, {5, 0.3, true});
  Rng rng(2);
  Batch<double> b;
  for (int i = 0; i < 3; ++i) {
    b.images.push_back(random_sequence(rng, 2, 4));
    b.texts.push_back(random_sequence(rng, 3, 3));
  }
  b.n_pos = 3;
  const auto g = grad(p, b);
  for (const auto& t : p.layout->tensors) {
    if (t.name.rfind("head.", 0) == 0 || t.name == "logit_scale") continue;
    for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) ASSERT_EQ(g.grads[i], 0.0) << t.name;
  }
  // The head weight still learns from the final CLS state.
  const auto& hw = p.layout->find("head.weight");
  double norm = 0;
  for (std::size_t i = hw.offset; i < hw.offset + hw.size(); ++i) norm += std::abs(g.grads[i]);
  EXPECT_GT(norm, 0.0);
}

TEST(Grad, BatchPermutationLeavesGradientUnchanged) {
  const auto c = tiny(2);
  const auto p = random_params(c, 6);
  Rng rng(8);
  Batch<double> b;
  for (int i = 0; i < 4; ++i) {
    b.images.push_back(random_sequence(rng, 1 + i % 3, 4));
    b.texts.push_back(random_sequence(rng, 1 + (i + 1) % 3, 3));
  }
  b.n_pos = 4;
  const auto g = grad(p, b);
  Batch<double> q;
  for (int i : {2, 0, 3, 1}) {
    q.images.push_back(b.images[i]);
    q.texts.push_back(b.texts[i]);
  }
  q.n_pos = 4;
  const auto h = grad(p, q);
  EXPECT_NEAR(h.loss, g.loss, 1e-12);
  for (std::size_t i = 0; i < g.grads.size(); ++i) EXPECT_NEAR(h.grads[i], g.grads[i], 1e-12);
}

TEST(Grad, DeterministicForFixedJobs) {
  const auto c = tiny(2);
  const auto p = random_params(c, 6).cast<float>();
  Rng rng(8);
  Batch<float> b;
  for (int i = 0; i < 5; ++i) {
    b.images.push_back(random_sequence(rng, 2, 4).cast<float>());
    b.texts.push_back(random_sequence(rng, 2, 3).cast<float>());
  }
  b.n_pos = 5;
  for (unsigned jobs : {1u, 3u}) {
    const auto a = grad(p, b, {std::nullopt, jobs});
    const auto z = grad(p, b, {std::nullopt, jobs});
    EXPECT_EQ(a.grads, z.grads);
    EXPECT_EQ(a.loss, z.loss);
  }
  const auto one = grad(p, b, {std::nullopt, 1}), many = grad(p, b, {std::nullopt, 3});
  for (std::size_t i = 0; i < one.grads.size(); ++i) EXPECT_NEAR(one.grads[i], many.grads[i], 1e-6);
}

TEST(Grad, FixedTemperatureLeavesLogitScaleAlone) {
  const auto c = tiny(1);
  const auto p = random_params(c, 1);
  Rng rng(1);
  Batch<double> b;
  for (int i = 0; i < 2; ++i) {
    b.images.push_back(random_sequence(rng, 2, 4));
    b.texts.push_back(random_sequence(rng, 2, 3));
  }
  b.n_pos = 2;
  EXPECT_EQ(grad(p, b, {0.1, 1}).grads[p.layout->logit_scale], 0.0);
  EXPECT_NE(grad(p, b).grads[p.layout->logit_scale], 0.0);
}

// ---------------------------------------------------------------------------
// optimizer and schedule

TEST(AdamW, ZeroGradientOnlyDecays) {
  const auto c = tiny(1);
  auto p = random_params(c, 3);
  const auto before = p.values;
  AdamState st;
  const std::vector<double> g(p.size(), 0.0);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  adamw_step(p, g, st, 0.5, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p.values[i], before[i] * (1.0 - 0.5 * 0.1));
}

TEST(AdamW, FirstStepHandOracle) {
  // After one step m = (1-b1) g and v = (1-b2) g^2, so the bias-corrected
  // ratio is g / (|g| + eps) and every weight moves by about lr.
  const auto c = tiny(1);
  auto p = random_params(c, 3);
  const auto before = p.values;
  Rng rng(2);
  std::vector<double> g(p.size());
  for (auto& x : g) x = rng.normal();
  AdamState st;
  AdamWConfig cfg;
  const double lr = 1e-3;
  adamw_step(p, g, st, lr, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double want = before[i] * (1 - lr * cfg.weight_decay) - lr * g[i] / (std::abs(g[i]) + cfg.eps);
    EXPECT_NEAR(p.values[i], want, 1e-15);
    EXPECT_NEAR(std::abs(p.values[i] - before[i]), lr, 1e-6);
  }
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, SecondStepHandOracle) {
  auto c = tiny(1);
  auto p = random_params(c, 4);
  const double x0 = p.values[10];
  std::vector<double> g1(p.size(), 0.0), g2(p.size(), 0.0);
  g1[10] = 2.0;
  g2[10] = -1.0;
  AdamState st;
  AdamWConfig cfg;
  adamw_step(p, g1, st, 0.01, cfg);
  adamw_step(p, g2, st, 0.02, cfg);
  double x = x0 * (1 - 0.01 * cfg.weight_decay);
  x -= 0.01 * ((0.1 * 2.0) / 0.1) / (std::sqrt((0.05 * 4.0) / 0.05) + cfg.eps);
  x *= 1 - 0.02 * cfg.weight_decay;
  const double m = 0.9 * 0.2 + 0.1 * -1.0, v = 0.95 * 0.2 + 0.05 * 1.0;
  x -= 0.02 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.9025)) + cfg.eps);
  EXPECT_NEAR(p.values[10], x, 1e-15);
}

TEST(AdamW, FrozenIndicesAndShapes) {
  const auto c = tiny(1);
  auto p = random_params(c, 3);
  const auto ls = p.layout->logit_scale;
  const double keep = p.values[ls];
  const std::vector<double> g(p.size(), 1.0);
  AdamState st;
  const std::vector<std::size_t> frozen{ls};
  adamw_step(p, g, st, 0.1, AdamWConfig{}, frozen);
  EXPECT_EQ(p.values[ls], keep);
  EXPECT_NE(p.values[0], random_params(c, 3).values[0]);
  EXPECT_THROW(adamw_step(p, std::vector<double>(3), st, 0.1, AdamWConfig{}), Error);
}

TEST(AdamW, IdenticalRunsAreBitwiseEqual) {
  auto run = [] {
    const auto c = tiny(1);
    auto p = random_params(c, 3).cast<float>();
    AdamState st;
    Rng rng(11);
    for (int s = 0; s < 5; ++s) {
      std::vector<double> g(p.size());
      for (auto& x : g) x = rng.normal();
      adamw_step(p, g, st, 1e-3, AdamWConfig{});
    }
    return p.values;
  };
  EXPECT_EQ(run(), run());
}

TEST(Schedule, Values) {
  EXPECT_EQ(cosine_schedule(0, 100, 0.1), 0.0);
  EXPECT_NEAR(cosine_schedule(5, 100, 0.1), 0.5, 1e-15);
  EXPECT_NEAR(cosine_schedule(10, 100, 0.1), 1.0, 1e-15);
  EXPECT_NEAR(cosine_schedule(55, 100, 0.1), 0.5, 1e-12);
  EXPECT_NEAR(cosine_schedule(100, 100, 0.1), 0.0, 1e-12);
  EXPECT_NEAR(cosine_schedule(250, 100, 0.1), 0.0, 1e-12);
  EXPECT_EQ(cosine_schedule(3, 0, 0.1), 0.0);
  // Warm-up is monotone up, decay monotone down, everything in [0, 1].
  double prev = -1;
  for (std::size_t s = 0; s <= 1000; ++s) {
    const double m = cosine_schedule(s, 1000, 0.1);
    ASSERT_GE(m, 0.0);
    ASSERT_LE(m, 1.0);
    if (s <= 100) ASSERT_GT(m, prev);
    else ASSERT_LT(m, prev);
    prev = m;
  }
}

// ---------------------------------------------------------------------------
// training

namespace {

TrainData<float> small_data(const TransformerConfig& c, std::size_t n, std::uint64_t seed) {
  return separable_pairs<float>(c, n, seed, 2, 3);
}

}  // namespace

TEST(Train, DeterministicForSeed) {
  auto c = tiny(1);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 3;
  tc.seed = 5;
  const auto data = small_data(c, 10, 1);
  const auto a = train(tc, init_params<float>(c, {1}), data);
  const auto b = train(tc, init_params<float>(c, {1}), data);
  EXPECT_EQ(a.last.values, b.last.values);
  EXPECT_EQ(a.history, b.history);
  // 10 pairs at 4 per batch: two full batches plus a batch of 2.
  EXPECT_EQ(a.total_steps, 9u);
  EXPECT_EQ(a.steps, 9u);
  tc.seed = 6;
  EXPECT_NE(train(tc, init_params<float>(c, {1}), data).last.values, a.last.values);
}

TEST(Train, SingletonTailBatchIsDropped) {
  auto c = tiny(1);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 2;
  const auto r = train(tc, init_params<float>(c, {1}), small_data(c, 9, 1));
  EXPECT_EQ(r.total_steps, 4u);
}

TEST(Train, HistoryFollowsSchedule) {
  auto c = tiny(1);
  TrainConfig tc;
  tc.batch_size = 5;
  tc.epochs = 4;
  tc.lr = 2e-3;
  const auto r = train(tc, init_params<float>(c, {1}), small_data(c, 20, 2));
  ASSERT_EQ(r.history.size(), 16u);
  for (const auto& h : r.history) {
    EXPECT_DOUBLE_EQ(h.lr, 2e-3 * cosine_schedule(h.step, 16, 0.1));
    EXPECT_TRUE(std::isfinite(h.loss));
    EXPECT_EQ(h.val_accuracy.has_value(), h.step % 4 == 0);
  }
  EXPECT_EQ(r.history.back().lr, 0.0);
  std::ostringstream csv;
  write_history_csv(csv, r.history);
  EXPECT_EQ(csv.str().rfind("step,lr,loss,val_accuracy\n1,", 0), 0u);
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  auto c = tiny(1);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 2;
  tc.lr = 0.0;
  const auto init = init_params<float>(c, {1});
  const auto r = train(tc, init, small_data(c, 8, 3));
  EXPECT_EQ(r.last.values, init.values);
}

TEST(Train, FrozenTemperatureStaysPut) {
  auto c = tiny(1);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 2;
  tc.lr = 1e-2;
  tc.learn_temperature = false;
  const auto init = init_params<float>(c, {1});
  const auto r = train(tc, init, small_data(c, 8, 3));
  EXPECT_EQ(r.last.values[init.layout->logit_scale], init.values[init.layout->logit_scale]);
  tc.learn_temperature = true;
  const auto l = train(tc, init, small_data(c, 8, 3));
  EXPECT_NE(l.last.values[init.layout->logit_scale], init.values[init.layout->logit_scale]);
}

TEST(Train, HardNegativeBatches) {
  auto c = tiny(1);
  auto data = small_data(c, 8, 3);
  auto negs = small_data(c, 8, 4);
  data.negative_images = negs.images;
  data.negative_texts = negs.texts;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.hard_negatives = true;
  tc.epochs = 2;
  const auto r = train(tc, init_params<float>(c, {1}), data);
  EXPECT_EQ(r.total_steps, 4u);
  data.negative_texts.pop_back();
  EXPECT_THROW(train(tc, init_params<float>(c, {1}), data), Error);
}

TEST(Train, ConfigValidation) {
  auto c = tiny(1);
  const auto data = small_data(c, 8, 3);
  const auto p = init_params<float>(c, {1});
  TrainConfig tc;
  tc.warmup_frac = 0.0;
  EXPECT_THROW(train(tc, p, data), Error);
  tc = {};
  tc.batch_size = 1;
  EXPECT_THROW(train(tc, p, data), Error);
  tc = {};
  tc.hard_negatives = true;
  tc.batch_size = 3;
  EXPECT_THROW(train(tc, p, data), Error);
  tc = {};
  tc.epochs = 0;
  EXPECT_THROW(train(tc, p, data), Error);
}

TEST(Train, OverfitsSeparablePairs) {
  const auto r = test_support::overfit_run(1);
  EXPECT_EQ(r.best_accuracy, 1.0);
  EXPECT_LE(r.best_step, 500u);
}

// ---------------------------------------------------------------------------
// parameters

TEST(Params, HandCountedGlobalModel) {
  auto c = TransformerConfig::global(4);
  c.layers = 1;
  c.model_dim = 4;
  c.heads = 2;
  c.ff_dim = 8;
  // proj: 2 * (4*4 + 4); pos: 1*4 + 1*4; modality 8; cls 4
  const std::size_t embed = 2 * 20 + 8 + 8 + 4;
  // ln1 8, q/k/v/o 4 * 20, ln2 8, ff1 8*4+8, ff2 4*8+4
  const std::size_t block = 8 + 80 + 8 + 40 + 36;
  // final ln 8, head 4+1, logit scale 1
  const std::size_t tail = 8 + 5 + 1;
  EXPECT_EQ(block_param_count(c), block);
  EXPECT_EQ(param_count(c), embed + block + tail);
  EXPECT_EQ(param_count(init_params<float>(c)), embed + block + tail);
}

TEST(Params, BlocksAddLinearly) {
  auto c = TransformerConfig::local();
  const auto base = param_count(c);
  for (std::size_t l = 1; l <= 6; ++l) {
    auto d = c;
    d.layers = l;
    EXPECT_EQ(param_count(d) + (4 - l) * block_param_count(c), base);
  }
}

TEST(Params, DefaultLocalNearThirteenMillion) {
  const auto n = param_count(TransformerConfig::local());
  EXPECT_EQ(n, 13334018u);
  EXPECT_NEAR(static_cast<double>(n), 13.3e6, 0.10 * 13.3e6);
}

TEST(Params, InitConventions) {
  const auto c = tiny(2);
  const auto p = init_params<double>(c, {4});
  for (double g : p.tensor("blocks.1.ln2.gamma")) EXPECT_EQ(g, 1.0);
  for (double b : p.tensor("blocks.0.attn.bk")) EXPECT_EQ(b, 0.0);
  EXPECT_NEAR(p.tensor("logit_scale")[0], std::log(1 / 0.07), 1e-12);
  // Adding layers does not reshuffle earlier tensors.
  const auto q = init_params<double>(tiny(3), {4});
  EXPECT_TRUE(std::ranges::equal(p.tensor("blocks.1.attn.wq"), q.tensor("blocks.1.attn.wq")));
  EXPECT_TRUE(std::ranges::equal(p.tensor("head.weight"), q.tensor("head.weight")));
  EXPECT_FALSE(std::ranges::equal(p.tensor("blocks.0.attn.wq"), p.tensor("blocks.1.attn.wq")));
}

TEST(Params, ConfigValidation) {
  auto c = tiny(1);
  c.layers = 0;
  try {
    ParamLayout::build(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
  c = tiny(1);
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  auto g = TransformerConfig::global();
  g.max_patches = 2;
  EXPECT_THROW(g.validate(), Error);
  EXPECT_EQ(transformer_config_from_json(to_json(tiny(3))), tiny(3));
  EXPECT_THROW(transformer_config_from_json(nlohmann::json{{"variant", "local"}}), Error);
}

TEST(Params, CheckpointRoundTrip) {
  test_support::TempDir tmp;
  const auto c = tiny(2);
  const auto p = init_params<float>(c, {9});
  save_checkpoint(tmp / "m/ckpt.emb1", p, {{"note", "x"}});
  const auto q = load_checkpoint<float>(tmp / "m/ckpt.emb1");
  EXPECT_EQ(q.config, c);
  EXPECT_EQ(q.values, p.values);
  EXPECT_THROW(load_checkpoint<float>(tmp / "missing.emb1"), Error);
}

// ---------------------------------------------------------------------------
// scorer adapter

TEST(AsScorer, GlobalModelReadsPooledEmbeddings) {
  auto c = TransformerConfig::global(8);
  c.model_dim = 8;
  c.heads = 2;
  c.ff_dim = 16;
  c.layers = 1;
  auto params = std::make_shared<const ModelParams<double>>(init_params<double>(c, {2, 0.3, false}));
  auto src = std::make_shared<test_support::KeyedRandomSource>(8, 5);
  ImageResolver resolve = [](const std::string& id) {
    return ImageRef{id, []() -> ImageRaster { throw Error(ErrorKind::Io, "no pixels needed"); }};
  };
  const auto scorer = as_scorer<double>(params, src, resolve);
  RetrievalInstance inst;
  inst.id = "x";
  inst.image = "a.png";
  inst.negative_image = "b.png";
  inst.caption = "a red cube";
  inst.negative_caption = "a blue cube";
  auto seq = [](const std::vector<float>& v) {
    return Sequence<double>::dense(1, v.size(), std::vector<double>(v.begin(), v.end()));
  };
  for (int i = 0; i < 2; ++i) {
    for (int t = 0; t < 2; ++t) {
      const auto img = seq(src->vector_for(keys::image_global(inst.image_at(i))));
      const auto txt = seq(src->vector_for(keys::for_text(inst.caption_at(t), EncodeMode::Global)));
      EXPECT_DOUBLE_EQ(scorer(inst, i, t), forward(*params, img, txt));
    }
  }
}
