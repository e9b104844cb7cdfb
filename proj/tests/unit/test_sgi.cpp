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
#include <string>
#include <vector>

#include "compose_probe/sgi.hpp"
#include "oracles.hpp"
#include "mock_source.hpp"

using namespace compose_probe;
using namespace test_support;

namespace {

ImageRaster textured(int w, int h, unsigned seed) {
  ImageRaster img(w, h);
  Rng rng(seed);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_index(256));
  return img;
}

}  // namespace

TEST(Sgi, MatchesNaivePipelineOnRandomInstances) {
  Rng rng(31337);
  double worst = 0.0;
  for (int n = 0; n < 200; ++n) {
    const auto c = random_case(rng);
    test_support::KeyedRandomSource src(8 + rng.uniform_index(24), 100 + n, c.side);
    SgiConfig cfg{crop_config(c), c.strategy};
    const std::string id = "img" + std::to_string(n);
    const auto r = sgi_evaluate(unloadable(id), c.caption, &c.annotation, src, cfg);
    ASSERT_EQ(r.segments.segments, c.expected_segments) << c.caption;
    const double expected = test_support::naive_sgi(src, id, c.side, c.sizes, c.overlap, c.full_image, c.expected_segments);
    worst = std::max(worst, std::abs(r.score - expected));
    EXPECT_NEAR(r.score, expected, 1e-6) << "instance " << n;
  }
  RecordProperty("max_abs_diff", std::to_string(worst));
}

TEST(Sgi, DegenerateConfigEqualsGlobalExactly) {
  HashingEncoder enc(48, 5, 64);
  SgiConfig cfg{CropConfig::full_image_only(), {Granularity::CoarseGrained, SegmentSource::CaptionOnly}};
  for (unsigned s = 0; s < 20; ++s) {
    const auto img = textured(40 + static_cast<int>(s) * 7, 50 + static_cast<int>(s) * 3, s);
    const ImageRef ref{"i" + std::to_string(s), [img] { return img; }};
    const std::string caption = "a " + kColors[s % kColors.size()] + " " + kShapes[s % kShapes.size()];
    EXPECT_EQ(sgi_score(ref, caption, nullptr, enc, cfg), global_score(ref, caption, enc)) << s;
  }
}

TEST(Sgi, MoreCropsNeverLowerTheScore) {
  // Overlap placement is a superset of Grid placement for every size.
  Rng rng(4);
  for (int n = 0; n < 50; ++n) {
    test_support::KeyedRandomSource src(16, n, 96);
    const std::string caption = "There is a red cube and a blue sphere";
    SegmentationStrategy seg{Granularity::CoarseGrained, SegmentSource::Automatic};
    const double grid = sgi_score(unloadable("x"), caption, nullptr, src, {CropConfig::with_placement(Placement::Grid), seg});
    const double over = sgi_score(unloadable("x"), caption, nullptr, src, {CropConfig::with_placement(Placement::Overlap), seg});
    EXPECT_GE(over, grid);
    EXPECT_LE(over, 1.0 + 1e-6);
    EXPECT_GE(grid, -1.0 - 1e-6);
  }
}

TEST(Sgi, StoreBackedSourcesNeverRenderImages) {
  test_support::KeyedRandomSource src(8, 1, 224);
  const auto r = sgi_evaluate(unloadable("img"), "a red cube", nullptr, src, {});
  EXPECT_EQ(r.crops.size(), 270u);
  EXPECT_EQ(r.matches.size(), r.segments.size());
}

TEST(Sgi, SimMatrixIsCosine) {
  const auto v = EmbeddingMatrix::from_rows({{3, 4}, {1, 0}});
  const auto l = EmbeddingMatrix::from_rows({{0, 2}, {5, 0}, {1, 1}});
  const auto m = sim_matrix(v, l);
  ASSERT_EQ(m.n_crops, 2u);
  ASSERT_EQ(m.n_segments, 3u);
  EXPECT_NEAR(m.at(0, 0), 0.8, 1e-6);
  EXPECT_NEAR(m.at(0, 1), 0.6, 1e-6);
  EXPECT_NEAR(m.at(0, 2), 1.4 / std::sqrt(2.0), 1e-6);
  EXPECT_NEAR(m.at(1, 0), 0.0, 1e-6);
  EXPECT_NEAR(m.at(1, 1), 1.0, 1e-6);
  const auto matches = match_segments(m);
  EXPECT_EQ(matches[0].crop, 0u);
  EXPECT_EQ(matches[1].crop, 1u);
  EXPECT_EQ(matches[2].crop, 0u);
  EXPECT_NEAR(aggregate(matches), (0.8 + 1.0 + 1.4 / std::sqrt(2.0)) / 3.0, 1e-6);
}

TEST(Sgi, TiesGoToLowestCrop) {
  SimilarityMatrix m{3, 1, {0.5f, 0.5f, 0.5f}};
  EXPECT_EQ(match_segments(m)[0].crop, 0u);
}

TEST(Sgi, Errors) {
  EXPECT_THROW(sim_matrix(EmbeddingMatrix::from_rows({{1, 0}}), EmbeddingMatrix::from_rows({{1, 0, 0}})), Error);
  EXPECT_THROW(match_segments(SimilarityMatrix{}), Error);
  EXPECT_THROW(aggregate({}), Error);
  EXPECT_THROW(sim_matrix(EmbeddingMatrix::from_rows({{0, 0}}), EmbeddingMatrix::from_rows({{1, 0}})), Error);
  test_support::KeyedRandomSource src(8, 1, 16);
  // Every default size exceeds 16 px.
  try {
    sgi_score(unloadable("a"), "a red cube", nullptr, src, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Config);
  }
}
