#include <algorithm>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "loopstage/error.hpp"
#include "loopstage/frame_metric.hpp"
#include "support/synthetic.hpp"

using namespace loopstage;

namespace {

std::shared_ptr<FrameSequence> sequence(std::vector<Image> frames) {
  return std::make_shared<FrameSequence>(FrameSequence::from_frames(std::move(frames)));
}

ActorSequence full_frame(std::vector<Image> frames) {
  return {"a", sequence(std::move(frames)), ActorKind::kFullFrame, {}, {}, {}};
}

// Naive per-pixel full-frame oracle.
double naive_distance(const Image& a, const Image& b) {
  double sum = 0.0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const double d = static_cast<double>(a.at(x, y)[c]) - b.at(x, y)[c];
        sum += d * d;
      }
    }
  }
  return sum / (a.width() * a.height());
}

}  // namespace

TEST_CASE("two-pixel hand example") {
  Image a(2, 1), b(2, 1);
  a.set(1, 0, {1, 1, 1});
  const ActorSequence actor = full_frame({a, b});
  CHECK(*frame_distance(actor, 0, 1, Image(2, 1)) == doctest::Approx(1.5));
  CHECK(*frame_distance(actor, 0, 0, Image(2, 1)) == 0.0);
}

TEST_CASE("full-frame distance matches naive oracle, is symmetric and scales quadratically") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int w = 1 + trial * 3, h = 32 - trial * 2;
    Image a = testing::random_image(w, h, rng);
    Image b = testing::random_image(w, h, rng);
    for (auto& v : a.data()) v /= 4;
    for (auto& v : b.data()) v /= 4;
    const ActorSequence actor = full_frame({a, b});
    const double d = *frame_distance(actor, 0, 1, Image(w, h));
    CHECK(d == doctest::Approx(naive_distance(a, b)).epsilon(1e-12));
    CHECK(*frame_distance(actor, 1, 0, Image(w, h)) == d);
    Image a3 = a, b3 = b;
    for (auto& v : a3.data()) v *= 3;
    for (auto& v : b3.data()) v *= 3;
    const ActorSequence scaled = full_frame({a3, b3});
    CHECK(*frame_distance(scaled, 0, 1, Image(w, h)) == doctest::Approx(9 * d).epsilon(1e-12));
  }
}

TEST_CASE("tracked distance composites patches and normalises by box overlap") {
  const int w = 40, h = 40;
  Image bg = testing::solid_image(w, h, 0, 0, 0);
  Image f0 = bg, f1 = bg;
  // A single bright pixel inside each box; the rest of the frame matches BG.
  f0.set(10, 10, {10, 0, 0});
  f1.set(12, 10, {0, 0, 0});
  ActorSequence actor{"a", sequence({f0, f1}), ActorKind::kTracked,
                      {{10, 10, 4, 4, 0}, {12, 10, 4, 4, 0}}, {}, {}};
  // Boxes cover pixels x 8..11 and 10..13, rows 8..11: overlap 2 x 4.
  CHECK(*frame_distance(actor, 0, 1, bg) == doctest::Approx(100.0 / 8.0));

  // Masking the bright pixel out replaces it with the background.
  actor.masks = {Mask(w, h), Mask(w, h)};
  CHECK(*frame_distance(actor, 0, 1, bg) == 0.0);
}

TEST_CASE("disjoint tracked boxes get a sentinel of ten times the largest distance") {
  const int w = 64, h = 16;
  Image bg(w, h);
  Image f0 = bg, f1 = bg, f2 = bg;
  f0.set(5, 5, {30, 0, 0});
  ActorSequence actor{"a", sequence({f0, f1, f2}), ActorKind::kTracked,
                      {{6, 6, 6, 6, 0}, {7, 6, 6, 6, 0}, {50, 6, 6, 6, 0}}, {}, {}};
  CHECK_FALSE(frame_distance(actor, 0, 2, bg).has_value());
  const DistanceMatrix m = build_distance_matrix(actor, bg, 2);
  const float finite = m.at(0, 1);
  CHECK(finite > 0.0f);
  CHECK(m.at(0, 2) == 10.0f * finite);
  CHECK(m.at(2, 1) == 10.0f * finite);
}

TEST_CASE("matrix of ABAB and its jump graph") {
  Image a(2, 2), b = testing::solid_image(2, 2, 9, 9, 9);
  const ActorSequence actor = full_frame({a, b, a, b});
  const DistanceMatrix m = build_distance_matrix(actor, Image(2, 2), 1);
  CHECK(m.at(0, 2) == 0.0f);
  CHECK(m.at(0, 1) > 0.0f);
  for (int i = 0; i < 4; ++i) {
    CHECK(m.at(i, i) == 0.0f);
    for (int j = 0; j < 4; ++j) CHECK(m.at(i, j) == m.at(j, i));
  }
  const JumpGraph g = build_jump_graph(m, 1);
  REQUIRE(g.candidates[0].size() == 1);
  CHECK(g.candidates[0][0].frame == 2);
  CHECK(g.has_successor(2));
  CHECK_FALSE(g.has_successor(3));
}

TEST_CASE("jump graph matches brute-force sort, clamps and excludes self and successor") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + trial % 9;
    DistanceMatrix m = testing::random_matrix(n, rng);
    if (trial % 2) m.set(0, n - 1, m.at(0, 1));  // force a tie
    for (int k : {1, 3, 50}) {
      const JumpGraph g = build_jump_graph(m, k);
      for (int t = 0; t < n; ++t) {
        std::vector<std::pair<float, int>> all;
        for (int s = 0; s < n; ++s) {
          if (s != t && s != t + 1) all.push_back({m.at(t, s), s});
        }
        std::sort(all.begin(), all.end());
        all.resize(std::min<std::size_t>(all.size(), k));
        REQUIRE(g.candidates[t].size() == all.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
          CHECK(g.candidates[t][i].frame == all[i].second);
          CHECK(g.candidates[t][i].distance == all[i].first);
        }
      }
    }
  }
}

TEST_CASE("metric cache round trip and hash check") {
  std::mt19937 rng(2);
  const DistanceMatrix m = testing::random_matrix(9, rng);
  const JumpGraph g = build_jump_graph(m, 3);
  const auto path = std::filesystem::temp_directory_path() / "loopstage_metric.cache";
  save_metric_cache(path, 42, m, g);
  auto back = load_metric_cache(path, 42);
  REQUIRE(back.has_value());
  CHECK(std::equal(back->matrix.values().begin(), back->matrix.values().end(),
                   m.values().begin()));
  CHECK(back->graph == g);
  CHECK_FALSE(load_metric_cache(path, 43).has_value());
  CHECK_FALSE(load_metric_cache(path.string() + ".missing", 42).has_value());
}

TEST_CASE("subsampled matrix keeps every stride-th frame below the limit") {
  std::mt19937 rng(4);
  const DistanceMatrix m = testing::random_matrix(10, rng);
  const DistanceMatrix s = m.subsampled(3, 8);
  REQUIRE(s.size() == 3);
  CHECK(s.at(1, 2) == m.at(3, 6));
  CHECK(s.at(0, 2) == m.at(0, 6));
}

TEST_CASE("out-of-range frames are rejected") {
  const ActorSequence actor = full_frame({Image(1, 1), Image(1, 1)});
  CHECK_THROWS_AS(frame_distance(actor, 0, 2, Image(1, 1)), InvalidRequest);
}
