#include <random>

#include "doctest.h"
#include "loopstage/compatibility.hpp"
#include "loopstage/error.hpp"
#include "support/synthetic.hpp"

using namespace loopstage;

namespace {

ActorClusterSource chain_source(const std::string& id) {
  auto m = std::make_shared<DistanceMatrix>(3, id);
  m->set(0, 1, 1.0f);
  m->set(1, 2, 1.0f);
  m->set(0, 2, 100.0f);
  return {id, m, {{0, 0}, {2, 1}}, 2, {.sigma = 1.0}};
}

ActorClusterSource labelled_source(const std::string& id, int frames) {
  std::mt19937 rng(frames);
  auto m = std::make_shared<DistanceMatrix>(testing::random_matrix(frames, rng));
  ActionExamples ex;
  for (int t = 0; t < frames; ++t) ex[t] = t % 2;
  return {id, m, ex, 2, {}};
}

ActorClusterSource cluster_source(const std::string& id, int frames) {
  auto m = std::make_shared<DistanceMatrix>(testing::two_cluster_matrix(frames, 5.0));
  return {id, m, {{1, 0}, {frames - 2, 1}}, 2, {}};
}

PairCompatibility with_b(ActorClusterSource a, ActorClusterSource b,
                         std::vector<std::vector<int>> clusters_a,
                         std::vector<std::vector<int>> clusters_b,
                         std::vector<std::vector<double>> cells) {
  nlohmann::json j;
  j["clusters_a"] = clusters_a;
  j["clusters_b"] = clusters_b;
  j["B"] = cells;
  return PairCompatibility::from_json(j, std::move(a), std::move(b));
}

void check_rows_normalised(const ClusterSide& side) {
  for (int t = 0; t < side.memberships.frames(); ++t) {
    double sum = 0.0;
    for (double v : side.memberships.row(t)) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

}  // namespace

TEST_CASE("all-compatible B gives chi of one everywhere") {
  PairCompatibility pair(cluster_source("a", 12), cluster_source("b", 10));
  for (int ta = 0; ta < 12; ++ta) {
    for (int tb = 0; tb < 10; ++tb) CHECK(pair.chi(ta, tb) == doctest::Approx(1.0));
  }
}

TEST_CASE("hand-evaluated chi examples") {
  {
    auto pair = with_b(labelled_source("a", 2), labelled_source("b", 2), {{0}, {1}}, {{0}, {1}},
                       {{1, 100}, {1, 1}});
    CHECK(pair.chi(0, 1) == 100.0);
    CHECK(pair.chi(0, 0) == 1.0);
  }
  {
    auto pair = with_b(chain_source("a"), labelled_source("b", 2), {{0}, {2}}, {{0}, {1}},
                       {{100, 1}, {1, 1}});
    CHECK(pair.side_a().memberships.at(1, 0) == doctest::Approx(0.5));
    CHECK(pair.chi(1, 0) == doctest::Approx(50.5));
  }
}

TEST_CASE("first incompatible tag specialises both sides") {
  PairCompatibility pair(cluster_source("digger", 12), cluster_source("truck", 10));
  const double before = pair.chi(3, 7);
  CHECK(pair.current_verdict(3, 7) == Verdict::kCompatible);
  pair.tag(3, 7, Verdict::kIncompatible);
  CHECK(pair.matrix().rows() == 3);
  CHECK(pair.matrix().cols() == 3);
  CHECK(pair.matrix().incompatible_cells() == 1);
  CHECK(pair.matrix().at(2, 2) == 100.0);
  CHECK(pair.chi(3, 7) > before);
  CHECK(pair.chi(3, 7) == doctest::Approx(100.0));
  CHECK(pair.side_a().cluster_of_example(3) == 2);
  check_rows_normalised(pair.side_a());
  check_rows_normalised(pair.side_b());
}

TEST_CASE("refine on both sides keeps B unchanged") {
  PairCompatibility pair(cluster_source("a", 12), cluster_source("b", 10));
  pair.tag(3, 7, Verdict::kIncompatible);
  const CompatibilityMatrix before = pair.matrix();
  pair.tag(4, 8, Verdict::kIncompatible, TagMode::kRefine, TagMode::kRefine);
  CHECK(pair.matrix() == before);
  CHECK(pair.side_a().cluster_of_example(4) >= 0);
}

TEST_CASE("repeating an existing verdict requires an explicit mode") {
  PairCompatibility pair(cluster_source("a", 12), cluster_source("b", 10));
  CHECK_THROWS_AS(pair.tag(3, 7, Verdict::kCompatible), InvalidRequest);
}

TEST_CASE("chi stays within bounds and rows stay normalised under random tagging") {
  std::mt19937 rng(17);
  PairCompatibility pair(cluster_source("a", 16), cluster_source("b", 14));
  std::uniform_int_distribution<int> fa(0, 15), fb(0, 13), coin(0, 1);
  for (int step = 0; step < 12; ++step) {
    const int ta = fa(rng), tb = fb(rng);
    const Verdict v = coin(rng) ? Verdict::kIncompatible : Verdict::kCompatible;
    const TagMode ma = coin(rng) ? TagMode::kSpecialize : TagMode::kRefine;
    const TagMode mb = coin(rng) ? TagMode::kSpecialize : TagMode::kRefine;
    pair.tag(ta, tb, v, ma, mb);
    for (int a = 0; a < 16; ++a) {
      for (int b = 0; b < 14; ++b) {
        const double c = pair.chi(a, b);
        REQUIRE(c >= 1.0 - 1e-9);
        REQUIRE(c <= 100.0 + 1e-9);
      }
    }
    check_rows_normalised(pair.side_a());
    check_rows_normalised(pair.side_b());
  }
}

TEST_CASE("json round trip preserves chi") {
  PairCompatibility pair(cluster_source("a", 12), cluster_source("b", 10));
  pair.tag(3, 7, Verdict::kIncompatible);
  pair.tag(9, 1, Verdict::kIncompatible, TagMode::kSpecialize, TagMode::kRefine);
  const auto back = PairCompatibility::from_json(pair.to_json(), cluster_source("a", 12),
                                                 cluster_source("b", 10));
  CHECK(back.matrix() == pair.matrix());
  for (int a = 0; a < 12; ++a) {
    for (int b = 0; b < 10; ++b) CHECK(back.chi(a, b) == doctest::Approx(pair.chi(a, b)));
  }
  CHECK(pair.export_text().find("B 4x3") != std::string::npos);
}

TEST_CASE("model lookup handles orientation and missing pairs") {
  CompatibilityModel model;
  model.add_pair(PairCompatibility(cluster_source("truck", 10), cluster_source("digger", 12)));
  model.tag("digger", 3, "truck", 7, Verdict::kIncompatible);
  const auto snap = model.snapshot();
  CHECK(lookup_chi(snap, "digger", 3, "truck", 7) == doctest::Approx(100.0));
  CHECK(lookup_chi(snap, "truck", 7, "digger", 3) == doctest::Approx(100.0));
  CHECK(lookup_chi(snap, "digger", 3, "crane", 0) == 1.0);
  CHECK_THROWS_AS(model.tag("digger", 0, "crane", 0, Verdict::kIncompatible), InvalidRequest);
  // Earlier snapshots are immutable.
  model.tag("digger", 9, "truck", 1, Verdict::kIncompatible);
  CHECK(snap.at(pair_key("digger", "truck"))->matrix().rows() == 3);
}
