#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>

#include "oracles.hpp"
#include "test_util.hpp"
#include "vpr/retrieval.hpp"

namespace vpr {
namespace {

using testing::random_tensor;

std::vector<float> unit_vector(std::size_t dim, Rng& rng) {
  auto t = l2_normalize(random_tensor<float>({dim}, rng));
  return t.values();
}

// Offsets a point by (north, east) meters on a local tangent plane.
GeoTag offset(const GeoTag& g, double north_m, double east_m) {
  const double m_per_deg = std::numbers::pi * kEarthRadiusM / 180.0;
  return {g.lat + north_m / m_per_deg,
          g.lon + east_m / (m_per_deg * std::cos(g.lat * std::numbers::pi / 180.0))};
}

TEST(HaversineTest, ZeroArc) {
  EXPECT_EQ(haversine_m({12.5, -3.25}, {12.5, -3.25}), 0.0);
}

TEST(HaversineTest, OneDegreeOfMeridian) {
  EXPECT_NEAR(haversine_m({0, 0}, {1, 0}), std::numbers::pi * 6371000.0 / 180.0, 1e-6);
  EXPECT_NEAR(haversine_m({0, 0}, {1, 0}), 111194.93, 0.01);
}

TEST(HaversineTest, SymmetricAndAgreesWithVectorFormula) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const GeoTag a{rng.uniform(-90, 90), rng.uniform(-180, 180)};
    const GeoTag b{rng.uniform(-90, 90), rng.uniform(-180, 180)};
    EXPECT_EQ(haversine_m(a, b), haversine_m(b, a));
    EXPECT_NEAR(haversine_m(a, b), oracle::sphere_distance_m(a.lat, a.lon, b.lat, b.lon), 1e-3);
  }
}

TEST(HaversineTest, OutOfRangeCoordinates) {
  EXPECT_THROW(haversine_m({91, 0}, {0, 0}), RangeError);
  EXPECT_THROW(haversine_m({0, 0}, {0, -180.5}), RangeError);
}

TEST(QueryTopkTest, SelfMatchRanksFirst) {
  Rng rng(2);
  RetrievalIndex index(16);
  std::vector<std::vector<float>> db;
  for (int i = 0; i < 20; ++i) {
    db.push_back(unit_vector(16, rng));
    index.add("img" + std::to_string(i), {0, 0}, db.back());
  }
  const auto res = query_topk(index, db[7], 3);
  ASSERT_EQ(res.size(), 3u);
  EXPECT_EQ(res[0].image_id, "img7");
  EXPECT_NEAR(res[0].similarity, 1.0f, 1e-6f);
}

TEST(QueryTopkTest, OrthogonalDatabase) {
  RetrievalIndex index(4);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<float> e(4, 0.0f);
    e[i] = 1.0f;
    index.add("e" + std::to_string(i), {0, 0}, e);
  }
  const std::vector<float> q{0, 0, 1, 0};
  const auto res = query_topk(index, q, 4);
  EXPECT_EQ(res[0].image_id, "e2");
  for (std::size_t r = 1; r < 4; ++r) EXPECT_EQ(res[r].similarity, 0.0f);
  // Ties broken by ascending id.
  EXPECT_EQ(res[1].image_id, "e0");
  EXPECT_EQ(res[2].image_id, "e1");
  EXPECT_EQ(res[3].image_id, "e3");
}

TEST(QueryTopkTest, MatchesFullSortOracle) {
  Rng rng(3);
  RetrievalIndex index(24);
  std::vector<std::vector<float>> db;
  std::vector<std::string> ids;
  for (int i = 0; i < 1000; ++i) {
    db.push_back(unit_vector(24, rng));
    ids.push_back("r" + std::to_string(1000 + i));
    index.add(ids.back(), {0, 0}, db.back());
  }
  for (int t = 0; t < 20; ++t) {
    const auto q = unit_vector(24, rng);
    const auto ranking = oracle::full_sort_ranking(db, ids, q);
    for (std::size_t k : {1u, 5u, 10u}) {
      const auto res = query_topk(index, q, k);
      ASSERT_EQ(res.size(), k);
      for (std::size_t r = 0; r < k; ++r) {
        EXPECT_EQ(res[r].index, ranking[r].row);
        EXPECT_EQ(res[r].similarity, ranking[r].similarity);
      }
    }
  }
}

TEST(QueryTopkTest, InvariantUnderDatabasePermutation) {
  Rng rng(4);
  std::vector<std::pair<std::string, std::vector<float>>> rows;
  for (int i = 0; i < 50; ++i) rows.emplace_back("p" + std::to_string(i), unit_vector(8, rng));
  // Duplicate a vector to force a tie.
  rows.emplace_back("p99", rows[3].second);
  const auto q = rows[3].second;

  auto build = [](const auto& rs) {
    RetrievalIndex idx(8);
    for (const auto& [id, v] : rs) idx.add(id, {0, 0}, v);
    return idx;
  };
  const auto base = query_topk(build(rows), q, 10);
  for (int t = 0; t < 5; ++t) {
    for (std::size_t i = rows.size() - 1; i > 0; --i) std::swap(rows[i], rows[rng.below(i + 1)]);
    const auto res = query_topk(build(rows), q, 10);
    for (std::size_t r = 0; r < 10; ++r) EXPECT_EQ(res[r].image_id, base[r].image_id);
  }
  EXPECT_EQ(base[0].image_id, "p3");
  EXPECT_EQ(base[1].image_id, "p99");
}

TEST(QueryTopkTest, CosineRankingEqualsEuclideanRanking) {
  Rng rng(5);
  RetrievalIndex index(12);
  std::vector<std::vector<float>> db;
  for (int i = 0; i < 200; ++i) {
    db.push_back(unit_vector(12, rng));
    index.add("x" + std::to_string(i), {0, 0}, db.back());
  }
  const auto q = unit_vector(12, rng);
  const auto res = query_topk(index, q, 200);
  auto dist = [&](std::size_t row) {
    double s = 0;
    for (std::size_t k = 0; k < 12; ++k) s += (double(q[k]) - db[row][k]) * (double(q[k]) - db[row][k]);
    return s;
  };
  for (std::size_t r = 1; r < res.size(); ++r) {
    EXPECT_LE(dist(res[r - 1].index), dist(res[r].index) + 1e-6);
  }
}

TEST(QueryTopkTest, Errors) {
  RetrievalIndex empty(3);
  const std::vector<float> q{1, 0, 0};
  EXPECT_THROW(query_topk(empty, q, 1), InsufficientDataError);
  RetrievalIndex index(3);
  index.add("a", {0, 0}, q);
  EXPECT_THROW(query_topk(index, std::vector<float>{1, 0}, 1), DimensionError);
  EXPECT_THROW(query_topk(index, q, 0), RangeError);
  EXPECT_THROW(index.add("b", {0, 0}, std::vector<float>{1, 0}), DimensionError);
  EXPECT_THROW(index.add("b", {100, 0}, q), RangeError);
}

class EvaluateTest : public ::testing::Test {
 protected:
  // One database record at the origin, one query with the same descriptor at
  // the given distance north.
  EvalReport single(double north_m, std::size_t k) {
    RetrievalIndex index(2);
    const GeoTag origin{40.0, -80.0};
    index.add("db", origin, std::vector<float>{1, 0});
    const std::vector<Query> qs{{"q", offset(origin, north_m, 0), Tensor<float>::vector({1, 0})}};
    return evaluate(index, qs, {k});
  }
};

TEST_F(EvaluateTest, WithinThresholdCounts) {
  const auto r = single(10.0, 1);
  EXPECT_EQ(r.threshold_m, 25.0);
  EXPECT_EQ(r.recalls, std::vector<double>{100.0});
  EXPECT_EQ(r.query_count, 1u);
}

TEST_F(EvaluateTest, BeyondThresholdFails) {
  EXPECT_EQ(single(30.0, 1).recalls, std::vector<double>{0.0});
}

TEST_F(EvaluateTest, EmptyInputsAreErrors) {
  RetrievalIndex index(2);
  index.add("db", {0, 0}, std::vector<float>{1, 0});
  EXPECT_THROW(evaluate(index, std::vector<Query>{}, {1}), InsufficientDataError);
  RetrievalIndex empty(2);
  const std::vector<Query> qs{{"q", {0, 0}, Tensor<float>::vector({1, 0})}};
  EXPECT_THROW(evaluate(empty, qs, {1}), InsufficientDataError);
}

TEST_F(EvaluateTest, MatchesBruteForceEvaluatorAndIsMonotone) {
  Rng rng(6);
  const GeoTag origin{47.6, -122.3};
  RetrievalIndex index(16);
  std::vector<std::vector<float>> db;
  std::vector<std::string> ids;
  std::vector<oracle::GeoPoint> db_tags;
  std::vector<GeoTag> place_tags;
  std::vector<std::vector<float>> place_centers;
  for (int p = 0; p < 100; ++p) {
    place_tags.push_back(offset(origin, 150.0 * (p / 10), 150.0 * (p % 10)));
    place_centers.push_back(unit_vector(16, rng));
    for (int j = 0; j < 2; ++j) {
      auto v = place_centers.back();
      for (float& x : v) x += static_cast<float>(0.3 * rng.normal() / 4);
      v = l2_normalize(Tensor<float>({16}, v)).values();
      const GeoTag tag = offset(place_tags.back(), rng.uniform(-8, 8), rng.uniform(-8, 8));
      db.push_back(v);
      ids.push_back("db" + std::to_string(p * 2 + j));
      db_tags.push_back({tag.lat, tag.lon});
      index.add(ids.back(), tag, v);
    }
  }
  std::vector<Query> queries;
  std::vector<std::vector<float>> qv;
  std::vector<oracle::GeoPoint> qt;
  for (int i = 0; i < 200; ++i) {
    const std::size_t p = rng.below(100);
    auto v = place_centers[p];
    for (float& x : v) x += static_cast<float>(rng.normal() / 4);
    v = l2_normalize(Tensor<float>({16}, v)).values();
    const GeoTag tag = offset(place_tags[p], rng.uniform(-8, 8), rng.uniform(-8, 8));
    queries.push_back({"q" + std::to_string(i), tag, Tensor<float>({16}, v)});
    qv.push_back(v);
    qt.push_back({tag.lat, tag.lon});
  }
  const std::vector<std::size_t> ks{1, 5, 10};
  const auto report = evaluate(index, queries, ks, 25.0);
  const auto want = oracle::brute_force_recall(db, ids, db_tags, qv, qt, ks, 25.0);
  EXPECT_EQ(report.recalls, want);
  EXPECT_EQ(report.ks, ks);
  EXPECT_EQ(report.query_count, 200u);
  EXPECT_LE(report.recalls[0], report.recalls[1]);
  EXPECT_LE(report.recalls[1], report.recalls[2]);
  // Not trivially 0 or 100.
  EXPECT_GT(report.recalls[0], 0.0);
  EXPECT_LT(report.recalls[0], 100.0);

  double prev = -1;
  for (double thr : {5.0, 15.0, 25.0, 200.0, 2000.0}) {
    const double r1 = evaluate(index, queries, {1}, thr).recalls[0];
    EXPECT_GE(r1, prev);
    prev = r1;
  }
}

TEST(EvalReportTest, JsonFields) {
  EvalReport r;
  r.threshold_m = 25;
  r.ks = {1, 5, 10};
  r.recalls = {50, 75, 100};
  r.query_count = 4;
  const auto j = r.to_json();
  EXPECT_EQ(j.size(), 4u);
  EXPECT_EQ(j.at("threshold_m").get<double>(), 25.0);
  EXPECT_EQ(j.at("ks").get<std::vector<std::size_t>>(), r.ks);
  EXPECT_EQ(j.at("recalls").get<std::vector<double>>(), r.recalls);
  EXPECT_EQ(j.at("query_count").get<std::size_t>(), 4u);
}

}  // namespace
}  // namespace vpr
