#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "random_reid.hpp"
#include "psyreid/metrics.hpp"

using namespace psyreid;

using random_reid::random_fixture;
using random_reid::rec;

TEST(Similarity, DefinitionalCases) {
  const std::vector<float> a{0.3f, -1.2f, 2.f};
  EXPECT_NEAR(similarity(a, a, Similarity::cosine), 1.0, 1e-15);
  const std::vector<float> x{1, 0}, y{0, 1}, z{4, 0};
  EXPECT_EQ(similarity(x, y, Similarity::cosine), 0.0);
  EXPECT_EQ(similarity(x, z, Similarity::euclidean), -3.0);
  EXPECT_THROW(similarity(x, a, Similarity::cosine), ParameterError);
}

TEST(AveragePrecision, FormulaCases) {
  EXPECT_EQ(average_precision({true}), 1.0);
  EXPECT_NEAR(average_precision({true, false, true}), (1.0 + 2.0 / 3.0) / 2.0, 1e-12);
  EXPECT_NEAR(average_precision({false, true}), 0.5, 1e-15);
  EXPECT_THROW(average_precision({false, false}), EvaluationError);
}

TEST(AveragePrecision, MatchesPrecisionRecallIntegration) {
  std::mt19937_64 gen(5);
  for (int t = 0; t < 500; ++t) {
    std::vector<bool> flags(8);
    for (std::size_t i = 0; i < 8; ++i) flags[i] = gen() & 1;
    if (std::find(flags.begin(), flags.end(), true) == flags.end()) flags[gen() % 8] = true;
    EXPECT_NEAR(average_precision(flags), oracle::ap_pr_curve(flags), 1e-12);
  }
}

TEST(Ranking, SingletonGallery) {
  Manifest g;
  g.records.push_back(rec("g", 4, 2));
  const EmbeddingMatrix ge(2, {"g"}, {1, 0});
  const std::vector<float> q{1, 1};
  const auto rr = rank_gallery(rec("q", 4, 1), q, GalleryView(g, ge), EvalConfig{});
  ASSERT_EQ(rr.order.size(), 1u);
  EXPECT_TRUE(rr.matches[0]);
  EXPECT_EQ(rr.first_match_rank(), 1u);
}

TEST(Ranking, TiesBreakByImageId) {
  Manifest g;
  g.records.push_back(rec("b", 1, 2));
  g.records.push_back(rec("a", 2, 2));
  const EmbeddingMatrix ge(2, {"b", "a"}, {1, 0, 1, 0});
  const std::vector<float> q{1, 0};
  const auto rr = rank_gallery(rec("q", 1, 1), q, GalleryView(g, ge), EvalConfig{});
  EXPECT_EQ(g.records[rr.order[0]].image_id, "a");
  EXPECT_FALSE(rr.matches[0]);
  EXPECT_EQ(rr.first_match_rank(), 2u);
}

TEST(Ranking, CrossCameraFilterCanSkipQuery) {
  Manifest g;
  g.records.push_back(rec("same", 1, 3));
  g.records.push_back(rec("other", 2, 1));
  const EmbeddingMatrix ge(2, {"same", "other"}, {1, 0, 0, 1});
  EvalConfig cfg;
  cfg.cross_camera_filter = true;
  const std::vector<float> q{1, 0};
  const auto rr = rank_gallery(rec("q", 1, 3), q, GalleryView(g, ge), cfg);
  EXPECT_FALSE(rr.evaluable);
  EXPECT_EQ(rr.order.size(), 1u);
}

TEST(Ranking, JunkIdentitiesDropped) {
  Manifest g;
  g.records.push_back(rec("junk", 0, 1));
  g.records.push_back(rec("real", 5, 1));
  const EmbeddingMatrix ge(2, {"junk", "real"}, {1, 0, 0.5, 0.5});
  EvalConfig cfg;
  cfg.junk_ids = {0};
  const std::vector<float> q{1, 0};
  const auto rr = rank_gallery(rec("q", 5, 2), q, GalleryView(g, ge), cfg);
  ASSERT_EQ(rr.order.size(), 1u);
  EXPECT_EQ(rr.first_match_rank(), 1u);

  cfg.junk_ids = {0, 5};
  EXPECT_THROW(rank_gallery(rec("q", 5, 2), q, GalleryView(g, ge), cfg), EvaluationError);
}

TEST(Evaluate, AdversarialFixtureScoresZero) {
  Manifest q, g;
  q.records = {rec("q1", 1, 1), rec("q2", 2, 1)};
  g.records = {rec("g1", 1, 2), rec("g2", 2, 2)};
  // each query is closest to the other identity
  const EmbeddingMatrix qe(2, {"q1", "q2"}, {1, 0, 0, 1});
  const EmbeddingMatrix ge(2, {"g1", "g2"}, {0, 1, 1, 0});
  const auto s = evaluate(QuerySet{q, qe}, GalleryView(g, ge), EvalConfig{});
  EXPECT_EQ(s.rank1, 0.0);
  EXPECT_EQ(s.map, 0.5);
}

TEST(Evaluate, EmptyRetainedGallerySkipsOnlyThatQuery) {
  Manifest q, g;
  q.records = {rec("q1", 1, 1), rec("q2", 2, 1)};
  g.records = {rec("g1", 1, 1), rec("g2", 2, 2)};
  const EmbeddingMatrix qe(2, {"q1", "q2"}, {1, 0, 0, 1});
  const EmbeddingMatrix ge(2, {"g1", "g2"}, {1, 0, 0, 1});
  EvalConfig cfg;
  cfg.cross_camera_filter = true;
  cfg.junk_ids = {2};
  // q1 loses g1 to the camera filter and g2 to the junk list
  q.records.pop_back();
  const auto qe1 = EmbeddingMatrix(2, {"q1"}, {1, 0});
  EXPECT_THROW(evaluate(QuerySet{q, qe1}, GalleryView(g, ge), cfg), EvaluationError);
  q.records.push_back(rec("q2", 1, 2));
  const auto s = evaluate(QuerySet{q, qe}, GalleryView(g, ge), cfg);
  EXPECT_EQ(s.evaluable, 1u);
  EXPECT_EQ(s.rank1, 1.0);
  ASSERT_EQ(s.warnings.size(), 1u);
  EXPECT_NE(s.warnings[0].find("retained gallery is empty"), std::string::npos);
}

TEST(Evaluate, NoEvaluableQueriesIsAnError) {
  Manifest q, g;
  q.records = {rec("q1", 1, 1)};
  g.records = {rec("g1", 2, 2)};
  const EmbeddingMatrix qe(2, {"q1"}, {1, 0});
  const EmbeddingMatrix ge(2, {"g1"}, {0, 1});
  EXPECT_THROW(evaluate(QuerySet{q, qe}, GalleryView(g, ge), EvalConfig{}), EvaluationError);
}

TEST(Evaluate, MissingGalleryEmbeddingIsIntegrityError) {
  Manifest g;
  g.records = {rec("g1", 2, 2)};
  const EmbeddingMatrix ge(2, {"other"}, {0, 1});
  EXPECT_THROW(GalleryView(g, ge), IntegrityError);
}

TEST(Evaluate, MatchesBruteForceReference) {
  std::mt19937_64 gen(77);
  for (int t = 0; t < 300; ++t) {
    auto f = random_fixture(gen);
    EvalConfig cfg;
    cfg.cross_camera_filter = t % 2 == 1;
    if (t % 5 == 0) cfg.junk_ids = {3};
    const auto ref = oracle::reid_reference(f.oq, f.og, cfg.cross_camera_filter, cfg.junk_ids);
    if (ref.evaluable == 0) {
      EXPECT_ANY_THROW(evaluate(QuerySet{f.query, f.qe}, GalleryView(f.gallery, f.ge), cfg));
      continue;
    }
    const auto s = evaluate(QuerySet{f.query, f.qe}, GalleryView(f.gallery, f.ge), cfg, 1 + t % 3);
    EXPECT_EQ(s.rank1_hits, ref.rank1_hits) << t;
    EXPECT_EQ(s.evaluable, ref.evaluable) << t;
    EXPECT_NEAR(s.map, ref.map, 1e-12) << t;
  }
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  std::mt19937_64 gen(3);
  const auto f = random_fixture(gen);
  EvalConfig cfg;
  try {
    const auto a = evaluate(QuerySet{f.query, f.qe}, GalleryView(f.gallery, f.ge), cfg, 1);
    const auto b = evaluate(QuerySet{f.query, f.qe}, GalleryView(f.gallery, f.ge), cfg, 8);
    EXPECT_EQ(a.map, b.map);
    EXPECT_EQ(a.rank1, b.rank1);
  } catch (const EvaluationError&) {
    GTEST_SKIP() << "fixture has no evaluable query";
  }
}
