#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "psyreid/embed.hpp"
#include "psyreid/metrics.hpp"
#include "support.hpp"

using namespace psyreid;
using testing_support::TempDir;

namespace {

StimulusManifest tiny_stimuli(const fs::path& dir, std::size_t n, int w = 6, int h = 10) {
  StimulusManifest sm;
  sm.base_dir = dir;
  for (std::size_t i = 0; i < n; ++i) {
    StimulusRow r;
    r.image_id = "img" + std::to_string(i);
    r.path = r.image_id + ".png";
    const auto v = static_cast<std::uint8_t>((i * 37) % 256);
    save_png(solid_image(w, h, v, static_cast<std::uint8_t>(255 - v), 7), dir / r.path);
    sm.rows.push_back(r);
  }
  return sm;
}

ProviderConfig fake(ProviderMode mode, std::vector<std::string> extra = {}) {
  ProviderConfig c;
  c.mode = mode;
  c.command = {PSYREID_FAKE_PROVIDER};
  if (mode == ProviderMode::subprocess) c.command.push_back("--stream");
  c.command.insert(c.command.end(), extra.begin(), extra.end());
  c.timeout_s = 30;
  return c;
}

Manifest identities(std::size_t ids, std::size_t per_id, const std::string& prefix) {
  Manifest m;
  for (std::size_t p = 0; p < ids; ++p)
    for (std::size_t i = 0; i < per_id; ++i) {
      SampleRecord r;
      r.image_id = prefix + std::to_string(p) + "_" + std::to_string(i);
      r.path = r.image_id + ".png";
      r.person_id = static_cast<std::int64_t>(p);
      r.camera_id = static_cast<int>(i);
      m.records.push_back(r);
    }
  return m;
}

}  // namespace

TEST(Emb1, RoundTripIsBitwise) {
  const EmbeddingMatrix m(4, {"a", "b"}, {1.f, -2.f, 0.5f, 1e-30f, 3.f, 4.f, 5.f, -0.f});
  const auto bytes = encode_emb1(m);
  const auto back = decode_emb1(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  EXPECT_EQ(back, m);
  EXPECT_EQ(std::memcmp(back.values().data(), m.values().data(), m.values().size() * 4), 0);

  TempDir d;
  write_embeddings(m, d / "m.emb");
  EXPECT_EQ(read_embeddings(d / "m.emb"), m);
}

TEST(Emb1, EmptyMatrixIsValid) {
  const EmbeddingMatrix m(16, {}, {});
  const auto bytes = encode_emb1(m);
  EXPECT_EQ(bytes.size(), 16u);
  const auto back = decode_emb1(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  EXPECT_EQ(back.size(), 0u);
  EXPECT_EQ(back.dim(), 16u);
}

TEST(Emb1, MalformedInputs) {
  const EmbeddingMatrix m(2, {"a"}, {1.f, 2.f});
  auto bytes = encode_emb1(m);
  const auto decode = [](const std::string& b) {
    return decode_emb1(std::span(reinterpret_cast<const std::uint8_t*>(b.data()), b.size()));
  };
  std::string bad_magic = bytes;
  bad_magic.replace(0, 4, "XXXX");
  EXPECT_THROW(decode(bad_magic), FormatError);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode(bad_version), FormatError);
  EXPECT_THROW(decode(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(decode(bytes + "x"), FormatError);

  std::string nan = bytes;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + nan.size() - 4, &q, 4);
  EXPECT_THROW(decode(nan), IntegrityError);

  EXPECT_THROW(EmbeddingMatrix(2, {"a", "a"}, {1, 2, 3, 4}), IntegrityError);
  EXPECT_THROW(EmbeddingMatrix(2, {"a"}, {1, 2, 3}), IntegrityError);
}

TEST(Synthetic, ZeroNoiseIsTheAnchorAndDeterministic) {
  const auto m = identities(5, 3, "p");
  const auto e = synthetic_embeddings(m, 0.0, 16, 99);
  for (const auto& r : m.records) {
    const auto anchor = identity_anchor(r.person_id, 16, 99);
    const auto row = e.row(*e.find(r.image_id));
    for (std::size_t d = 0; d < 16; ++d) EXPECT_EQ(row[d], static_cast<float>(anchor[d]));
  }
  EXPECT_EQ(synthetic_embeddings(m, 0.3, 16, 99), synthetic_embeddings(m, 0.3, 16, 99));
  EXPECT_NE(synthetic_embeddings(m, 0.3, 16, 99), synthetic_embeddings(m, 0.3, 16, 100));
}

TEST(Synthetic, ZeroNoiseGivesPerfectRankOne) {
  const auto q = identities(20, 1, "q");
  const auto g = identities(20, 2, "g");
  const auto qe = synthetic_embeddings(q, 0.0, 8, 5);
  const auto ge = synthetic_embeddings(g, 0.0, 8, 5);
  const auto s = evaluate(QuerySet{q, qe}, GalleryView(g, ge), EvalConfig{});
  EXPECT_EQ(s.rank1, 1.0);
  EXPECT_EQ(s.map, 1.0);
}

TEST(Synthetic, LargeNoiseApproachesMonteCarloChance) {
  const std::size_t ids = 100, dim = 32;
  const auto q = identities(ids, 10, "q");
  const auto g = identities(ids, 2, "g");
  const auto qe = synthetic_embeddings(q, 1e6, dim, 17);
  const auto ge = synthetic_embeddings(g, 0.0, dim, 17);
  const double pipeline = evaluate(QuerySet{q, qe}, GalleryView(g, ge), EvalConfig{}).rank1;

  // Independent simulation: random anchors, isotropic query, argmax check.
  std::mt19937_64 gen(2024);
  std::normal_distribution<double> n01;
  std::size_t hits = 0;
  const int trials = 10000;
  std::vector<std::vector<double>> anchors(ids, std::vector<double>(dim));
  for (int t = 0; t < trials; ++t) {
    if (t % 100 == 0)
      for (auto& a : anchors)
        for (auto& x : a) x = n01(gen);
    std::vector<double> z(dim);
    for (auto& x : z) x = n01(gen);
    std::size_t best = 0;
    double best_s = -1e300;
    for (std::size_t k = 0; k < ids; ++k) {
      double dot = 0, na = 0;
      for (std::size_t d = 0; d < dim; ++d) {
        dot += anchors[k][d] * z[d];
        na += anchors[k][d] * anchors[k][d];
      }
      if (dot / std::sqrt(na) > best_s) {
        best_s = dot / std::sqrt(na);
        best = k;
      }
    }
    hits += best == 0;
  }
  const double chance = static_cast<double>(hits) / trials;
  EXPECT_NEAR(pipeline, chance, 0.02);
}

TEST(Provider, FileModeConstantVectors) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 5);
  auto cfg = fake(ProviderMode::file, {"--constant", "--dim", "4"});
  cfg.work_dir = d / "work";
  const auto res = run_provider(cfg, sm);
  ASSERT_EQ(res.embeddings.size(), 5u);
  EXPECT_TRUE(res.missing.empty());
  for (std::size_t i = 0; i < 5; ++i)
    for (float v : res.embeddings.row(i)) EXPECT_EQ(v, 1.0f);
}

TEST(Provider, FileModeRestoresManifestOrderAndReportsMissing) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 6);
  auto cfg = fake(ProviderMode::file, {"--shuffle", "--skip", "img2"});
  cfg.work_dir = d / "work";
  const auto res = run_provider(cfg, sm);
  ASSERT_EQ(res.embeddings.size(), 5u);
  EXPECT_EQ(res.embeddings.ids()[0], "img0");
  EXPECT_EQ(res.embeddings.ids()[2], "img3");
  ASSERT_EQ(res.missing.size(), 1u);
  EXPECT_EQ(res.missing[0], "img2");
}

TEST(Provider, StreamAndFileModesAgree) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 10);
  auto fcfg = fake(ProviderMode::file);
  fcfg.work_dir = d / "work";
  auto scfg = fake(ProviderMode::subprocess);
  scfg.batch_size = 3;
  const auto a = run_provider(fcfg, sm);
  const auto b = run_provider(scfg, sm);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(b.embeddings.dim(), 8u);
}

TEST(Provider, FailedStimuliAreNotSent) {
  TempDir d;
  auto sm = tiny_stimuli(d.path(), 4);
  sm.rows[1].status = "failed: unreadable";
  const auto res = run_provider(fake(ProviderMode::subprocess), sm);
  EXPECT_EQ(res.embeddings.size(), 3u);
  EXPECT_FALSE(res.embeddings.find("img1"));
}

TEST(Provider, DimDriftIsProtocolError) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 6);
  try {
    run_provider(fake(ProviderMode::subprocess, {"--dim", "128", "--drift-after", "2"}), sm);
    FAIL() << "expected ProviderError";
  } catch (const ProviderError& e) {
    EXPECT_NE(std::string(e.what()).find("dim changed from 128 to 64"), std::string::npos) << e.what();
    EXPECT_EQ(e.completed.size(), 2u);
  }
}

TEST(Provider, CrashCarriesCompletedRows) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 8);
  auto cfg = fake(ProviderMode::subprocess, {"--crash-after", "3"});
  cfg.batch_size = 1;
  try {
    run_provider(cfg, sm);
    FAIL() << "expected ProviderError";
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.completed.size(), 3u);
    EXPECT_EQ(e.completed.ids()[2], "img2");
  }
}

TEST(Provider, OutOfOrderReplyRejected) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 4);
  EXPECT_THROW(run_provider(fake(ProviderMode::subprocess, {"--reorder"}), sm), ProviderError);
}

TEST(Provider, NonzeroExitAndTimeout) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 3);
  auto crash = fake(ProviderMode::file, {"--crash-after", "1"});
  crash.work_dir = d / "work";
  EXPECT_THROW(run_provider(crash, sm), ProviderError);

  ProviderConfig slow;
  slow.mode = ProviderMode::subprocess;
  slow.command = {"sleep", "5"};
  slow.timeout_s = 0.3;
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(run_provider(slow, sm), ProviderError);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(3));
}

TEST(Provider, ThousandFrameSoakKeepsOrder) {
  TempDir d;
  const auto sm = tiny_stimuli(d.path(), 1000, 2, 2);
  auto cfg = fake(ProviderMode::subprocess, {"--dim", "4"});
  cfg.batch_size = 16;
  const auto res = run_provider(cfg, sm);
  ASSERT_EQ(res.embeddings.size(), 1000u);
  for (std::size_t i = 0; i < 1000; ++i) ASSERT_EQ(res.embeddings.ids()[i], "img" + std::to_string(i));
}
