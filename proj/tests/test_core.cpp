#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "psyreid/core.hpp"
#include "support.hpp"

using namespace psyreid;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next();
    EXPECT_EQ(x, b.next());
    differs |= x != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng r(1);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
    ++hits[v];
  }
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0, ss = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = r.normal();
    s += v;
    ss += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.02);
}

TEST(Rng, PoissonMeanSmallAndLarge) {
  for (double mean : {0.5, 4.0, 900.0}) {
    Rng r(3);
    double s = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) s += static_cast<double>(r.poisson(mean));
    EXPECT_NEAR(s / n, mean, 0.03 * mean + 0.02) << mean;
  }
}

TEST(Mix, OrderMatters) {
  EXPECT_NE(mix64(1, 2), mix64(2, 1));
  EXPECT_EQ(mix64(1, 2, 3), mix64(1, 2, 3));
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Format, ShortestRoundTrip) {
  EXPECT_EQ(format_double(0.1), "0.1");
  EXPECT_EQ(format_double(1.0), "1");
  EXPECT_EQ(format_double(std::numeric_limits<double>::infinity()), "inf");
  const double v = 0.1 + 0.2;
  EXPECT_EQ(*parse_double(format_double(v)), v);
  EXPECT_EQ(*parse_double("inf"), std::numeric_limits<double>::infinity());
  EXPECT_FALSE(parse_double("1.0x"));
  EXPECT_FALSE(parse_double(""));
}

TEST(Csv, QuotedFieldsAndEscaping) {
  const auto f = split_csv_line(R"(a,"b,c","d ""e""",)");
  ASSERT_EQ(f.size(), 4u);
  EXPECT_EQ(f[1], "b,c");
  EXPECT_EQ(f[2], "d \"e\"");
  EXPECT_EQ(f[3], "");
  EXPECT_EQ(csv_escape("x,y"), "\"x,y\"");
  EXPECT_EQ(csv_escape("plain"), "plain");
}

TEST(Csv, TableLookupAndErrors) {
  std::istringstream in("a,b\n1,2\n\n3,4\n");
  const auto t = CsvTable::parse(in, "mem");
  ASSERT_EQ(t.rows().size(), 2u);
  EXPECT_EQ(t.get(t.rows()[1], "b"), "4");
  EXPECT_EQ(t.get(t.rows()[1], "zzz"), "");
  EXPECT_THROW(t.require({"a", "c"}), ParseError);

  std::istringstream ragged("a,b\n1\n");
  EXPECT_THROW(CsvTable::parse(ragged, "mem"), ParseError);
}

TEST(Files, AtomicWriteLeavesNoPartial) {
  testing_support::TempDir d;
  const auto p = d / "sub/x.txt";
  write_file_atomic(p, "hello");
  EXPECT_EQ(read_file(p), "hello");
  EXPECT_FALSE(fs::exists(p.string() + ".partial"));
}

TEST(ParallelFor, EveryIndexOnceAndExceptionsPropagate) {
  std::vector<int> seen(1000, 0);
  parallel_for(seen.size(), 8, [&](std::size_t i) { ++seen[i]; });
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_THROW(parallel_for(100, 4,
                            [](std::size_t i) {
                              if (i == 57) throw IoError("boom");
                            }),
               IoError);
}
