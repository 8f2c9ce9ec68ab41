#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "nanfml/oracle.hpp"

using namespace nanfml;
namespace fs = std::filesystem;

TEST(Oracle, SurrogateMatchesIndependentEvaluation) {
  // 40-digit evaluation by a separate program.
  const SurrogateOracle o;
  const auto t = o.evaluate({31.0, 51.8, 0.22, 24.2});
  EXPECT_NEAR(t.cl_fund, 2.0074741796137094, 1e-12);
  EXPECT_NEAR(t.cl_ho1, 110.60504343387176, 1e-10);
  EXPECT_NEAR(t.sr, 108.59756925425805, 1e-10);
  const auto u = o.evaluate({25.0, 30.3, 0.1, 12.5});
  EXPECT_NEAR(u.cl_fund, 516.36181618509488, 1e-9);
  EXPECT_NEAR(u.sr, 66.594773681219149, 1e-10);
}

TEST(Oracle, HigherInterceptScalesLossByADecade) {
  SurrogateConstants c;
  c.intercept = 1.2;
  const auto t = SurrogateOracle(c).evaluate({31.0, 51.8, 0.22, 24.2});
  EXPECT_NEAR(t.cl_fund, 20.074741796137094, 1e-11);
  EXPECT_NEAR(t.sr, 108.59756925425805, 1e-10);
}

TEST(Oracle, SurrogateIsDeterministic) {
  const SurrogateOracle o;
  const Design d{27.0, 44.3, 0.3, 15.0};
  const auto a = o.evaluate(d), b = o.evaluate(d);
  EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
}

TEST(Oracle, SuppressionRatioIsLossDifference) {
  const SurrogateOracle o;
  for (const auto& d : enumerate_grid(dataset_grid_spec())) {
    const auto t = o.evaluate(d);
    ASSERT_GT(t.cl_fund, 0.0);
    ASSERT_GT(t.cl_ho1, 0.0);
    ASSERT_EQ(t.sr, t.cl_ho1 - t.cl_fund);
  }
  EXPECT_EQ(GroundTruth::from_losses(3.5, 3.5).sr, 0.0);
}

TEST(Oracle, LabelBoundaries) {
  EXPECT_TRUE(is_interesting({999.9, 999.9 + 50.0, 50.0}));
  EXPECT_FALSE(is_interesting({1.0, 50.9, 49.9}));
  EXPECT_TRUE(is_interesting({2.0, 110.0, 108.0}));
  EXPECT_FALSE(is_interesting({1000.0, 1100.0, 100.0}));
}

TEST(Oracle, DatasetFloorAndCounts) {
  const auto grid = enumerate_grid(dataset_grid_spec());
  const Oracle oracle{SurrogateOracle{}};
  const auto ds = build_dataset(grid, oracle, 1.0);
  // Independent recount.
  std::size_t kept = 0, interesting = 0;
  const SurrogateOracle s;
  for (const auto& d : grid) {
    const auto t = s.evaluate(d);
    if (t.cl_fund < 1.0) continue;
    ++kept;
    interesting += t.sr >= 50.0 && t.cl_fund < 1000.0;
  }
  EXPECT_EQ(ds.size(), kept);
  EXPECT_EQ(ds.dropped, grid.size() - kept);
  EXPECT_EQ(ds.interesting_count(), interesting);
  EXPECT_EQ(ds.dropped, 224u);
  EXPECT_EQ(ds.size(), 19013u);
  for (const auto& r : ds.rows) EXPECT_GE(r.truth.cl_fund, 1.0);
  const double frac = static_cast<double>(ds.interesting_count()) / static_cast<double>(ds.size());
  EXPECT_GE(frac, 0.50);
  EXPECT_LE(frac, 0.85);
  EXPECT_EQ(build_dataset(grid, oracle, 0.0).dropped, 0u);
}

TEST(Oracle, PartitionSizesAndDisjointness) {
  const auto p = partition(std::size_t{1819}, 5);
  EXPECT_EQ(p.train.size(), 1455u);
  EXPECT_EQ(p.validation.size(), 181u);
  EXPECT_EQ(p.test.size(), 183u);
  std::set<std::size_t> all(p.train.begin(), p.train.end());
  all.insert(p.validation.begin(), p.validation.end());
  all.insert(p.test.begin(), p.test.end());
  EXPECT_EQ(all.size(), 1819u);
  EXPECT_EQ(*all.rbegin(), 1818u);
  const auto small = partition(std::size_t{10}, 0);
  EXPECT_EQ(small.train.size(), 8u);
  EXPECT_EQ(small.validation.size(), 1u);
  EXPECT_EQ(small.test.size(), 1u);
  EXPECT_THROW(partition(std::size_t{9}, 0), InvalidArgument);
  const auto again = partition(std::size_t{1819}, 5);
  EXPECT_EQ(p.train, again.train);
}

TEST(Oracle, SubsampleContract) {
  const auto grid = enumerate_grid(dataset_grid_spec());
  const auto ds = build_dataset(grid, Oracle{SurrogateOracle{}}, 1.0);
  const auto a = subsample(ds, 500, 1), b = subsample(ds, 500, 1), c = subsample(ds, 500, 2);
  ASSERT_EQ(a.size(), 500u);
  EXPECT_EQ(a.rows.front().design, b.rows.front().design);
  std::set<Design> sa, sc;
  for (const auto& r : a.rows) sa.insert(r.design);
  for (const auto& r : c.rows) sc.insert(r.design);
  EXPECT_EQ(sa.size(), 500u);
  EXPECT_NE(sa, sc);
  EXPECT_EQ(subsample(ds, ds.size(), 9).size(), ds.size());
  EXPECT_THROW(subsample(ds, ds.size() + 1, 0), InvalidArgument);
}

TEST(Oracle, CsvOracleRoundTripAndMiss) {
  const fs::path dir = fs::temp_directory_path() / "nanf_oracle_test";
  fs::create_directories(dir);
  const fs::path path = dir / "truth.csv";
  csv::write_text(path,
                  "d_core,d_cap,alpha,d_nest,cl_fund_db_km,cl_ho1_db_km\n"
                  "31,51.8,0.22,24.2,0.25,130.5\n"
                  "25,30.3,0.1,12.5,3.75,3.75\n");
  const auto o = CsvOracle::load(path);
  const auto t = o.evaluate({31.0, 51.8, 0.22, 24.2});
  EXPECT_EQ(t.cl_fund, 0.25);
  EXPECT_EQ(t.cl_ho1, 130.5);
  EXPECT_EQ(t.sr, 130.5 - 0.25);
  EXPECT_EQ(o.evaluate({25.0, 30.3, 0.1, 12.5}).sr, 0.0);
  // Keys are rounded to six decimals.
  EXPECT_EQ(o.evaluate({31.0000000001, 51.8, 0.22, 24.2}).cl_fund, 0.25);
  EXPECT_THROW(o.evaluate({31.0, 51.8, 0.22, 24.3}), CsvMiss);

  csv::write_text(path,
                  "id,cl_ho1_db_km,d_nest,alpha,d_cap,d_core,cl_fund_db_km\n"
                  "7,130.5,24.2,0.22,51.8,31,0.25\n");
  EXPECT_EQ(CsvOracle::load(path).evaluate({31.0, 51.8, 0.22, 24.2}).cl_ho1, 130.5);
  csv::write_text(path, "d_core,d_cap,alpha,d_nest,cl_fund_db_km\n31,51.8,0.22,24.2,0.25\n");
  EXPECT_THROW(CsvOracle::load(path), CorruptFile);
  fs::remove_all(dir);
}

TEST(Oracle, DatasetCsvRoundTrip) {
  auto spec = dataset_grid_spec();
  spec.d_core = {28.0, 32.0, 1.0};
  const auto ds = build_dataset(enumerate_grid(spec), Oracle{SurrogateOracle{}}, 1.0);
  const fs::path path = fs::temp_directory_path() / "nanf_ds_roundtrip.csv";
  csv::write_text(path, format_dataset_csv(ds));
  const auto back = read_dataset_csv(path);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(csv::num(back.rows[i].design.d_nest), csv::num(ds.rows[i].design.d_nest));
    EXPECT_EQ(back.rows[i].design.d_core, ds.rows[i].design.d_core);
    EXPECT_EQ(back.rows[i].interesting, ds.rows[i].interesting);
    EXPECT_EQ(csv::num(back.rows[i].truth.cl_fund), csv::num(ds.rows[i].truth.cl_fund));
  }
  fs::remove(path);
}
