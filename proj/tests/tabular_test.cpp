#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "hedonic/tabular.hpp"
#include "synthetic.hpp"

namespace hedonic {
namespace {

std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

const std::filesystem::path kDocs = std::filesystem::path(HEDONIC_SOURCE_DIR) / "docs";

PropertyRecord basic_record(const std::string& id) {
  PropertyRecord r;
  r.id = id;
  r.sale_price = 500000;
  r.lot_area = 5000;
  r.living_area = 2000;
  r.pool_sauna = 0;
  r.solar = 0;
  r.eschool_rank = "A";
  r.mschool_rank = "B";
  r.hschool_rank = "A";
  r.region = "Central";
  r.bedrooms = 3;
  r.property_type = "Single-Family";
  r.crime_level = 1;
  return r;
}

// Sort-based linear-interpolation percentile, written independently.
double percentile_oracle(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (v.size() - 1) * p / 100.0;
  const double lo = std::floor(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[static_cast<std::size_t>(lo)] + (h - lo) * (v[static_cast<std::size_t>(lo) + 1] - v[static_cast<std::size_t>(lo)]);
}

// --- ingest ---------------------------------------------------------------------

TEST(IngestTest, EmptyArray) { EXPECT_TRUE(ingest("[]").empty()); }

TEST(IngestTest, NullLotAreaIsMissing) {
  PropertyRecord r = basic_record("a");
  r.lot_area.reset();
  const auto back = ingest(write_manifest(std::vector{r}));
  ASSERT_EQ(back.size(), 1u);
  EXPECT_FALSE(back[0].lot_area.has_value());
  EXPECT_EQ(back[0], r);
}

TEST(IngestTest, SampleManifestRoundTrips) {
  const auto records = ingest(read_text_file(kDocs / "sample_manifest.json"));
  ASSERT_EQ(records.size(), 24u);
  const auto again = ingest(write_manifest(records));
  EXPECT_EQ(again, records);
  EXPECT_EQ(write_manifest(again), write_manifest(records));
}

TEST(IngestTest, RejectsBadDocuments) {
  const std::string good = write_manifest(std::vector{basic_record("a")});
  auto with = [&](const std::string& from, const std::string& to) {
    std::string s = good;
    const auto pos = s.find(from);
    EXPECT_NE(pos, std::string::npos) << from;
    return s.replace(pos, from.size(), to);
  };
  EXPECT_THROW(ingest("{"), ManifestError);
  EXPECT_THROW(ingest("{}"), ManifestError);
  EXPECT_THROW(ingest("[1]"), ManifestError);
  EXPECT_THROW(ingest(with("\"age\"", "\"agee\"")), ManifestError);
  EXPECT_THROW(ingest(with("\"sale_price\": 500000.0", "\"sale_price\": \"cheap\"")), ManifestError);
  EXPECT_THROW(ingest(with("\"sale_price\": 500000.0", "\"sale_price\": 0")), ManifestError);
  EXPECT_THROW(ingest(with("\"age\": 0.0", "\"age\": -1")), ManifestError);
  EXPECT_THROW(ingest(with("\"age\": 0.0", "\"age\": null")), ManifestError);
  EXPECT_THROW(ingest(with("\"region\": \"Central\"", "\"region\": \"Downtown\"")), ManifestError);
  EXPECT_THROW(ingest(with("\"bedrooms\": 3", "\"bedrooms\": 9")), ManifestError);
  EXPECT_THROW(ingest(with("\"bedrooms\": 3", "\"bedrooms\": 2.5")), ManifestError);
  EXPECT_THROW(ingest(with("\"solar\": 0", "\"solar\": 2")), ManifestError);
  const std::string twice = write_manifest(std::vector{basic_record("a"), basic_record("a")});
  EXPECT_THROW(ingest(twice), ManifestError);
}

// --- impute ---------------------------------------------------------------------

TEST(ImputeTest, MeanForLotArea) {
  std::vector<PropertyRecord> rs = {basic_record("a"), basic_record("b"), basic_record("c")};
  rs[0].lot_area = 2;
  rs[1].lot_area = 4;
  rs[2].lot_area.reset();
  EXPECT_EQ(*impute(rs)[2].lot_area, 3.0);
}

TEST(ImputeTest, ModeForDummiesWithTiesTowardZero) {
  std::vector<PropertyRecord> rs(4, basic_record("x"));
  rs[0].solar = 0;
  rs[1].solar = 0;
  rs[2].solar = 1;
  rs[3].solar.reset();
  EXPECT_EQ(*impute(rs)[3].solar, 0);
  rs[0].solar = 1;
  rs[1].solar = 0;
  rs[2].solar = 1;
  EXPECT_EQ(*impute(rs)[3].solar, 1);
  rs[0].pool_sauna = 1;
  rs[1].pool_sauna = 0;
  rs[2].pool_sauna.reset();
  rs[3].pool_sauna.reset();
  EXPECT_EQ(*impute(rs)[2].pool_sauna, 0);
}

// 658 of 1018 listings have no pool or sauna, so the mode is "No".
TEST(ImputeTest, PoolSaunaModeAtPublishedCounts) {
  std::vector<PropertyRecord> rs(1019, basic_record("x"));
  for (std::size_t i = 0; i < 1018; ++i) rs[i].pool_sauna = i < 658 ? 0 : 1;
  rs[1018].pool_sauna.reset();
  EXPECT_NEAR(658.0 / 1018.0 * 100.0, 64.64, 0.005);
  EXPECT_EQ(*impute(rs)[1018].pool_sauna, 0);
}

TEST(ImputeTest, EntirelyMissingColumnThrows) {
  std::vector<PropertyRecord> rs(2, basic_record("x"));
  rs[0].lot_area.reset();
  rs[1].lot_area.reset();
  EXPECT_THROW(impute(rs), ManifestError);
}

TEST(ImputeTest, ReferenceRowsSupplyTheStatistics) {
  std::vector<PropertyRecord> ref(2, basic_record("r"));
  ref[0].lot_area = 10;
  ref[1].lot_area = 20;
  std::vector<PropertyRecord> rs(1, basic_record("x"));
  rs[0].lot_area.reset();
  EXPECT_EQ(*impute(rs, ref)[0].lot_area, 15.0);
}

// --- winsorize ---------------------------------------------------------------------

std::vector<PropertyRecord> price_records(const std::vector<double>& prices) {
  std::vector<PropertyRecord> rs;
  for (std::size_t i = 0; i < prices.size(); ++i) {
    rs.push_back(basic_record("p" + std::to_string(i)));
    rs.back().sale_price = prices[i];
  }
  return rs;
}

TEST(WinsorizeTest, OneToHundredAtOneAndNinetyNine) {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  const auto out = winsorize(price_records(v), 1, 99, {"sale_price"});
  const double lo = percentile_oracle(v, 1), hi = percentile_oracle(v, 99);
  EXPECT_NEAR(lo, 1.99, 1e-12);
  EXPECT_NEAR(hi, 99.01, 1e-12);
  EXPECT_DOUBLE_EQ(out[0].sale_price, lo);
  EXPECT_DOUBLE_EQ(out[99].sale_price, hi);
  for (std::size_t i = 1; i < 99; ++i) EXPECT_EQ(out[i].sale_price, v[i]);
}

TEST(WinsorizeTest, MatchesSortBasedOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> v(3 + rng.uniform_index(200));
    for (auto& x : v) x = std::exp(rng.normal(12, 1));
    const double lo_p = rng.uniform(0, 20), hi_p = rng.uniform(80, 100);
    const double lo = percentile_oracle(v, lo_p), hi = percentile_oracle(v, hi_p);
    EXPECT_NEAR(percentile(v, lo_p), lo, 1e-9 * lo);
    const auto out = winsorize(price_records(v), lo_p, hi_p, {"sale_price"});
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_NEAR(out[i].sale_price, std::clamp(v[i], lo, hi), 1e-9 * v[i]);
    }
  }
}

TEST(WinsorizeTest, FullRangeAndConstantColumnsAreUnchanged) {
  const std::vector<double> v = {5, 1, 9, 3};
  const auto rs = price_records(v);
  EXPECT_EQ(winsorize(rs, 0, 100, {"sale_price"}), rs);
  const auto flat = price_records({7, 7, 7});
  EXPECT_EQ(winsorize(flat, 5, 95, {"sale_price"}), flat);
}

TEST(WinsorizeTest, InvalidLimitsOrEmptyColumnThrow) {
  const auto rs = price_records({1, 2, 3});
  EXPECT_THROW(winsorize(rs, 50, 50, {"sale_price"}), std::invalid_argument);
  EXPECT_THROW(winsorize(rs, -1, 50, {"sale_price"}), std::invalid_argument);
  EXPECT_THROW(winsorize({}, 1, 99, {"sale_price"}), std::invalid_argument);
}

// --- one-hot and standardize --------------------------------------------------------

TEST(OneHotTest, RegionIndicator) {
  PropertyRecord r = basic_record("a");
  r.region = "North";
  const ColumnBlock b = one_hot(std::vector{r});
  for (const std::string level : {"Central", "North", "South", "East", "Gunbarrel", "Rural"}) {
    const auto it = std::find(b.names.begin(), b.names.end(), "region." + level);
    ASSERT_NE(it, b.names.end());
    EXPECT_EQ(b.values(0, static_cast<std::size_t>(it - b.names.begin())), level == "North" ? 1.0 : 0.0);
  }
}

TEST(OneHotTest, EachVariableSumsToOnePerRow) {
  const auto m = testing::make_market(60, 3);
  const ColumnBlock b = one_hot(m.records);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    std::size_t offset = 0;
    for (const auto& var : categorical_variables()) {
      double s = 0;
      for (std::size_t j = 0; j < var.levels.size(); ++j) s += b.values(i, offset + j);
      EXPECT_EQ(s, 1.0) << var.name;
      offset += var.levels.size();
    }
  }
}

TEST(OneHotTest, ConstantIndicatorsDroppedOnlyWhenTrulyConstant) {
  std::vector<PropertyRecord> rs(3, basic_record("x"));
  ColumnBlock b = drop_constant_indicators(one_hot(rs));
  auto has = [&](const std::string& n) { return std::find(b.names.begin(), b.names.end(), n) != b.names.end(); };
  EXPECT_FALSE(has("property_type.Single-Family"));
  EXPECT_FALSE(has("property_type.Condominium"));
  EXPECT_FALSE(has("hschool_rank.A"));
  rs[1].property_type = "Condominium";
  b = drop_constant_indicators(one_hot(rs));
  EXPECT_TRUE(has("property_type.Single-Family"));
  EXPECT_TRUE(has("property_type.Condominium"));
  EXPECT_FALSE(has("property_type.Town-Home"));
}

TEST(OneHotTest, UnseenLevelThrows) {
  PropertyRecord r = basic_record("a");
  r.region = "Mars";
  EXPECT_THROW(one_hot(std::vector{r}), ManifestError);
}

ColumnBlock single_column(std::vector<double> v, ColumnKind kind = ColumnKind::Continuous) {
  ColumnBlock b;
  b.names = {"x"};
  b.kinds = {kind};
  const std::size_t n = v.size();
  b.values = Tensor64({n, 1}, std::move(v));
  return b;
}

TEST(StandardizeTest, TrainingStatisticsOnly) {
  const ColumnBlock b = single_column({1, 3, 5});
  const std::vector<std::size_t> train = {0, 1};
  const ColumnBlock s = fit_standardizer(b, train).transform(b);
  EXPECT_DOUBLE_EQ(s.values(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(s.values(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(s.values(2, 0), 3.0);
}

TEST(StandardizeTest, IndicatorsUntouchedAndZeroSpreadDropped) {
  ColumnBlock b = concat_columns(single_column({0, 1, 1}, ColumnKind::Indicator), single_column({4, 4, 9}));
  b.names = {"flag", "flat"};
  const std::vector<std::size_t> train = {0, 1};
  const ColumnBlock s = fit_standardizer(b, train).transform(b);
  EXPECT_EQ(s.names, std::vector<std::string>{"flag"});
  EXPECT_EQ(s.values(2, 0), 1.0);
}

TEST(StandardizeTest, InverseRecoversOriginals) {
  const auto m = testing::make_market(40, 4);
  const ColumnBlock b = numeric_block(impute(m.records));
  std::vector<std::size_t> train(28);
  std::iota(train.begin(), train.end(), 0);
  const Standardizer st = fit_standardizer(b, train);
  const ColumnBlock back = st.inverse(st.transform(b));
  ASSERT_EQ(back.names, b.names);
  for (std::size_t i = 0; i < b.values.size(); ++i) {
    EXPECT_NEAR(back.values[i], b.values[i], 1e-6 * std::max(1.0, std::abs(b.values[i])));
  }
}

// --- split ------------------------------------------------------------------------

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("id" + std::to_string(i));
  return ids;
}

TEST(SplitTest, TwentyIdsGiveFourteenThreeThree) {
  const SplitIndices s = split_random(make_ids(20), {0.70, 0.15, 0.15}, kDefaultSplitSeed);
  EXPECT_EQ(s.train.size(), 14u);
  EXPECT_EQ(s.validation.size(), 3u);
  EXPECT_EQ(s.test.size(), 3u);
  EXPECT_EQ(s.seed, kDefaultSplitSeed);
}

TEST(SplitTest, SameSeedSameSplit) {
  const auto a = split_random(make_ids(50), {0.7, 0.15, 0.15}, 9);
  const auto b = split_random(make_ids(50), {0.7, 0.15, 0.15}, 9);
  const auto c = split_random(make_ids(50), {0.7, 0.15, 0.15}, 10);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, c.train);
}

TEST(SplitTest, PartitionPropertyForRandomSizes) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.uniform_index(500);
    const auto ids = make_ids(n);
    const auto s = split_random(ids, {0.7, 0.15, 0.15}, rng.next_u64());
    EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::floor(0.70 * n + 1e-9)));
    EXPECT_EQ(s.train.size() + s.validation.size(), static_cast<std::size_t>(std::floor(0.85 * n + 1e-9)));
    std::multiset<std::string> all(s.train.begin(), s.train.end());
    all.insert(s.validation.begin(), s.validation.end());
    all.insert(s.test.begin(), s.test.end());
    EXPECT_EQ(all, std::multiset<std::string>(ids.begin(), ids.end()));
  }
}

TEST(SplitTest, InvalidInputsThrow) {
  EXPECT_THROW(split_random(make_ids(2), {0.7, 0.15, 0.15}, 1), std::invalid_argument);
  EXPECT_THROW(split_random(make_ids(10), {0.7, 0.2, 0.2}, 1), std::invalid_argument);
  EXPECT_THROW(split_random(make_ids(10), {1.0, 0.0, 0.0}, 1), std::invalid_argument);
}

// --- describe and target ---------------------------------------------------------------

TEST(DescribeTest, PublishedPriceVariation) {
  EXPECT_EQ(std::lround(coefficient_of_variation(896332, 679195.8)), 76);
  EXPECT_NEAR(coefficient_of_variation(896332, 679195.8), 75.775, 0.001);
}

TEST(DescribeTest, ConstantColumnHasZeroSpread) {
  const std::vector<PropertyRecord> rs(5, basic_record("x"));
  const ColumnSummary s = describe(rs)[1];
  ASSERT_EQ(s.column, "lot_area");
  EXPECT_EQ(s.mean, 5000.0);
  EXPECT_EQ(s.stddev, 0.0);
  EXPECT_EQ(s.cv_percent, 0.0);
}

TEST(DescribeTest, MatchesTwoPassOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(2 + rng.uniform_index(300));
    for (auto& x : v) x = rng.uniform(1e3, 1e6);
    long double mean = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    long double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = static_cast<double>(std::sqrt(ss / (v.size() - 1)));
    const ColumnSummary s = summarize("c", v);
    EXPECT_NEAR(s.mean, static_cast<double>(mean), 1e-9 * static_cast<double>(mean));
    EXPECT_NEAR(s.stddev, sd, 1e-9 * sd);
    EXPECT_EQ(s.min, *std::min_element(v.begin(), v.end()));
    EXPECT_EQ(s.max, *std::max_element(v.begin(), v.end()));
    EXPECT_NEAR(s.cv_percent, sd / static_cast<double>(mean) * 100, 1e-9 * 100);
  }
}

TEST(DescribeTest, SampleManifestMatchesCommittedTable) {
  const auto records = ingest(read_text_file(kDocs / "sample_manifest.json"));
  EXPECT_EQ(format_describe(describe(records)), read_text_file(kDocs / "sample_describe.txt"));
}

TEST(TargetTest, PricePerSquareFoot) {
  PropertyRecord r = basic_record("a");
  r.sale_price = 200000;
  r.living_area = 2000;
  EXPECT_EQ(price_per_sqft(r), 100.0);
  r.living_area = 0;
  EXPECT_THROW(price_per_sqft(r), ManifestError);
}

TEST(TargetTest, BatchMatchesPerRecordDivision) {
  const auto m = testing::make_market(30, 7);
  const Tensor64 y = make_target(m.records);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    EXPECT_EQ(y[i], m.records[i].sale_price / m.records[i].living_area);
  }
}

// --- full pipeline ----------------------------------------------------------------------

TEST(PipelineTest, NoMissingValuesNoConstantColumnsUniqueNames) {
  const auto m = testing::make_market(120, 8);
  const PreparedData d = prepare_dataset(m.records, PipelineOptions{});
  EXPECT_EQ(d.train.rows(), 84u);
  EXPECT_EQ(d.validation.rows(), 18u);
  EXPECT_EQ(d.test.rows(), 18u);
  EXPECT_EQ(std::set<std::string>(d.columns.begin(), d.columns.end()).size(), d.columns.size());
  EXPECT_EQ(std::find(d.columns.begin(), d.columns.end(), "hschool_rank.A"), d.columns.end());
  EXPECT_EQ(std::find(d.columns.begin(), d.columns.end(), "bedrooms.0"), d.columns.end());
  const std::size_t p = d.columns.size();
  for (const DesignMatrix* part : {&d.train, &d.validation, &d.test}) {
    for (double v : part->values.values()) EXPECT_TRUE(std::isfinite(v));
    for (double v : part->y.values()) EXPECT_TRUE(std::isfinite(v));
  }
  for (std::size_t c = 0; c < p; ++c) {
    std::set<double> seen;
    for (const DesignMatrix* part : {&d.train, &d.validation, &d.test})
      for (std::size_t i = 0; i < part->rows(); ++i) seen.insert(part->values(i, c));
    EXPECT_GT(seen.size(), 1u) << d.columns[c];
  }
}

TEST(PipelineTest, ContinuousColumnsStandardizedOnTrainingRows) {
  const auto m = testing::make_market(100, 9);
  const PreparedData d = prepare_dataset(m.records, PipelineOptions{});
  const auto it = std::find(d.columns.begin(), d.columns.end(), "age");
  ASSERT_NE(it, d.columns.end());
  const auto c = static_cast<std::size_t>(it - d.columns.begin());
  double mean = 0, sq = 0;
  for (std::size_t i = 0; i < d.train.rows(); ++i) mean += d.train.values(i, c);
  mean /= d.train.rows();
  for (std::size_t i = 0; i < d.train.rows(); ++i) sq += std::pow(d.train.values(i, c) - mean, 2);
  EXPECT_NEAR(mean, 0.0, 1e-9);
  EXPECT_NEAR(sq / d.train.rows(), 1.0, 1e-9);
}

TEST(PipelineTest, WinsorLimitsComeFromTrainingRows) {
  auto m = testing::make_market(100, 10);
  PipelineOptions opt;
  const SplitIndices split = split_random([&] {
    std::vector<std::string> ids;
    for (const auto& r : m.records) ids.push_back(r.id);
    return ids;
  }(), opt.split_ratios, opt.seed);
  // A huge outlier outside the training rows must not move the thresholds.
  for (auto& r : m.records)
    if (r.id == split.test.front()) r.hoa_fees = 1e9;
  std::vector<PropertyRecord> train;
  for (const auto& r : m.records)
    if (std::find(split.train.begin(), split.train.end(), r.id) != split.train.end()) train.push_back(r);
  const auto limits = winsor_limits(train, opt.winsor_lower, opt.winsor_upper, {"hoa_fees"});
  const PreparedData d = prepare_dataset(m.records, opt);
  const auto c = static_cast<std::size_t>(std::find(d.columns.begin(), d.columns.end(), "hoa_fees") - d.columns.begin());
  double train_max = -1e300;
  for (std::size_t i = 0; i < d.train.rows(); ++i) train_max = std::max(train_max, d.train.values(i, c));
  EXPECT_NEAR(d.test.values(0, c), train_max, 1e-9);
  EXPECT_LT(limits[0].high, 4000.0);
}

TEST(PipelineTest, FeatureCacheRestrictsRowsAndAddsImageColumns) {
  const auto m = testing::make_market(40, 11);
  FeatureCache cache("test:0", 3);
  Rng rng(12);
  for (std::size_t i = 5; i < 40; ++i) {
    cache.add(m.records[i].id, Tensor::vector({static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                                               static_cast<float>(rng.normal())}));
  }
  const PreparedData d = prepare_dataset(m.records, PipelineOptions{}, &cache);
  EXPECT_EQ(d.train.rows() + d.validation.rows() + d.test.rows(), 35u);
  EXPECT_EQ(d.columns.back(), "img.2");
  EXPECT_THROW(prepare_dataset(std::span(m.records).first(2), PipelineOptions{}), ShapeError);
}

}  // namespace
}  // namespace hedonic
