#include <algorithm>
#include <fstream>

#include <gtest/gtest.h>

#include "hedonic/features.hpp"
#include "hedonic/weights_io.hpp"
#include "synthetic.hpp"

namespace hedonic {
namespace {

FeatureVector fv(std::vector<float> v) { return FeatureVector{Tensor::vector(std::move(v)), {}}; }

std::vector<FeatureVector> random_features(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<FeatureVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(d);
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 3.0));
    out.push_back(fv(std::move(v)));
  }
  return out;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// --- pooling -------------------------------------------------------------------

TEST(PoolTest, HandExample) {
  const std::vector<FeatureVector> v = {fv({1, 3}), fv({3, 5})};
  EXPECT_EQ(pool_average(v).values, Tensor::vector({2, 4}));
}

TEST(PoolTest, SingleVectorIsItself) {
  Rng rng(1);
  const auto v = random_features(rng, 1, 17);
  EXPECT_EQ(pool_average(v).values, v[0].values);
}

TEST(PoolTest, CopiesOfOneVectorPoolToItExactly) {
  Rng rng(2);
  const auto one = random_features(rng, 1, 33);
  for (std::size_t n : {2u, 3u, 7u, 10u}) {
    const std::vector<FeatureVector> copies(n, one[0]);
    EXPECT_EQ(pool_average(copies).values, one[0].values) << n;
  }
}

TEST(PoolTest, MatchesScalarLoopMean) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(9), d = 1 + rng.uniform_index(50);
    const auto v = random_features(rng, n, d);
    const Tensor p = pool_average(v).values;
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0;
      for (const auto& f : v) s += f.values[j];
      EXPECT_NEAR(p[j], s / n, 1e-6);
    }
  }
}

TEST(PoolTest, ExactlyPermutationInvariant) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto v = random_features(rng, 2 + rng.uniform_index(8), 40);
    const Tensor ref = pool_average(v).values;
    for (int k = 0; k < 5; ++k) {
      rng.shuffle(v);
      EXPECT_EQ(pool_average(v).values, ref);
    }
  }
}

TEST(PoolTest, BoundedByLargestInputMagnitude) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto v = random_features(rng, 1 + rng.uniform_index(6), 25);
    double bound = 0;
    for (const auto& f : v) bound = std::max(bound, max_abs(f.values));
    EXPECT_LE(max_abs(pool_average(v).values), bound);
  }
}

TEST(PoolTest, EmptyOrRaggedInputThrows) {
  EXPECT_THROW(pool_average({}), std::invalid_argument);
  const std::vector<FeatureVector> ragged = {fv({1, 2}), fv({1})};
  EXPECT_THROW(pool_average(ragged), ShapeError);
}

TEST(PoolTest, UniformWeightsMatchAverage) {
  Rng rng(6);
  const auto v = random_features(rng, 4, 12);
  const std::vector<double> w(4, 2.5);
  const Tensor a = pool_average(v).values, b = pool_weighted(v, w).values;
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], 1e-6);
  const std::vector<double> pick = {0, 1, 0, 0};
  EXPECT_EQ(pool_weighted(v, pick).values, v[1].values);
  EXPECT_THROW(pool_weighted(v, std::vector<double>{1, 1}), ShapeError);
  EXPECT_THROW(pool_weighted(v, std::vector<double>{1, -1, 1, 1}), std::invalid_argument);
  EXPECT_THROW(pool_weighted(v, std::vector<double>(4, 0.0)), std::invalid_argument);
}

// --- cache format ----------------------------------------------------------------

FeatureCache random_cache(Rng& rng, std::size_t n, std::size_t d) {
  FeatureCache c("vit-mini/8:0123456789abcdef", d);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> v(d);
    for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 1.0) * std::pow(10.0, rng.uniform(-6, 6)));
    c.add("id" + std::to_string(i), Tensor::vector(std::move(v)));
  }
  return c;
}

TEST(CacheFormatTest, HeaderAndLineLayout) {
  FeatureCache c("vit-s/16:abc", 2);
  c.add("A1", Tensor::vector({0.5f, -2.0f}));
  EXPECT_EQ(encode_cache(c), "VHFC1 vit-s/16:abc 2\nA1,0.5,-2\n");
}

TEST(CacheFormatTest, RoundTripIsBitExact) {
  Rng rng(7);
  const FeatureCache c = random_cache(rng, 30, 64);
  const FeatureCache back = decode_cache(encode_cache(c));
  EXPECT_EQ(back, c);
  for (const auto& [id, v] : c.entries()) {
    const Tensor& w = back.at(id);
    for (std::size_t j = 0; j < v.size(); ++j) {
      EXPECT_EQ(std::bit_cast<std::uint32_t>(w[j]), std::bit_cast<std::uint32_t>(v[j]));
    }
  }
  const auto dir = testing::scratch_dir("cache_rt");
  save_cache(c, dir / "f.vhfc1");
  EXPECT_EQ(load_cache(dir / "f.vhfc1"), c);
}

TEST(CacheFormatTest, MalformedInputsAreRejected) {
  EXPECT_THROW(decode_cache(""), CacheError);
  EXPECT_THROW(decode_cache("VHFC2 x 2\n"), CacheError);
  EXPECT_THROW(decode_cache("VHFC1 x 0\n"), CacheError);
  EXPECT_THROW(decode_cache("VHFC1 x 2\nA,1\n"), CacheError);
  EXPECT_THROW(decode_cache("VHFC1 x 2\nA,1,2,3\n"), CacheError);
  EXPECT_THROW(decode_cache("VHFC1 x 2\nA,1,zz\n"), CacheError);
  EXPECT_THROW(decode_cache("VHFC1 x 2\nA,1,2\nA,3,4\n"), CacheError);
  EXPECT_THROW(decode_cache("VHFC1 x 2\nA\n"), CacheError);
}

TEST(CacheFormatTest, CacheRejectsBadEntries) {
  FeatureCache c("x", 2);
  EXPECT_THROW(c.add("a,b", Tensor::vector({1, 2})), CacheError);
  EXPECT_THROW(c.add("a", Tensor::vector({1})), CacheError);
  EXPECT_THROW(FeatureCache("has space", 2), CacheError);
  EXPECT_THROW(c.at("missing"), CacheError);
}

// --- weight format ----------------------------------------------------------------

TEST(WeightFormatTest, ByteLayout) {
  WeightStore w;
  w.insert("ab", Tensor::vector({1.0f}));
  const std::vector<std::uint8_t> expected = {'V', 'H', 'W', '1', 1, 0, 0, 0, 0, 0, 0, 0,  // count
                                              2,   0,   'a', 'b',                             // name
                                              1,                                              // rank
                                              1,   0,   0,   0,                               // extent
                                              0x00, 0x00, 0x80, 0x3f};                        // 1.0f
  EXPECT_EQ(encode_vhw1(w), expected);
}

TEST(WeightFormatTest, RoundTripIsBitExact) {
  Rng rng(8);
  const WeightStore w = init_backbone(preset("vit-mini/8"), rng);
  const WeightStore back = decode_vhw1(encode_vhw1(w));
  ASSERT_EQ(back.size(), w.size());
  for (const auto& [name, t] : w) EXPECT_EQ(back.at(name), t) << name;
  const auto dir = testing::scratch_dir("vhw1_rt");
  save_weights(w, dir / "w.vhw1");
  EXPECT_EQ(encode_vhw1(load_weights(dir / "w.vhw1")), encode_vhw1(w));
}

TEST(WeightFormatTest, CorruptionIsRejected) {
  WeightStore w;
  w.insert("x", Tensor::vector({1, 2, 3}));
  auto bytes = encode_vhw1(w);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_vhw1(bad), WeightFormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_vhw1(bad), WeightFormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_vhw1(bad), WeightFormatError);
}

TEST(WeightFormatTest, BackboneIdTracksWeights) {
  Rng a(9), b(9), c(10);
  const ViTConfig cfg = preset("vit-mini/8");
  const WeightStore x = init_backbone(cfg, a), y = init_backbone(cfg, b), z = init_backbone(cfg, c);
  EXPECT_EQ(backbone_id("vit-mini/8", x), backbone_id("vit-mini/8", y));
  EXPECT_NE(backbone_id("vit-mini/8", x), backbone_id("vit-mini/8", z));
  EXPECT_EQ(backbone_id("vit-mini/8", x).rfind("vit-mini/8:", 0), 0u);
}

// --- extraction and cache building --------------------------------------------------

class ExtractionTest : public ::testing::Test {
 protected:
  void SetUp() override {
    market_ = testing::make_market(5, 42, 1);
    dir_ = testing::scratch_dir("extract");
    testing::write_images(market_, dir_);
    Rng rng(11);
    weights_ = init_backbone(cfg_, rng);
  }
  ViTConfig cfg_ = preset("vit-mini/8");
  testing::SyntheticMarket market_;
  std::filesystem::path dir_;
  WeightStore weights_;
};

TEST_F(ExtractionTest, OneVectorPerImageMatchingSingleForwardCalls) {
  const PropertyRecord& r = market_.records[4];
  PropertyImageSet set{r.id, r.images};
  set.paths.push_back(r.images[0]);
  const auto feats = extract_property_features(set, weights_, cfg_, dir_);
  ASSERT_EQ(feats.size(), set.paths.size());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    EXPECT_EQ(feats[i].dim(), cfg_.dim);
    const RasterImage img = load_image(dir_ / set.paths[i]);
    EXPECT_EQ(feats[i].values, forward(preprocess_for_extraction(img, cfg_.input_size), weights_, cfg_).values);
  }
  EXPECT_EQ(feats.back().values, feats.front().values);
}

TEST_F(ExtractionTest, UndecodableImagesAreSkippedWithWarning) {
  std::ofstream(dir_ / "junk.ppm") << "not an image";
  const PropertyRecord& r = market_.records[2];
  PropertyImageSet set{r.id, {"junk.ppm", r.images[0]}};
  std::vector<std::string> warnings;
  const auto feats = extract_property_features(set, weights_, cfg_, dir_, &warnings);
  EXPECT_EQ(feats.size(), 1u);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(extract_property_features({r.id, {"junk.ppm"}}, weights_, cfg_, dir_), ImageError);
  EXPECT_THROW(extract_property_features({r.id, {}}, weights_, cfg_, dir_), ImageError);
}

TEST_F(ExtractionTest, ZeroImagePropertiesAreExcluded) {
  const auto sets = testing::image_sets(market_.records);
  const CacheBuildResult res = build_cache(sets, weights_, cfg_, backbone_id(cfg_.name, weights_), dir_);
  EXPECT_EQ(res.cache.size(), 4u);
  ASSERT_EQ(res.excluded.size(), 1u);
  EXPECT_EQ(res.excluded[0].id, market_.records[0].id);
  EXPECT_FALSE(res.cache.contains(market_.records[0].id));
  EXPECT_EQ(encode_exclusions(res.excluded), market_.records[0].id + "\tno images\n");
  for (std::size_t i = 1; i < 5; ++i) {
    const auto& r = market_.records[i];
    const auto feats = extract_property_features({r.id, r.images}, weights_, cfg_, dir_);
    EXPECT_EQ(res.cache.at(r.id), pool_average(feats).values);
  }
}

TEST_F(ExtractionTest, RebuildGivesIdenticalBytesForAnyThreadCount) {
  const auto sets = testing::image_sets(market_.records);
  const std::string id = backbone_id(cfg_.name, weights_);
  const std::string a = encode_cache(build_cache(sets, weights_, cfg_, id, dir_, 1).cache);
  const std::string b = encode_cache(build_cache(sets, weights_, cfg_, id, dir_, 3).cache);
  EXPECT_EQ(a, b);
  save_cache(build_cache(sets, weights_, cfg_, id, dir_).cache, dir_ / "c.vhfc1");
  EXPECT_EQ(read_all(dir_ / "c.vhfc1"), a);
}

// Same filter at full scale: 14 of 1018 listings have no photos.
TEST(ExclusionScaleTest, ThousandEighteenToThousandFour) {
  const ViTConfig cfg = preset("vit-mini/8");
  Rng rng(12);
  const WeightStore w = init_backbone(cfg, rng);
  const auto dir = testing::scratch_dir("scale");
  save_ppm(testing::quality_photo(0.3, rng), dir / "photo.ppm");
  std::vector<PropertyImageSet> sets(1018);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    sets[i].id = "P" + std::to_string(i);
    if (i % 73 != 0) sets[i].paths = {"photo.ppm"};
  }
  const CacheBuildResult res = build_cache(sets, w, cfg, backbone_id(cfg.name, w), dir);
  EXPECT_EQ(res.cache.size(), 1004u);
  EXPECT_EQ(res.excluded.size(), 14u);
}

}  // namespace
}  // namespace hedonic
