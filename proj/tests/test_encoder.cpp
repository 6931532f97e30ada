#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"
#include "vcap/encoder.hpp"
#include "vcap/gradcheck.hpp"

using namespace vcap;

namespace {

struct Fixture {
  ParameterStore<double> store;
  EncoderParams<double> params;

  Fixture(const FeatureDims& d, std::size_t H, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    add_encoder_params(store, d, H, true, true, rng);
    std::normal_distribution<double> nd(0, 0.3);
    for (std::size_t i = 0; i < store.size(); ++i)
      for (auto& x : store[i].value.data)
        if (store[i].name.back() == 'b') x = nd(rng);
    params = EncoderParams<double>::from(store);
  }
};

std::vector<double> vals(const Var<double>& v) { return {v.value().begin(), v.value().end()}; }

}  // namespace

TEST(Encode, IdenticalRowsPoolToThatRow) {
  VideoFeatures v;
  v.temporal = FeatureMatrix(3, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    v.temporal.at(r, 0) = 0.25f;
    v.temporal.at(r, 1) = -1.5f;
  }
  EXPECT_EQ(v.pooled_global(), (std::vector<float>{0.25f, -1.5f}));
}

TEST(Encode, IdentityGlobalProjectionIsMeanOfRows) {
  ParameterStore<double> s;
  s.add("enc.global.W", {2, 2}).value.data = {1, 0, 0, 1};
  s.add("enc.global.b", {2});
  VideoFeatures v;
  v.temporal = FeatureMatrix(2, 2);
  v.temporal.data = {1, 2, 3, 6};
  Tape<double> t;
  auto enc = encode(t, v, EncoderParams<double>::from(s));
  EXPECT_EQ(vals(enc.global), (std::vector<double>{2, 4}));
  EXPECT_FALSE(enc.temporal);
  EXPECT_FALSE(enc.objects);
}

TEST(Encode, TemporalProjectionHandArithmetic) {
  ParameterStore<double> s;
  s.add("enc.global.W", {2, 2});
  s.add("enc.global.b", {2});
  s.add("enc.temporal.W", {2, 2}).value.data = {1, 0, 0, 2};
  s.add("enc.temporal.b", {2});
  VideoFeatures v;
  v.temporal = FeatureMatrix(2, 2);
  v.temporal.data = {1, 1, 3, 5};
  Tape<double> t;
  auto enc = encode(t, v, EncoderParams<double>::from(s));
  ASSERT_TRUE(enc.temporal);
  EXPECT_EQ(enc.temporal->shape(), (Shape{2, 2}));
  EXPECT_EQ(vals(*enc.temporal), (std::vector<double>{1, 2, 3, 10}));
}

TEST(Encode, NoObjectsGivesEmptyMemory) {
  Fixture f({4, 2, 3}, 5, 1);
  std::mt19937_64 rng(2);
  auto v = testutil::random_video(rng, {4, 2, 3}, 3, 0);
  Tape<double> t;
  auto enc = encode(t, v, f.params);
  EXPECT_TRUE(enc.temporal);
  EXPECT_FALSE(enc.objects);
}

TEST(Encode, DimensionMismatchRejected) {
  Fixture f({4, 2, 3}, 5, 1);
  std::mt19937_64 rng(3);
  Tape<double> t;
  EXPECT_THROW(encode(t, testutil::random_video(rng, {5, 2, 3}, 2, 1), f.params), ShapeError);
  EXPECT_THROW(encode(t, testutil::random_video(rng, {4, 1, 3}, 2, 1), f.params), ShapeError);
  EXPECT_THROW(encode(t, testutil::random_video(rng, {4, 2, 4}, 2, 1), f.params), ShapeError);
  EXPECT_THROW(encode(t, testutil::random_video(rng, {4, 2, 3}, 0, 1), f.params), ValueError);
}

TEST(Encode, PermutingObjectsPermutesMemoryRows) {
  const FeatureDims d{4, 2, 3};
  Fixture f(d, 5, 4);
  std::mt19937_64 rng(5);
  auto v = testutil::random_video(rng, d, 2, 4);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  auto w = v;
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t c = 0; c < 3; ++c) w.objects.at(j, c) = v.objects.at(perm[j], c);
  Tape<double> t;
  auto a = encode(t, v, f.params), b = encode(t, w, f.params);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t h = 0; h < 5; ++h)
      EXPECT_EQ(b.objects->value()[j * 5 + h], a.objects->value()[perm[j] * 5 + h]);
  EXPECT_EQ(vals(a.global), vals(b.global));
}

TEST(Encode, LinearInFeaturesWithZeroBias) {
  const FeatureDims d{4, 2, 3};
  Fixture f(d, 5, 6);
  for (std::size_t i = 0; i < f.store.size(); ++i)
    if (f.store[i].name.back() == 'b') std::fill(f.store[i].value.data.begin(), f.store[i].value.data.end(), 0.0);
  std::mt19937_64 rng(7);
  auto v = testutil::random_video(rng, d, 3, 2);
  auto w = v;
  const float a = 2.5f;
  for (auto& x : w.temporal.data) x *= a;
  for (auto& x : w.audio) x *= a;
  for (auto& x : w.objects.data) x *= a;
  Tape<double> t;
  auto ev = encode(t, v, f.params), ew = encode(t, w, f.params);
  auto check = [&](const Var<double>& x, const Var<double>& y) {
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], a * x[i], 1e-5 * (1 + std::abs(x[i])));
  };
  check(ev.global, ew.global);
  check(*ev.temporal, *ew.temporal);
  check(*ev.objects, *ew.objects);
}

TEST(Encode, GradientMatchesFiniteDifferences) {
  const FeatureDims d{6, 3, 4};
  Fixture f(d, 5, 8);
  std::mt19937_64 rng(9);
  auto v = testutil::random_video(rng, d, 3, 2);
  auto rep = grad_check(f.store, [&](Tape<double>& t) {
    auto enc = encode(t, v, f.params);
    return add_n<double>({dot(enc.global, t.constant({5}, {0.4, -1, 0.3, 0.8, -0.2})),
                          sum(tanh(*enc.temporal)), sum(mul(*enc.objects, *enc.objects))});
  });
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst.param;
}
