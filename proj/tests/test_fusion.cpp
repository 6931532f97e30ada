#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "vcap/fusion.hpp"
#include "vcap/gradcheck.hpp"
#include "vcap/synth.hpp"

using namespace vcap;

namespace {

double norm(const Var<double>& v) {
  double s = 0;
  for (double x : v.value()) s += x * x;
  return std::sqrt(s);
}

Dataset small_data(std::size_t videos = 12) {
  SynthConfig sc;
  sc.num_videos = videos;
  sc.num_val = 2;
  sc.num_concepts = 8;
  sc.temporal_dim = 8;
  sc.audio_dim = 4;
  sc.object_dim = 4;
  const auto ds = synth_generate(sc, 5);
  return make_dataset(ds.train.videos, ds.train.captions, ds.vocab);
}

TrainConfig vse_cfg() {
  TrainConfig c;
  c.embed = 8;
  c.vse_dim = 8;
  c.batch_size = 6;
  c.max_steps = 5;
  c.seed = 21;
  return c;
}

}  // namespace

TEST(EmbedVideo, HandNormalization) {
  VseModel<double> m({2, 6, 3, 2}, 0.2, 1);
  m.params().at("vse.video.W").value.data = {1, 0, 0, 1};
  std::fill(m.params().at("vse.video.b").value.data.begin(), m.params().at("vse.video.b").value.data.end(), 0.0);
  Tape<double> t(false);
  const std::vector<float> x{3, 4};
  auto e = m.embed_video(t, x);
  EXPECT_NEAR(e[0], 0.6, 1e-15);
  EXPECT_NEAR(e[1], 0.8, 1e-15);
}

TEST(EmbedVideo, UnitNormAndScaleInvariantWithZeroBias) {
  VseModel<double> m({5, 6, 3, 4}, 0.2, 2);
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> x(5);
    for (auto& xi : x) xi = nd(rng);
    Tape<double> t(false);
    EXPECT_NEAR(norm(m.embed_video(t, x)), 1.0, 1e-6);
  }
  std::fill(m.params().at("vse.video.b").value.data.begin(), m.params().at("vse.video.b").value.data.end(), 0.0);
  const std::vector<float> x{0.5f, -1, 2, 0.25f, 1}, x2{1, -2, 4, 0.5f, 2};
  Tape<double> t(false);
  auto a = m.embed_video(t, x), b = m.embed_video(t, x2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(EmbedVideo, Errors) {
  VseModel<double> m({3, 6, 3, 2}, 0.2, 4);
  Tape<double> t(false);
  const std::vector<float> wrong{1, 2}, zero{0, 0, 0};
  EXPECT_THROW(m.embed_video(t, wrong), ShapeError);
  std::fill(m.params().at("vse.video.b").value.data.begin(), m.params().at("vse.video.b").value.data.end(), 0.0);
  EXPECT_THROW(m.embed_video(t, zero), NumericalError);
  EXPECT_THROW(VseModel<double>({0, 6, 3, 2}, 0.2, 4), ValueError);
}

TEST(EmbedSentence, UnitNormDeterministicAndErrors) {
  VseModel<double> m({3, 9, 4, 5}, 0.2, 5);
  Tape<double> t(false);
  auto a = m.embed_sentence(t, {4, 5, 6}), b = m.embed_sentence(t, {4, 5, 6});
  EXPECT_NEAR(norm(a), 1.0, 1e-6);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(a[i], b[i]);
  auto c = m.embed_sentence(t, {6, 5, 4});
  EXPECT_NE(a[0], c[0]);
  EXPECT_THROW(m.embed_sentence(t, {}), ValueError);
  EXPECT_THROW(m.embed_sentence(t, {9}), ValueError);
}

TEST(VseLoss, ZeroWhenMarginsHold) {
  Tape<double> t;
  auto v1 = t.constant({2}, {1, 0}), v2 = t.constant({2}, {0, 1});
  EXPECT_EQ(vse_loss<double>({v1, v2}, {v1, v2}, 0.2).scalar(), 0.0);
  EXPECT_THROW(vse_loss<double>({v1}, {v1}, 0.2), ValueError);
  EXPECT_THROW(vse_loss<double>({v1, v2}, {v1}, 0.2), ValueError);
}

TEST(VseLoss, HandEvaluatedPairs) {
  // Unit vectors at angles chosen so the cosine table is 0.9 / 0.8.
  Tape<double> t;
  const double a = std::acos(0.9), b = std::acos(0.8);
  auto c1 = t.constant({2}, {1, 0});
  auto v1 = t.constant({2}, {std::cos(a), std::sin(a)});
  auto c2 = t.constant({2}, {std::cos(a + b), std::sin(a + b)});
  auto v2 = t.constant({2}, {std::cos(b), std::sin(b)});
  // s(v1,c1) = cos a, s(v2,c2) = cos a, s(v1,c2) = cos b, s(v2,c1) = cos b
  EXPECT_NEAR(vse_loss<double>({v1, v2}, {c1, c2}, 0.2).scalar(), 0.2, 1e-12);
}

TEST(VseLoss, GradientThroughBothTowers) {
  VseModel<double> m({6, 10, 4, 5}, 0.2, 6);
  std::mt19937_64 rng(7);
  std::normal_distribution<float> nd;
  std::vector<std::vector<float>> videos(4, std::vector<float>(6));
  for (auto& v : videos)
    for (auto& x : v) x = nd(rng);
  const std::vector<TokenSeq> sents{{4, 5}, {6, 7, 8}, {9, 4, 6}, {5}};
  // Away from the init, where the unnormalized sentence projection is short
  // and y/|y| bends too sharply for a 1e-3 step.
  testutil::randomize(m.params(), rng, 0.5);
  auto rep = grad_check(m.params(), [&](Tape<double>& t) {
    std::vector<Var<double>> vs, ss;
    for (std::size_t i = 0; i < 4; ++i) {
      vs.push_back(m.embed_video(t, videos[i]));
      ss.push_back(m.embed_sentence(t, sents[i]));
    }
    // A large margin keeps every hinge active, away from the kink.
    return vse_loss(vs, ss, 1.5);
  });
  EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst.param << "[" << rep.worst.index << "] " << rep.worst.analytic
                                     << " vs " << rep.worst.numeric;
}

TEST(Rerank, TieRulesAndErrors) {
  VseModel<float> m({6, 10, 4, 5}, 0.2, 8);
  std::mt19937_64 rng(9);
  auto v = testutil::random_video(rng, {4, 2, 3}, 3, 1);
  EXPECT_EQ(rerank(m, v, {{4, 5}}).chosen, 0u);
  EXPECT_EQ(rerank(m, v, {{4, 5}, {4, 5}, {4, 5}}).chosen, 0u);
  EXPECT_THROW(rerank(m, v, {}), ValueError);
  auto r = rerank(m, v, {{}, {6, 7}});
  EXPECT_EQ(r.similarities[0], -1.0);
  EXPECT_EQ(r.chosen, 1u);
  for (int trial = 0; trial < 5; ++trial) {
    auto rr = rerank(m, testutil::random_video(rng, {4, 2, 3}, 3, 1), {{4}, {5, 6}, {7, 8, 9}});
    for (double s : rr.similarities) {
      EXPECT_GE(s, -1.0);
      EXPECT_LE(s, 1.0);
    }
    EXPECT_EQ(rr.chosen, static_cast<std::size_t>(std::max_element(rr.similarities.begin(), rr.similarities.end()) -
                                                  rr.similarities.begin()));
  }
}

TEST(Rerank, ChoiceInvariantToFeatureScaleWithZeroBias) {
  VseModel<float> m({6, 10, 4, 5}, 0.2, 10);
  std::fill(m.params().at("vse.video.b").value.data.begin(), m.params().at("vse.video.b").value.data.end(), 0.0f);
  std::mt19937_64 rng(11);
  const std::vector<TokenSeq> cands{{4, 5}, {6, 7, 8}, {9}, {5, 5, 4}};
  for (int trial = 0; trial < 10; ++trial) {
    auto v = testutil::random_video(rng, {4, 2, 3}, 2, 0);
    auto w = v;
    for (auto& x : w.temporal.data) x *= 3.5f;
    for (auto& x : w.audio) x *= 3.5f;
    EXPECT_EQ(rerank(m, v, cands).chosen, rerank(m, w, cands).chosen);
  }
}

TEST(TrainVse, ZeroStepsDeterminismAndRoundTrip) {
  const auto d = small_data();
  auto cfg = vse_cfg();
  cfg.max_steps = 0;
  const auto init = train_vse(d, cfg);
  VseModel<float> fresh(vse_dims(d, cfg), cfg.margin, derive_seed(cfg.seed, 0));
  EXPECT_EQ(init.params, fresh.to_checkpoint(d.vocab, 0).params);
  cfg.max_steps = 5;
  const auto a = train_vse(d, cfg), b = train_vse(d, cfg);
  EXPECT_EQ(encode_checkpoint(a), encode_checkpoint(b));
  EXPECT_NE(a.params, init.params);
  auto m = VseModel<float>::from_checkpoint(a);
  EXPECT_EQ(m.to_checkpoint(d.vocab, 5).params, a.params);
  EXPECT_DOUBLE_EQ(m.margin(), 0.2);
  Checkpoint wrong = a;
  wrong.meta["kind"] = "captioner";
  EXPECT_THROW(VseModel<float>::from_checkpoint(wrong), FormatError);
}

TEST(TrainVse, LearnsRetrievalOnSmallSet) {
  const auto d = small_data();
  auto cfg = vse_cfg();
  cfg.max_steps = 300;
  cfg.lr = 5e-3;
  std::vector<TrainLog> logs;
  cfg.log_every = 100;
  auto m = VseModel<float>::from_checkpoint(train_vse(d, cfg, [&](const TrainLog& l) { logs.push_back(l); }));
  ASSERT_EQ(logs.size(), 3u);
  EXPECT_LT(logs.back().loss, logs.front().loss);
  EXPECT_GE(caption_recall_at_1(m, d), 0.75);
}

TEST(TrainVse, NeedsTwoVideos) {
  const auto d = small_data();
  Dataset one = d;
  one.videos.resize(1);
  one.refs.resize(1);
  EXPECT_THROW(train_vse(one, vse_cfg()), ValueError);
}
