#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support.hpp"

using namespace v0;
using v0::test::context_of;
using v0::test::pair_of;

namespace {

CapabilityContext labels_context(const std::vector<double>& labels) {
  std::vector<ContextPair> pairs;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pairs.push_back(pair_of("c" + std::to_string(i), labels[i], {static_cast<float>(i), 0.0f}));
  }
  return context_of(std::move(pairs));
}

// Exhaustive nearest-neighbour average: sort every index by distance with a
// stable sort so equal distances keep arrival order.
double brute_knn(std::span<const float> q, const std::vector<ContextPair>& buf, std::size_t k, std::size_t window) {
  const std::size_t first = buf.size() > window ? buf.size() - window : 0;
  std::vector<std::size_t> idx(buf.size() - first);
  std::iota(idx.begin(), idx.end(), first);
  auto dist = [&](std::size_t i) {
    double d = 0;
    for (std::size_t j = 0; j < q.size(); ++j) d += (q[j] - static_cast<double>(buf[i].embedding[j])) * (q[j] - static_cast<double>(buf[i].embedding[j]));
    return d;
  };
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
  const std::size_t take = std::min(k, idx.size());
  double s = 0;
  for (std::size_t i = 0; i < take; ++i) s += buf[idx[i]].label;
  return clamp_prob(s / static_cast<double>(take));
}

std::vector<ContextPair> random_buffer(Rng& rng, std::size_t n, std::size_t dim, bool coarse) {
  std::vector<ContextPair> buf;
  for (std::size_t i = 0; i < n; ++i) {
    Embedding e(dim);
    // Coarse grids force many exact distance ties.
    for (auto& v : e) v = coarse ? static_cast<float>(rng.below(3)) : static_cast<float>(rng.normal());
    buf.push_back(pair_of("b" + std::to_string(i), static_cast<double>(rng.below(11)) / 10.0, std::move(e)));
  }
  return buf;
}

void expect_contract(const ValueEstimate& v) {
  EXPECT_TRUE(std::isfinite(v.logit));
  EXPECT_GT(v.prob, 0.0);
  EXPECT_LT(v.prob, 1.0);
  EXPECT_NEAR(v.prob, 1.0 / (1.0 + std::exp(-v.logit)), 1e-12);
}

}  // namespace

TEST(ValueEstimate, FromLogitAndProb) {
  const auto a = ValueEstimate::from_logit(0.0);
  EXPECT_EQ(a.prob, 0.5);
  EXPECT_THROW(ValueEstimate::from_logit(std::nan("")), Error);
  EXPECT_THROW(ValueEstimate::from_logit(INFINITY), Error);
  for (double p : {0.0, 1e-9, 0.125, 0.5, 0.7, 1.0}) expect_contract(ValueEstimate::from_prob(p));
}

TEST(Shortcut, ContextMean) {
  EXPECT_NEAR(shortcut_estimate(labels_context({1, 1, 0, 0})).prob, 0.5, 1e-12);
  EXPECT_NEAR(shortcut_estimate(labels_context({1, 1, 1})).prob, 1 - 1e-6, 1e-12);
  EXPECT_NEAR(shortcut_estimate(labels_context({1, 0, 0, 0, 0, 0, 0, 0})).prob, 0.125, 1e-12);
  EXPECT_THROW(shortcut_estimate(CapabilityContext{}), ValidationError);
}

TEST(Shortcut, ConstantAcrossQueries) {
  const ShortcutEstimator est;
  const auto ctx = labels_context({0.3, 0.9, 0.1});
  const std::vector<float> q1{0, 0}, q2{5, -3};
  EXPECT_EQ(est.estimate({"a", q1}, ctx).logit, est.estimate({"b", q2}, ctx).logit);
}

TEST(Knn, NearestTwoArePositive) {
  const std::vector<float> q{0.0f};
  auto ctx = context_of({pair_of("a", 1, {0.1f}), pair_of("b", 1, {0.2f}), pair_of("c", 0, {5.0f})});
  EXPECT_NEAR(knn_estimate(q, ctx, 2).prob, 1 - 1e-6, 1e-12);
}

TEST(Knn, KExceedsBuffer) {
  std::vector<ContextPair> pairs;
  for (int i = 0; i < 10; ++i) pairs.push_back(pair_of("x" + std::to_string(i), i < 7 ? 1.0 : 0.0, {float(i)}));
  const std::vector<float> q{3.0f};
  EXPECT_NEAR(knn_estimate(q, context_of(pairs), 64).prob, 0.7, 1e-12);
}

TEST(Knn, EarlierArrivalWinsTies) {
  const std::vector<float> q{0.0f};
  // Both at distance 1: the earlier (label 0) is chosen for k = 1.
  auto ctx = context_of({pair_of("a", 0, {1.0f}), pair_of("b", 1, {-1.0f})});
  EXPECT_NEAR(knn_estimate(q, ctx, 1).prob, 1e-6, 1e-12);
  auto rev = context_of({pair_of("b", 1, {-1.0f}), pair_of("a", 0, {1.0f})});
  EXPECT_NEAR(knn_estimate(q, rev, 1).prob, 1 - 1e-6, 1e-12);
}

TEST(Knn, WindowKeepsMostRecent) {
  const std::vector<float> q{0.0f};
  // Old exact match with label 1 falls out of a window of 2.
  auto ctx = context_of({pair_of("old", 1, {0.0f}), pair_of("m", 0, {3.0f}), pair_of("n", 0, {4.0f})});
  EXPECT_NEAR(knn_estimate(q, ctx, 1, 3).prob, 1 - 1e-6, 1e-12);
  EXPECT_NEAR(knn_estimate(q, ctx, 1, 2).prob, 1e-6, 1e-12);
}

TEST(Knn, Errors) {
  const std::vector<float> q{0.0f}, q2{0.0f, 1.0f}, none;
  auto ctx = context_of({pair_of("a", 1, {0.0f})});
  EXPECT_THROW(knn_estimate(q, CapabilityContext{}), ValidationError);
  EXPECT_THROW(knn_estimate(none, ctx), ValidationError);
  EXPECT_THROW(knn_estimate(q2, ctx), ValidationError);
  EXPECT_THROW(knn_estimate(q, ctx, 0), ValidationError);
}

TEST(Knn, MatchesBruteForceOracle200) {
  Rng rng(17);
  const auto buf = random_buffer(rng, 200, 5, false);
  for (int t = 0; t < 200; ++t) {
    Embedding q(5);
    for (auto& v : q) v = static_cast<float>(rng.normal());
    EXPECT_EQ(knn_estimate(q, buf, 8).prob, ValueEstimate::from_prob(brute_knn(q, buf, 8, 2048)).prob);
  }
}

TEST(Knn, MatchesBruteForceWithTiesAndWindows) {
  Rng rng(23);
  for (int inst = 0; inst < 60; ++inst) {
    const std::size_t n = 1 + rng.below(4096);
    const bool coarse = inst % 2 == 0;
    const auto buf = random_buffer(rng, n, 3, coarse);
    const std::size_t k = 1 + rng.below(100);
    const std::size_t window = inst % 3 == 0 ? 2048 : 1 + rng.below(n + 10);
    for (int t = 0; t < 5; ++t) {
      Embedding q(3);
      for (auto& v : q) v = coarse ? static_cast<float>(rng.below(3)) : static_cast<float>(rng.normal());
      EXPECT_EQ(knn_estimate(q, buf, k, window).prob, ValueEstimate::from_prob(brute_knn(q, buf, k, window)).prob)
          << "n=" << n << " k=" << k << " window=" << window;
    }
  }
}

TEST(FifoBuffer, EvictsOldestAndMatchesSnapshot) {
  FifoBuffer fifo(4);
  EXPECT_THROW(FifoBuffer(0), ValidationError);
  for (int i = 0; i < 7; ++i) fifo.push(pair_of("x" + std::to_string(i), i % 2, {float(i)}));
  ASSERT_EQ(fifo.size(), 4u);
  EXPECT_EQ(fifo[0].query_id, "x3");
  EXPECT_EQ(fifo[3].query_id, "x6");
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const std::vector<float> q{static_cast<float>(rng.uniform(0, 8))};
    const std::size_t k = 1 + rng.below(5);
    EXPECT_EQ(fifo.estimate(q, k).prob, knn_estimate(q, fifo.snapshot(), k).prob);
  }
}

TEST(Features, AllPositiveContext) {
  auto ctx = context_of({pair_of("a", 1, {1, 0}), pair_of("b", 0.9, {0, 1})});
  const std::vector<float> q{1, 1};
  const auto f = feature_vector(q, ctx);
  EXPECT_EQ(f[kBiasFeature], 1.0);
  EXPECT_NEAR(f[kCtxRateFeature], 0.95, 1e-12);
  EXPECT_EQ(f[kSimGapFeature], 0.0);
}

TEST(Features, SimGapCosineIdentity) {
  auto ctx = context_of({pair_of("pos", 1, {1, 0}), pair_of("neg", 0, {0, 1})});
  const std::vector<float> q{1, 0};
  EXPECT_NEAR(feature_vector(q, ctx)[kSimGapFeature], 1.0, 1e-12);
}

TEST(Features, KnnRateMatchesKnnEstimate) {
  Rng rng(8);
  const auto buf = random_buffer(rng, 300, 6, false);
  const auto ctx = context_of(buf);
  FeatureConfig cfg;
  for (std::size_t k : {1u, 16u, 40u}) {
    cfg.knn_k = k;
    const Embedding q{0.1f, -0.2f, 0.3f, 0.0f, 1.0f, -1.0f};
    EXPECT_EQ(feature_vector(q, ctx, cfg)[kKnnRateFeature], knn_estimate(q, ctx, k).prob);
  }
}

TEST(Features, LengthRangesAndDeterminism) {
  static_assert(kFeatureDim == 20);
  Rng rng(2);
  const auto ctx = context_of(random_buffer(rng, 50, 4, false));
  const Embedding q{0.5f, 0.5f, -0.5f, 0.1f};
  const auto a = feature_vector(q, ctx);
  const auto b = feature_vector(q, ctx);
  EXPECT_EQ(a, b);
  for (double v : a) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(a[kCtxRateFeature], 0.0);
  EXPECT_LE(a[kCtxRateFeature], 1.0);
  EXPECT_GE(a[kKnnRateFeature], 0.0);
  EXPECT_LE(a[kKnnRateFeature], 1.0);
  FeatureConfig other;
  other.projection_seed = 99;
  EXPECT_NE(feature_vector(q, ctx, other)[kFirstProjectionFeature], a[kFirstProjectionFeature]);
}

TEST(Features, PermutationInvariantWithDistinctDistances) {
  Rng rng(4);
  auto buf = random_buffer(rng, 80, 4, false);
  const Embedding q{0.2f, 0.1f, -0.3f, 0.4f};
  const auto base = feature_vector(q, context_of(buf));
  for (int t = 0; t < 10; ++t) {
    for (std::size_t i = buf.size(); i > 1; --i) std::swap(buf[i - 1], buf[rng.below(i)]);
    const auto f = feature_vector(q, context_of(buf));
    for (std::size_t k = 0; k < kFeatureDim; ++k) EXPECT_NEAR(f[k], base[k], 1e-12) << k;
  }
}

TEST(Features, Errors) {
  auto ctx = context_of({pair_of("a", 1, {1, 0})});
  const std::vector<float> q3{1, 0, 0};
  EXPECT_THROW(FeatureExtractor({}, 2)(q3, ctx), ValidationError);
  const std::vector<float> q2{1, 0};
  EXPECT_THROW(FeatureExtractor({}, 2)(q2, CapabilityContext{}), ValidationError);
  auto bad = context_of({pair_of("a", 1, {1, 0, 0})});
  EXPECT_THROW(FeatureExtractor({}, 2)(q2, bad), ValidationError);
}

TEST(Scorer, ZeroAndBiasWeights) {
  ScorerWeights w;
  FeatureVec f{};
  f[kBiasFeature] = 1.0;
  f[kCtxRateFeature] = 0.3;
  EXPECT_EQ(scorer_estimate(w, f).logit, 0.0);
  EXPECT_EQ(scorer_estimate(w, f).prob, 0.5);
  w.w[kBiasFeature] = 1.0;
  EXPECT_EQ(scorer_estimate(w, f).logit, 1.0);
  EXPECT_NEAR(scorer_estimate(w, f).prob, 0.731059, 1e-6);
}

TEST(Scorer, DoublingWeightsDoublesLogit) {
  Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    ScorerWeights w;
    FeatureVec f{};
    for (auto& x : w.w) x = rng.normal();
    for (auto& x : f) x = rng.normal();
    ScorerWeights w2 = w;
    for (auto& x : w2.w) x *= 2;
    const auto a = scorer_estimate(w, f), b = scorer_estimate(w2, f);
    EXPECT_NEAR(b.logit, 2 * a.logit, 1e-12 * (1 + std::abs(a.logit)));
    if (a.logit > 0) { EXPECT_GT(b.prob, a.prob); }
    if (a.logit < 0) { EXPECT_LT(b.prob, a.prob); }
  }
}

TEST(Scorer, NonFiniteRejected) {
  ScorerWeights w;
  w.w[0] = std::numeric_limits<double>::max();
  w.w[1] = std::numeric_limits<double>::max();
  FeatureVec f{};
  f[0] = 10;
  f[1] = 10;
  EXPECT_THROW(scorer_estimate(w, f), Error);
}

TEST(Scorer, WeightsJsonRoundTrip) {
  ScorerWeights w;
  for (std::size_t k = 0; k < kFeatureDim; ++k) w.w[k] = 0.1 * static_cast<double>(k) - 0.7;
  w.alpha = 0.5;
  w.seed = 12;
  w.loss_trace = {0.7, 0.6};
  const auto back = ScorerWeights::from_json(nlohmann::json::parse(w.to_json().dump()));
  EXPECT_EQ(back.w, w.w);
  EXPECT_EQ(back.alpha, 0.5);
  EXPECT_EQ(back.seed, 12u);
  EXPECT_EQ(back.loss_trace, w.loss_trace);
  auto j = w.to_json();
  j["format_version"] = 2;
  EXPECT_THROW(ScorerWeights::from_json(j), ValidationError);
  j = w.to_json();
  j["weights"] = std::vector<double>(3, 0.0);
  EXPECT_THROW(ScorerWeights::from_json(j), ValidationError);
  EXPECT_THROW(ScorerWeights::from_json(nlohmann::json::object()), ValidationError);
}

TEST(Estimators, ContractHoldsForEveryImplementation) {
  Rng rng(31);
  const auto ctx = context_of(random_buffer(rng, 64, 4, false));
  ScorerWeights w;
  for (auto& x : w.w) x = rng.normal();
  const FeatureExtractor fx({}, 4);
  const ShortcutEstimator shortcut;
  const KnnEstimator knn(8);
  const ScorerEstimator scorer(w, fx);
  const PromptOnlyEstimator prompt_only(w, fx);
  for (int t = 0; t < 30; ++t) {
    Embedding q(4);
    for (auto& v : q) v = static_cast<float>(rng.normal());
    for (const Estimator* e : std::initializer_list<const Estimator*>{&shortcut, &knn, &scorer, &prompt_only}) {
      expect_contract(e->estimate({"q", q}, ctx));
    }
  }
}

TEST(PromptOnly, IgnoresContext) {
  Rng rng(12);
  ScorerWeights w;
  for (auto& x : w.w) x = rng.normal();
  const PromptOnlyEstimator est(w, FeatureExtractor({}, 4));
  const auto c1 = context_of(random_buffer(rng, 30, 4, false));
  const auto c2 = context_of(random_buffer(rng, 90, 4, false));
  const Embedding q{1, 2, 3, 4};
  EXPECT_EQ(est.estimate({"q", q}, c1).logit, est.estimate({"q", q}, c2).logit);
}
