#include <gtest/gtest.h>

#include <cmath>
#include <unordered_set>

#include "support.hpp"

using namespace v0;
using v0::test::context_of;
using v0::test::pair_of;

namespace {

FleetManifest fleet3() {
  return FleetManifest({{"small", 1.0, 1000, {}}, {"mid", 7.0, 1200, {}}, {"large", 15.0, 3000, {}}});
}

// Applies a strictly increasing transform to another estimator's logit.
class Transformed final : public Estimator {
 public:
  explicit Transformed(const Estimator& inner) : inner_(inner) {}
  ValueEstimate estimate(const QueryView& q, const CapabilityContext& c) const override {
    const double s = inner_.estimate(q, c).logit;
    return ValueEstimate::from_logit(0.5 * s * s * s + 3 * s - 1);
  }
  std::string_view name() const override { return "transformed"; }

 private:
  const Estimator& inner_;
};

class Constant final : public Estimator {
 public:
  ValueEstimate estimate(const QueryView&, const CapabilityContext&) const override {
    return ValueEstimate::from_logit(0.25);
  }
  std::string_view name() const override { return "constant"; }
};

}  // namespace

TEST(Fleet, NormalizeCosts) {
  const auto two = normalize_costs(FleetManifest({{"A", 7, 1000, {}}, {"B", 1.5, 1000, {}}}));
  EXPECT_EQ(two.at("A"), 1.0);
  EXPECT_EQ(two.at("B"), 0.0);
  EXPECT_EQ(normalize_costs(FleetManifest({{"only", 3, 10, {}}})).at("only"), 0.0);
  const auto three = normalize_costs(FleetManifest({{"a", 1, 10, {}}, {"b", 2, 10, {}}, {"c", 4, 10, {}}}));
  EXPECT_EQ(three.at("a"), 0.0);
  EXPECT_NEAR(three.at("b"), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(three.at("c"), 1.0);
}

TEST(Fleet, ValidatesEntries) {
  EXPECT_THROW(FleetManifest({{"a", 0, 10, {}}}), ValidationError);
  EXPECT_THROW(FleetManifest({{"a", 1, -1, {}}}), ValidationError);
  EXPECT_THROW(FleetManifest({{"a", 1, 1, {}}, {"a", 2, 2, {}}}), ValidationError);
  EXPECT_THROW(FleetManifest(std::vector<FleetEntry>{}), ValidationError);
  EXPECT_THROW(fleet3().at("nope"), ValidationError);
}

TEST(Fleet, JsonRoundTripAndSampleManifest) {
  FleetManifest f({{"a", 1.5, 4605, {{"q1", 100.0}}}, {"b", 7, 3000, {}}});
  const auto back = FleetManifest::from_json(nlohmann::json::parse(f.to_json().dump()));
  EXPECT_EQ(back.to_json(), f.to_json());
  EXPECT_EQ(back.at("a").raw_cost("q1"), 150.0);
  EXPECT_EQ(back.at("a").raw_cost("other"), 1.5 * 4605);
  EXPECT_THROW(FleetManifest::from_json(nlohmann::json::array()), ValidationError);
  EXPECT_THROW(FleetManifest::from_json(nlohmann::json::parse(R"({"entries":[{"policy_id":"a"}]})")), ValidationError);

  const auto sample = FleetManifest::load(std::string(V0_SOURCE_DIR) + "/data/fleet_manifest.json");
  EXPECT_GE(sample.size(), 3u);
  EXPECT_THROW(FleetManifest::load("/nonexistent/fleet.json"), IoError);
}

TEST(Fleet, UpdatesCreateNewSnapshots) {
  const FleetManifest a = fleet3();
  const FleetManifest b = a.with_entry({"huge", 30, 5000, {}});
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(b.size(), 4u);
  EXPECT_EQ(normalize_costs(a).at("large"), 1.0);
  EXPECT_LT(normalize_costs(b).at("large"), 1.0);
  const FleetManifest c = b.with_entry({"huge", 1, 1, {}});
  EXPECT_EQ(c.size(), 4u);
  EXPECT_EQ(c.at("huge").params_ratio, 1.0);
}

TEST(WeightedLabel, Arithmetic) {
  EXPECT_EQ(weighted_label(0.3, 0.8, 1.0), 0.3);
  EXPECT_NEAR(weighted_label(0.3, 0.8, 0.0), 0.2, 1e-15);
  EXPECT_NEAR(weighted_label(1.0, 0.2, 0.5), 0.9, 1e-15);
  EXPECT_THROW(weighted_label(1.2, 0.2, 0.5), ValidationError);
  EXPECT_THROW(weighted_label(0.2, 0.2, -0.1), ValidationError);
}

namespace {

struct RouterWorld {
  RolloutLog log;
  EmbeddingStore store{2};
};

RouterWorld four_pair_pool() {
  RouterWorld w;
  const std::vector<int> succ{10, 7, 3, 0};
  for (const std::string p : {"small", "mid", "large"}) {
    for (int i = 0; i < 4; ++i) w.log.add(RolloutRecord::make(p, 0, "q" + std::to_string(i), succ[i], 10));
  }
  for (int i = 0; i < 4; ++i) {
    const std::vector<float> e{static_cast<float>(i), 0.0f};
    w.store.add("q" + std::to_string(i), e);
  }
  return w;
}

}  // namespace

TEST(WeightedContext, EndpointsAndHandComputation) {
  const auto w = four_pair_pool();
  const auto fleet = fleet3();
  const auto plain = build_context(w.log, w.store, "mid", 0, 4, 1);
  const auto b1 = build_weighted_context(w.log, w.store, "mid", 1.0, fleet, 4, 1);
  ASSERT_EQ(plain.size(), b1.size());
  for (std::size_t i = 0; i < plain.size(); ++i) {
    EXPECT_EQ(plain.pairs[i].query_id, b1.pairs[i].query_id);
    EXPECT_EQ(plain.pairs[i].label, b1.pairs[i].label);
  }
  const double c_mid = normalize_costs(fleet).at("mid");
  const auto b0 = build_weighted_context(w.log, w.store, "mid", 0.0, fleet, 4, 1);
  for (const auto& p : b0.pairs) EXPECT_NEAR(p.label, 1 - c_mid, 1e-15);
  const auto bh = build_weighted_context(w.log, w.store, "mid", 0.5, fleet, 4, 1);
  // raw costs 1000, 8400, 45000 -> c_mid = 7400 / 44000.
  EXPECT_NEAR(c_mid, 7400.0 / 44000.0, 1e-15);
  const std::vector<double> rewards{1.0, 0.7, 0.3, 0.0};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(bh.pairs[i].label, 0.5 * rewards[i] + 0.5 * (1 - 7400.0 / 44000.0), 1e-15);
  }
}

TEST(WeightedContext, UsesLatestStepAndRejectsLeakage) {
  auto w = four_pair_pool();
  w.log.add(RolloutRecord::make("mid", 3, "q0", 0, 10));
  const auto ctx = build_weighted_context(w.log, w.store, "mid", 1.0, fleet3(), 4, 1);
  EXPECT_EQ(ctx.step, 3u);
  EXPECT_EQ(ctx.size(), 1u);
  EXPECT_THROW(build_weighted_context(w.log, w.store, "mid", 1.0, fleet3(), 4, 1, {"q0"}), LeakageError);
  EXPECT_NO_THROW(build_weighted_context(w.log, w.store, "mid", 1.0, fleet3(), 4, 1, {"q1"}));
  EXPECT_THROW(build_weighted_context(w.log, w.store, "ghost", 1.0, fleet3(), 4, 1), ValidationError);
}

TEST(Route, BetaZeroPicksMinCost) {
  const auto w = four_pair_pool();
  const auto fleet = fleet3();
  std::vector<CapabilityContext> ctxs;
  for (const auto& e : fleet.entries()) ctxs.push_back(build_weighted_context(w.log, w.store, e.policy_id, 0.0, fleet, 4, 2));
  const ShortcutEstimator shortcut;
  const KnnEstimator knn(2);
  for (int i = 0; i < 4; ++i) {
    const std::string q = "q" + std::to_string(i);
    EXPECT_EQ(route({q, w.store.at(q)}, ctxs, shortcut, fleet, 0.0).chosen, "small");
    EXPECT_EQ(route({q, w.store.at(q)}, ctxs, knn, fleet, 0.0).chosen, "small");
  }
}

TEST(Route, SingleCandidateAndNoCandidates) {
  const auto w = four_pair_pool();
  const auto fleet = fleet3();
  std::vector<CapabilityContext> one{build_weighted_context(w.log, w.store, "large", 0.5, fleet, 4, 2)};
  const ShortcutEstimator est;
  const auto d = route({"q0", w.store.at("q0")}, one, est, fleet, 0.5);
  EXPECT_EQ(d.chosen, "large");
  EXPECT_EQ(d.scores.size(), 1u);
  EXPECT_THROW(route({"q0", w.store.at("q0")}, std::span<const CapabilityContext>{}, est, fleet, 0.5), ValidationError);
}

TEST(Route, TiesGoToLowerCostThenId) {
  const FleetManifest fleet({{"b", 2, 10, {}}, {"a", 2, 10, {}}, {"c", 1, 10, {}}});
  std::vector<CapabilityContext> ctxs;
  for (const char* p : {"b", "a", "c"}) ctxs.push_back(context_of({pair_of("x", 0.5, {0.0f})}, p));
  const std::vector<float> q{0.0f};
  EXPECT_EQ(route({"q", q}, ctxs, Constant{}, fleet, 1.0).chosen, "c");
  ctxs.pop_back();
  EXPECT_EQ(route({"q", q}, ctxs, Constant{}, fleet, 1.0).chosen, "a");
}

TEST(Route, DominantPolicyChosenByOracle) {
  // pi with the largest capability dominates on every query.
  const auto world = gen_world(WorldConfig{.n_policies = 3, .n_queries = 100, .dim = 8, .sigma_theta = 1.0, .seed = 5});
  const auto log = simulate_log(world, 1);
  std::size_t best = 0;
  for (std::size_t c = 1; c < 3; ++c) {
    if (world.capability(c, 0) > world.capability(best, 0)) best = c;
  }
  const FleetManifest fleet({{"pi0", 1, 10, {}}, {"pi1", 2, 10, {}}, {"pi2", 3, 10, {}}});
  std::vector<CapabilityContext> ctxs;
  for (const auto& e : fleet.entries()) {
    ctxs.push_back(build_weighted_context(log, world.embeddings(), e.policy_id, 1.0, fleet, 64, 3));
  }
  const OracleEstimator oracle(world);
  for (const auto& q : world.query_ids()) {
    EXPECT_EQ(route({q, world.embeddings().at(q)}, ctxs, oracle, fleet, 1.0).chosen, world.policy_ids()[best]);
  }
}

TEST(Route, ArgmaxInvariantUnderMonotoneTransform) {
  const auto world = gen_world(WorldConfig{.n_policies = 4, .n_queries = 200, .dim = 8, .seed = 9});
  const auto log = simulate_log(world, 2);
  const FleetManifest fleet({{"pi0", 1, 10, {}}, {"pi1", 2, 10, {}}, {"pi2", 3, 10, {}}, {"pi3", 4, 10, {}}});
  std::vector<CapabilityContext> ctxs;
  for (const auto& e : fleet.entries()) {
    ctxs.push_back(build_weighted_context(log, world.embeddings(), e.policy_id, 0.6, fleet, 64, 3));
  }
  const KnnEstimator knn(8);
  const Transformed t(knn);
  for (const auto& q : world.query_ids()) {
    const QueryView v{q, world.embeddings().at(q)};
    EXPECT_EQ(route(v, ctxs, knn, fleet, 0.6).chosen, route(v, ctxs, t, fleet, 0.6).chosen);
  }
}

TEST(Route, BetaOneIgnoresCostPerturbation) {
  const auto world = gen_world(WorldConfig{.n_policies = 3, .n_queries = 100, .dim = 8, .seed = 11});
  const auto log = simulate_log(world, 2);
  const FleetManifest f1({{"pi0", 1, 10, {}}, {"pi1", 2, 10, {}}, {"pi2", 3, 10, {}}});
  const FleetManifest f2({{"pi0", 9, 700, {}}, {"pi1", 0.1, 10, {}}, {"pi2", 3, 99, {}}});
  const KnnEstimator knn(8);
  auto contexts = [&](const FleetManifest& f) {
    std::vector<CapabilityContext> out;
    for (const auto& e : f.entries()) out.push_back(build_weighted_context(log, world.embeddings(), e.policy_id, 1.0, f, 64, 3));
    return out;
  };
  const auto c1 = contexts(f1), c2 = contexts(f2);
  for (const auto& q : world.query_ids()) {
    const QueryView v{q, world.embeddings().at(q)};
    const auto d1 = route(v, c1, knn, f1, 1.0), d2 = route(v, c2, knn, f2, 1.0);
    for (std::size_t i = 0; i < d1.scores.size(); ++i) EXPECT_EQ(d1.scores[i].second.logit, d2.scores[i].second.logit);
    // Equal scores may still be split by the cost tie-break.
    bool tie = false;
    for (const auto& [pid, s] : d1.scores) {
      tie |= pid != d1.chosen && s.logit == std::find_if(d1.scores.begin(), d1.scores.end(), [&](const auto& x) { return x.first == d1.chosen; })->second.logit;
    }
    if (!tie) { EXPECT_EQ(d1.chosen, d2.chosen); }
  }
}

TEST(Route, RoutingDoesNotMutateEstimator) {
  const auto world = gen_world(WorldConfig{.n_policies = 2, .n_queries = 50, .dim = 8, .seed = 2});
  const auto log = simulate_log(world, 2);
  ScorerWeights w;
  w.w[kKnnRateFeature] = 2.0;
  const ScorerEstimator scorer(w, FeatureExtractor({}, 8));
  const FleetManifest small({{"pi0", 1, 10, {}}});
  const FleetManifest grown = small.with_entry({"pi1", 5, 10, {}});
  std::vector<CapabilityContext> ctxs;
  for (const auto& e : grown.entries()) ctxs.push_back(build_weighted_context(log, world.embeddings(), e.policy_id, 0.5, grown, 32, 1));
  for (const auto& q : world.query_ids()) route({q, world.embeddings().at(q)}, ctxs, scorer, grown, 0.5);
  EXPECT_EQ(scorer.weights().w, w.w);
}

TEST(Pareto, FilterExamplesAndProperties) {
  const std::vector<ParetoPoint> a{{0, 1, 0.9, 0}, {1, 2, 0.8, 0}};
  const auto fa = pareto_filter(a);
  ASSERT_EQ(fa.size(), 1u);
  EXPECT_EQ(fa[0].mean_cost, 1.0);
  const std::vector<ParetoPoint> b{{0, 1, 0.5, 0}, {1, 2, 0.9, 0}};
  EXPECT_EQ(pareto_filter(b).size(), 2u);

  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    std::vector<ParetoPoint> pts;
    const std::size_t n = 1 + rng.below(20);
    for (std::size_t i = 0; i < n; ++i) {
      pts.push_back({static_cast<double>(i), static_cast<double>(rng.below(6)), rng.below(6) / 5.0, 0});
    }
    const auto f = pareto_filter(pts);
    ASSERT_FALSE(f.empty());
    for (const auto& x : f) {
      for (const auto& y : f) EXPECT_FALSE(dominates(x, y));
    }
    // Every dropped point is dominated by some kept one.
    for (const auto& p : pts) {
      bool kept = false, covered = false;
      for (const auto& x : f) {
        kept |= x.beta == p.beta;
        covered |= dominates(x, p);
      }
      EXPECT_TRUE(kept || covered);
    }
    const auto ff = pareto_filter(f);
    ASSERT_EQ(ff.size(), f.size());
    for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(ff[i].beta, f[i].beta);
  }
}

TEST(Pareto, SweepErrors) {
  const auto world = gen_world(WorldConfig{.n_policies = 2, .n_queries = 40, .dim = 4, .seed = 2});
  const auto log = simulate_log(world, 1);
  const FleetManifest fleet({{"pi0", 1, 10, {}}, {"pi1", 2, 10, {}}});
  SweepInputs in;
  in.context_log = &log;
  in.truth = &log;
  in.store = &world.embeddings();
  in.eval_queries = {"q00001"};
  const KnnEstimator knn(4);
  const std::vector<double> none, betas{1.0};
  EXPECT_THROW(pareto_sweep(in, fleet, none, knn), ValidationError);
  // The evaluation query is also in the context log: leakage.
  EXPECT_THROW(pareto_sweep(in, fleet, betas, knn), LeakageError);

  RolloutLog ctx_log, truth;
  for (const auto& r : log.records()) {
    if (r.query_id == "q00001") {
      if (r.policy_id == "pi0") truth.add(r);
    } else {
      ctx_log.add(r);
    }
  }
  in.context_log = &ctx_log;
  in.truth = &truth;
  const std::vector<double> zero{0.0};
  EXPECT_NO_THROW(pareto_sweep(in, fleet, zero, knn));  // routes to pi0, which has truth
  const FleetManifest flipped({{"pi0", 9, 10, {}}, {"pi1", 1, 10, {}}});
  EXPECT_THROW(pareto_sweep(in, flipped, zero, knn), ValidationError);
}
