#pragma once

// Cost-aware routing across a fleet of policies. Each policy is represented
// only by a context whose labels blend its rewards with its normalized cost:
//
//   score = beta * r + (1 - beta) * (1 - c_norm)
//
// and a query goes to the policy with the highest estimated value.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "v0/common.hpp"
#include "v0/core.hpp"
#include "v0/estimators.hpp"
#include "v0/io.hpp"

namespace v0 {

struct FleetEntry {
  std::string policy_id;
  double params_ratio = 1.0;
  double avg_tokens = 1.0;
  std::map<std::string, double> query_tokens;  // optional per-query usage

  double raw_cost() const { return params_ratio * avg_tokens; }

  double raw_cost(const std::string& query_id) const {
    auto it = query_tokens.find(query_id);
    return params_ratio * (it == query_tokens.end() ? avg_tokens : it->second);
  }
};

class FleetManifest {
 public:
  FleetManifest() = default;
  explicit FleetManifest(std::vector<FleetEntry> entries) : entries_(std::move(entries)) { validate(); }

  const std::vector<FleetEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  const FleetEntry& at(const std::string& policy_id) const {
    for (const auto& e : entries_) {
      if (e.policy_id == policy_id) return e;
    }
    throw ValidationError("policy \"" + policy_id + "\" not in fleet");
  }

  // A new snapshot with one entry added or replaced.
  FleetManifest with_entry(FleetEntry e) const {
    std::vector<FleetEntry> next;
    bool replaced = false;
    for (const auto& x : entries_) {
      if (x.policy_id == e.policy_id) {
        next.push_back(e);
        replaced = true;
      } else {
        next.push_back(x);
      }
    }
    if (!replaced) next.push_back(std::move(e));
    return FleetManifest(std::move(next));
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : entries_) {
      nlohmann::json j{{"policy_id", e.policy_id}, {"params_ratio", e.params_ratio}, {"avg_tokens", e.avg_tokens}};
      if (!e.query_tokens.empty()) j["query_tokens"] = e.query_tokens;
      arr.push_back(std::move(j));
    }
    return nlohmann::json{{"entries", arr}};
  }

  static FleetManifest from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("entries") || !j["entries"].is_array()) {
      throw ValidationError("fleet manifest: expected an object with an \"entries\" array");
    }
    std::vector<FleetEntry> entries;
    try {
      for (const auto& e : j["entries"]) {
        FleetEntry fe;
        fe.policy_id = e.at("policy_id").get<std::string>();
        fe.params_ratio = e.at("params_ratio").get<double>();
        fe.avg_tokens = e.at("avg_tokens").get<double>();
        if (e.contains("query_tokens")) fe.query_tokens = e["query_tokens"].get<std::map<std::string, double>>();
        entries.push_back(std::move(fe));
      }
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError(std::string("fleet manifest: ") + ex.what());
    }
    return FleetManifest(std::move(entries));
  }

  static FleetManifest load(const std::string& path) {
    auto in = detail::open_in(path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("fleet manifest \"" + path + "\": " + e.what());
    }
    return from_json(j);
  }

 private:
  void validate() const {
    if (entries_.empty()) throw ValidationError("fleet manifest: no entries");
    std::unordered_set<std::string> seen;
    for (const auto& e : entries_) {
      if (e.policy_id.empty()) throw ValidationError("fleet manifest: empty policy_id");
      if (!seen.insert(e.policy_id).second) throw ValidationError("fleet manifest: duplicate policy \"" + e.policy_id + "\"");
      if (!(e.params_ratio > 0.0) || !(e.avg_tokens > 0.0)) {
        throw ValidationError("fleet manifest: non-positive ratio or tokens for \"" + e.policy_id + "\"");
      }
      for (const auto& [q, t] : e.query_tokens) {
        if (!(t > 0.0)) throw ValidationError("fleet manifest: non-positive tokens for query \"" + q + "\"");
      }
    }
  }

  std::vector<FleetEntry> entries_;
};

// Min-max normalized raw cost over the fleet; a single-entry fleet maps to 0.
inline std::map<std::string, double> normalize_costs(const FleetManifest& fleet) {
  if (fleet.size() == 0) throw ValidationError("normalize_costs: empty fleet");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& e : fleet.entries()) {
    lo = std::min(lo, e.raw_cost());
    hi = std::max(hi, e.raw_cost());
  }
  std::map<std::string, double> out;
  for (const auto& e : fleet.entries()) out[e.policy_id] = hi > lo ? (e.raw_cost() - lo) / (hi - lo) : 0.0;
  return out;
}

inline double weighted_label(double reward, double norm_cost, double beta) {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in01(reward) || !in01(norm_cost) || !in01(beta)) throw ValidationError("weighted_label: inputs must lie in [0,1]");
  return beta * reward + (1.0 - beta) * (1.0 - norm_cost);
}

class LeakageError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Context for the policy's latest checkpoint with labels replaced by the
// cost-weighted score. The pool must not touch the declared evaluation set.
inline CapabilityContext build_weighted_context(const RolloutLog& log, const EmbeddingStore& store,
                                                const std::string& policy_id, double beta,
                                                const FleetManifest& fleet, std::size_t n, std::uint64_t seed,
                                                const std::unordered_set<std::string>& eval_queries = {}) {
  const std::uint64_t step = log.latest_step(policy_id);
  for (std::size_t idx : log.checkpoint_records(CheckpointKey{policy_id, step})) {
    const auto& qid = log.records()[idx].query_id;
    if (eval_queries.contains(qid)) {
      throw LeakageError("evaluation query \"" + qid + "\" appears in the context pool of \"" + policy_id + "\"");
    }
  }
  const double c = normalize_costs(fleet).at(fleet.at(policy_id).policy_id);
  CapabilityContext ctx = build_context(log, store, policy_id, step, n, seed);
  for (auto& p : ctx.pairs) p.label = weighted_label(p.label, c, beta);
  return ctx;
}

struct RoutingDecision {
  std::string query_id;
  std::string chosen;
  std::vector<std::pair<std::string, ValueEstimate>> scores;
  double beta = 1.0;

  nlohmann::json to_json() const {
    nlohmann::json s = nlohmann::json::object();
    for (const auto& [pid, v] : scores) s[pid] = v.prob;
    return nlohmann::json{{"query_id", query_id}, {"chosen", chosen}, {"beta", beta}, {"scores", s}};
  }
};

// Evaluates the estimator once per candidate; ties go to the lower raw cost,
// then the lexicographically smaller id.
inline RoutingDecision route(const QueryView& query, std::span<const CapabilityContext> contexts,
                             const Estimator& estimator, const FleetManifest& fleet, double beta) {
  if (contexts.empty()) throw ValidationError("route: no candidate policies");
  RoutingDecision d;
  d.query_id = std::string(query.id);
  d.beta = beta;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    const ValueEstimate v = estimator.estimate(query, contexts[i]);
    d.scores.emplace_back(contexts[i].policy_id, v);
    if (!best) {
      best = i;
      continue;
    }
    const auto& cur = d.scores[*best];
    const double c_new = fleet.at(contexts[i].policy_id).raw_cost();
    const double c_cur = fleet.at(cur.first).raw_cost();
    if (v.logit > cur.second.logit ||
        (v.logit == cur.second.logit &&
         (c_new < c_cur || (c_new == c_cur && contexts[i].policy_id < cur.first)))) {
      best = i;
    }
  }
  d.chosen = d.scores[*best].first;
  return d;
}

struct ParetoPoint {
  double beta = 1.0;
  double mean_cost = 0.0;
  double accuracy = 0.0;     // mean binarized reward of the chosen policy
  double mean_reward = 0.0;  // mean avg@k of the chosen policy

  nlohmann::json to_json() const {
    return nlohmann::json{{"beta", beta}, {"mean_cost", mean_cost}, {"accuracy", accuracy}, {"mean_reward", mean_reward}};
  }
};

struct SweepInputs {
  const RolloutLog* context_log = nullptr;  // history used to build contexts
  const RolloutLog* truth = nullptr;        // ground truth for evaluation queries
  const EmbeddingStore* store = nullptr;
  std::vector<std::string> eval_queries;
  std::size_t context_size = 256;
  std::uint64_t seed = 0;
  double threshold = 0.5;
};

inline std::vector<CapabilityContext> build_fleet_contexts(const SweepInputs& in, const FleetManifest& fleet,
                                                           double beta) {
  const std::unordered_set<std::string> eval(in.eval_queries.begin(), in.eval_queries.end());
  std::vector<CapabilityContext> ctxs;
  for (const auto& e : fleet.entries()) {
    ctxs.push_back(build_weighted_context(*in.context_log, *in.store, e.policy_id, beta, fleet, in.context_size,
                                          hash_combine(in.seed, hash_string(e.policy_id)), eval));
  }
  return ctxs;
}

// One operating point per beta: routes every evaluation query and averages
// the chosen policy's raw cost and realized outcome.
inline std::vector<ParetoPoint> pareto_sweep(const SweepInputs& in, const FleetManifest& fleet,
                                             std::span<const double> betas, const Estimator& estimator) {
  if (betas.empty()) throw ValidationError("pareto_sweep: no beta values");
  if (in.eval_queries.empty()) throw ValidationError("pareto_sweep: no evaluation queries");
  std::vector<ParetoPoint> out;
  for (double beta : betas) {
    const auto ctxs = build_fleet_contexts(in, fleet, beta);
    ParetoPoint pt;
    pt.beta = beta;
    for (const auto& qid : in.eval_queries) {
      const auto d = route(QueryView{qid, in.store->at(qid)}, ctxs, estimator, fleet, beta);
      const auto& ctx = *std::find_if(ctxs.begin(), ctxs.end(), [&](const auto& c) { return c.policy_id == d.chosen; });
      const RolloutRecord* truth = in.truth->find(d.chosen, ctx.step, qid);
      if (!truth) {
        throw ValidationError("pareto_sweep: no ground truth for query \"" + qid + "\" under \"" + d.chosen + "\"");
      }
      pt.mean_cost += fleet.at(d.chosen).raw_cost(qid);
      pt.mean_reward += truth->avg_reward;
      pt.accuracy += binarize_reward(truth->avg_reward, in.threshold);
    }
    const double n = static_cast<double>(in.eval_queries.size());
    pt.mean_cost /= n;
    pt.mean_reward /= n;
    pt.accuracy /= n;
    out.push_back(pt);
  }
  return out;
}

inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return a.mean_cost <= b.mean_cost && a.accuracy >= b.accuracy &&
         (a.mean_cost < b.mean_cost || a.accuracy > b.accuracy);
}

// Points not dominated in (lower cost, higher accuracy), input order kept.
inline std::vector<ParetoPoint> pareto_filter(std::span<const ParetoPoint> points) {
  std::vector<ParetoPoint> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      dominated = j != i && dominates(points[j], points[i]);
    }
    if (!dominated) out.push_back(points[i]);
  }
  return out;
}

}  // namespace v0
