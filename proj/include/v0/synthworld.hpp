#pragma once

// Seeded synthetic policy zoo with a Rasch-style ground truth:
//
//   P(success | policy c at step t, query x) = sigmoid(theta_{c,t} - b_x)
//
// theta_{c,0} ~ N(theta_mean, sigma_theta^2) and drifts upward with the step;
// b_x ~ N(0, sigma_b^2). Query embeddings are
//
//   e_x = normalize(eta * b_x * u + (1 - eta) * noise + a)
//
// with u a unit difficulty direction, a a unit anchor orthogonal to u and
// noise ~ N(0, I/d). The anchor keeps u . e_x strictly increasing in b_x at
// eta = 1, so difficulty is exactly recoverable there.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "v0/common.hpp"
#include "v0/core.hpp"
#include "v0/estimators.hpp"
#include "v0/metrics.hpp"
#include "v0/training.hpp"

namespace v0 {

struct WorldConfig {
  std::size_t n_policies = 8;
  std::size_t n_queries = 2000;
  std::size_t dim = 32;
  double sigma_theta = 1.0;
  double sigma_b = 1.0;
  double eta = 0.8;
  int trials = 10;
  std::size_t n_steps = 1;   // checkpoints per policy
  double step_drift = 0.0;   // mean capability gain per step
  double step_noise = 0.0;   // per-checkpoint jitter on top of the drift
  double theta_mean = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_policies == 0 || n_queries == 0 || n_steps == 0) {
      throw ValidationError("world: policy, query and step counts must be positive");
    }
    if (dim < 2) throw ValidationError("world: dim must be >= 2 (difficulty direction plus noise)");
    if (sigma_theta < 0.0 || sigma_b < 0.0 || step_noise < 0.0) {
      throw ValidationError("world: spreads must be non-negative");
    }
    if (!(eta >= 0.0 && eta <= 1.0)) throw ValidationError("world: eta must lie in [0,1]");
    if (trials < 1) throw ValidationError("world: trials must be >= 1");
  }
};

inline std::string policy_name(std::size_t i) { return "pi" + std::to_string(i); }

inline std::string query_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "q%05zu", i);
  return buf;
}

class SynthWorld {
 public:
  const WorldConfig& config() const { return cfg_; }
  std::size_t n_policies() const { return cfg_.n_policies; }
  std::size_t n_queries() const { return cfg_.n_queries; }
  std::size_t n_steps() const { return cfg_.n_steps; }

  const std::vector<std::string>& policy_ids() const { return policy_ids_; }
  const std::vector<std::string>& query_ids() const { return query_ids_; }
  const std::vector<double>& difficulties() const { return difficulty_; }
  const std::vector<double>& direction() const { return direction_; }
  const EmbeddingStore& embeddings() const { return store_; }

  double capability(std::size_t policy, std::size_t step) const { return theta_.at(policy).at(step); }
  double difficulty(std::size_t query) const { return difficulty_.at(query); }

  std::size_t policy_index(const std::string& id) const {
    auto it = policy_index_.find(id);
    if (it == policy_index_.end()) throw ValidationError("unknown policy \"" + id + "\"");
    return it->second;
  }

  std::size_t query_index(const std::string& id) const {
    auto it = query_index_.find(id);
    if (it == query_index_.end()) throw ValidationError("unknown query \"" + id + "\"");
    return it->second;
  }

  double true_logit(std::size_t policy, std::size_t step, std::size_t query) const {
    return capability(policy, step) - difficulty(query);
  }

  double true_prob(std::size_t policy, std::size_t step, std::size_t query) const {
    return sigmoid(true_logit(policy, step, query));
  }

  double true_prob(const std::string& policy, std::uint64_t step, const std::string& query) const {
    if (step >= cfg_.n_steps) throw ValidationError("unknown step " + std::to_string(step));
    return true_prob(policy_index(policy), static_cast<std::size_t>(step), query_index(query));
  }

  // Mean true success probability of a checkpoint over all queries.
  double true_mu(std::size_t policy, std::size_t step) const {
    double s = 0.0;
    for (std::size_t q = 0; q < cfg_.n_queries; ++q) s += true_prob(policy, step, q);
    return s / static_cast<double>(cfg_.n_queries);
  }

  QuerySet prompts() const {
    QuerySet set;
    for (std::size_t q = 0; q < cfg_.n_queries; ++q) {
      auto row = store_.row(q);
      set.add(Query{query_ids_[q], "synthetic query " + std::to_string(q), Embedding(row.begin(), row.end()), ""});
    }
    return set;
  }

  friend SynthWorld gen_world(const WorldConfig& cfg);

 private:
  WorldConfig cfg_;
  std::vector<std::string> policy_ids_;
  std::vector<std::string> query_ids_;
  std::unordered_map<std::string, std::size_t> policy_index_;
  std::unordered_map<std::string, std::size_t> query_index_;
  std::vector<std::vector<double>> theta_;
  std::vector<double> difficulty_;
  std::vector<double> direction_;
  EmbeddingStore store_{1};
};

inline SynthWorld gen_world(const WorldConfig& cfg) {
  cfg.validate();
  SynthWorld w;
  w.cfg_ = cfg;
  Rng rng(cfg.seed);
  const std::size_t d = cfg.dim;

  auto unit = [&](std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
  };
  std::vector<double> u(d), anchor(d);
  for (double& x : u) x = rng.normal();
  unit(u);
  for (double& x : anchor) x = rng.normal();
  double proj = 0.0;
  for (std::size_t i = 0; i < d; ++i) proj += anchor[i] * u[i];
  for (std::size_t i = 0; i < d; ++i) anchor[i] -= proj * u[i];
  unit(anchor);
  w.direction_ = u;

  for (std::size_t c = 0; c < cfg.n_policies; ++c) {
    const double base = rng.normal(cfg.theta_mean, cfg.sigma_theta);
    std::vector<double> steps(cfg.n_steps);
    for (std::size_t t = 0; t < cfg.n_steps; ++t) {
      steps[t] = base + cfg.step_drift * static_cast<double>(t) + (t > 0 ? cfg.step_noise * rng.normal() : 0.0);
    }
    w.theta_.push_back(std::move(steps));
    w.policy_ids_.push_back(policy_name(c));
    w.policy_index_.emplace(w.policy_ids_.back(), c);
  }

  w.store_ = EmbeddingStore(static_cast<std::uint32_t>(d));
  std::vector<double> e(d);
  std::vector<float> row(d);
  const double noise_sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t q = 0; q < cfg.n_queries; ++q) {
    const double b = rng.normal(0.0, cfg.sigma_b);
    w.difficulty_.push_back(b);
    for (std::size_t i = 0; i < d; ++i) {
      e[i] = cfg.eta * b * u[i] + (1.0 - cfg.eta) * noise_sd * rng.normal() + anchor[i];
    }
    unit(e);
    for (std::size_t i = 0; i < d; ++i) row[i] = static_cast<float>(e[i]);
    w.query_ids_.push_back(query_name(q));
    w.query_index_.emplace(w.query_ids_.back(), q);
    w.store_.add(w.query_ids_.back(), row);
  }
  return w;
}

// Per-cell seed so that serial and parallel generation agree.
inline std::uint64_t rollout_seed(std::uint64_t seed, const std::string& policy, std::uint64_t step,
                                  const std::string& query) {
  return hash_combine(hash_combine(hash_combine(seed, hash_string(policy)), step), hash_string(query));
}

inline RolloutRecord rollout_with_prob(const std::string& policy, std::uint64_t step, const std::string& query,
                                       double prob, int trials, std::uint64_t seed) {
  if (trials < 1) throw ValidationError("rollout: trials must be >= 1");
  Rng rng(rollout_seed(seed, policy, step, query));
  return RolloutRecord::make(policy, step, query, rng.binomial(trials, prob), trials);
}

inline RolloutRecord rollout(const SynthWorld& world, const std::string& policy, std::uint64_t step,
                             const std::string& query, int trials, std::uint64_t seed) {
  return rollout_with_prob(policy, step, query, world.true_prob(policy, step, query), trials, seed);
}

// Rollouts for every (policy, step, query) cell, policy-major.
inline RolloutLog simulate_log(const SynthWorld& world, std::uint64_t seed) {
  RolloutLog log;
  const int trials = world.config().trials;
  for (std::size_t c = 0; c < world.n_policies(); ++c) {
    for (std::size_t t = 0; t < world.n_steps(); ++t) {
      for (std::size_t q = 0; q < world.n_queries(); ++q) {
        const auto& pid = world.policy_ids()[c];
        const auto& qid = world.query_ids()[q];
        log.add(rollout_with_prob(pid, t, qid, world.true_prob(c, t, q), trials, seed));
      }
    }
  }
  return log;
}

// Expected fraction of cells whose avg@k lands strictly above the threshold,
// with every cell's logit shifted by `shift`.
inline double expected_positive_rate(const SynthWorld& world, double threshold = 0.5, double shift = 0.0) {
  const int n = world.config().trials;
  std::vector<double> log_choose(n + 1);
  for (int k = 0; k <= n; ++k) log_choose[k] = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
  double total = 0.0;
  std::size_t cells = 0;
  for (std::size_t c = 0; c < world.n_policies(); ++c) {
    for (std::size_t t = 0; t < world.n_steps(); ++t) {
      for (std::size_t q = 0; q < world.n_queries(); ++q) {
        const double s = world.true_logit(c, t, q) + shift;
        const double lp = log_sigmoid(s), lq = log_sigmoid(-s);
        double tail = 0.0;
        for (int k = 0; k <= n; ++k) {
          if (static_cast<double>(k) / n > threshold) tail += std::exp(log_choose[k] + k * lp + (n - k) * lq);
        }
        total += tail;
        ++cells;
      }
    }
  }
  return total / static_cast<double>(cells);
}

// Moves theta_mean so the world's expected positive rate equals `target`.
inline WorldConfig calibrate_theta_mean(WorldConfig cfg, double target, double threshold = 0.5) {
  if (!(target > 0.0 && target < 1.0)) throw ValidationError("calibrate: target rate must lie in (0,1)");
  const SynthWorld world = gen_world(cfg);
  double lo = -20.0, hi = 20.0;
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (expected_positive_rate(world, threshold, mid) < target ? lo : hi) = mid;
  }
  cfg.theta_mean += 0.5 * (lo + hi);
  return cfg;
}

// Ground-truth probe: returns the world's true success probability for the
// context's checkpoint.
class OracleEstimator final : public Estimator {
 public:
  explicit OracleEstimator(const SynthWorld& world) : world_(&world) {}

  ValueEstimate estimate(const QueryView& query, const CapabilityContext& ctx) const override {
    return oracle_estimate(ctx.policy_id, ctx.step, std::string(query.id));
  }

  ValueEstimate oracle_estimate(const std::string& policy, std::uint64_t step, const std::string& query) const {
    if (step >= world_->n_steps()) throw ValidationError("unknown step " + std::to_string(step));
    return ValueEstimate::from_logit(
        world_->true_logit(world_->policy_index(policy), static_cast<std::size_t>(step), world_->query_index(query)));
  }

  std::string_view name() const override { return "oracle"; }

 private:
  const SynthWorld* world_;
};

// ---------------------------------------------------------------------------
// Shortcut verification: a predictor that outputs only the checkpoint's
// empirical rate already beats the marginal entropy whenever rates differ.

struct ShortcutReport {
  double global_rate = 0.0;
  double h_y = 0.0;              // plug-in H(Y), bits
  double ce_context_only = 0.0;  // mean CE of y_hat = mu(C), bits
  double gap = 0.0;              // h_y - ce_context_only
  double mi = 0.0;               // plug-in I(Y; C)
  double var_mu = 0.0;
  std::size_t contexts = 0;
};

inline ShortcutReport verify_shortcut(const RolloutLog& log, double threshold = 0.5, double rate_tolerance = 0.05) {
  const ContextMiReport mi = plugin_mi_context(log, threshold);
  if (mi.contexts < 2 || log.policies().size() < 2) {
    throw ValidationError("world outside the shortcut regime: needs at least 2 policies");
  }
  if (!(mi.var_mu > 0.0)) throw ValidationError("world outside the shortcut regime: Var[mu(C)] = 0");
  if (std::abs(mi.global_rate - 0.5) > rate_tolerance) {
    throw ValidationError("world outside the shortcut regime: global rate " + std::to_string(mi.global_rate) +
                          " is not within 0.5 +/- " + std::to_string(rate_tolerance));
  }
  // Context-only predictor, scored record by record.
  std::unordered_map<std::string, double> mu;
  for (const auto& ck : log.checkpoints()) {
    const auto idx = log.checkpoint_records(ck);
    double pos = 0.0;
    for (std::size_t i : idx) pos += binarize_reward(log.records()[i].avg_reward, threshold);
    mu[ck.str()] = pos / static_cast<double>(idx.size());
  }
  double ce = 0.0;
  for (const auto& r : log.records()) {
    const double m = mu.at(CheckpointKey{r.policy_id, r.step}.str());
    const int y = binarize_reward(r.avg_reward, threshold);
    const double p_true = y ? m : 1.0 - m;
    ce -= p_true > 0.0 ? std::log2(p_true) : 0.0;  // p_true == 0 never occurs for an observed label
  }
  ce /= static_cast<double>(log.size());

  ShortcutReport rep;
  rep.global_rate = mi.global_rate;
  rep.h_y = mi.h_y;
  rep.ce_context_only = ce;
  rep.gap = mi.h_y - ce;
  rep.mi = mi.mi;
  rep.var_mu = mi.var_mu;
  rep.contexts = mi.contexts;
  return rep;
}

// ---------------------------------------------------------------------------
// Shift-invariance verification: a per-context offset added to raw scores
// leaves the rank-loss gradient unchanged but moves the CE gradient.

struct ScoredPair {
  FeatureVec winner{};
  FeatureVec loser{};
  std::size_t context = 0;
};

struct InvarianceReport {
  double rank_deviation = 0.0;  // max |g_biased - g| / max |g| over coordinates
  double ce_deviation = 0.0;
  double ctx_rate_rank_grad = 0.0;
  bool ctx_rate_exact_zero = false;
};

inline double max_relative_deviation(const Weights& a, const Weights& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < kFeatureDim; ++k) {
    num = std::max(num, std::abs(a[k] - b[k]));
    den = std::max(den, std::abs(a[k]));
  }
  if (num == 0.0) return 0.0;
  return den == 0.0 ? std::numeric_limits<double>::infinity() : num / den;
}

// Rank gradient over pairs; each member's raw score gets bias(context) added
// before the difference is taken.
inline Weights rank_gradient_with_bias(const Weights& w, std::span<const ScoredPair> pairs,
                                       const std::function<double(std::size_t)>& bias) {
  Weights g{};
  for (const auto& p : pairs) {
    const double b = bias ? bias(p.context) : 0.0;
    const RankLoss rl = rank_loss(dot(w, p.winner) + b, dot(w, p.loser) + b);
    for (std::size_t k = 0; k < kFeatureDim; ++k) g[k] += rl.grad_delta * (p.winner[k] - p.loser[k]);
  }
  return g;
}

// CE gradient treating winners as label 1 and losers as label 0.
inline Weights ce_gradient_with_bias(const Weights& w, std::span<const ScoredPair> pairs,
                                     const std::function<double(std::size_t)>& bias) {
  Weights g{};
  for (const auto& p : pairs) {
    const double b = bias ? bias(p.context) : 0.0;
    const double gw = soft_ce_from_logit(dot(w, p.winner) + b, 1.0).grad_logit;
    const double gl = soft_ce_from_logit(dot(w, p.loser) + b, 0.0).grad_logit;
    for (std::size_t k = 0; k < kFeatureDim; ++k) g[k] += gw * p.winner[k] + gl * p.loser[k];
  }
  return g;
}

inline InvarianceReport verify_invariance(const Weights& w, std::span<const ScoredPair> pairs,
                                          const std::function<double(std::size_t)>& bias) {
  InvarianceReport rep;
  const Weights g0 = rank_gradient_with_bias(w, pairs, {});
  const Weights g1 = rank_gradient_with_bias(w, pairs, bias);
  rep.rank_deviation = max_relative_deviation(g0, g1);
  rep.ce_deviation = max_relative_deviation(ce_gradient_with_bias(w, pairs, {}), ce_gradient_with_bias(w, pairs, bias));
  rep.ctx_rate_rank_grad = g1[kCtxRateFeature];
  rep.ctx_rate_exact_zero = g0[kCtxRateFeature] == 0.0 && g1[kCtxRateFeature] == 0.0;
  return rep;
}

}  // namespace v0
