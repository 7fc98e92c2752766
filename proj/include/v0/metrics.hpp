#pragma once

// Evaluation metrics and shortcut diagnostics.
//
// Ties get half credit everywhere (AUC and pairwise accuracy), so any
// estimator that is constant within a checkpoint scores exactly 0.5 intra-AUC
// and any estimator that ignores the context scores exactly 0.5 pairwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "v0/common.hpp"
#include "v0/core.hpp"

namespace v0 {

struct EvalRecord {
  std::string policy_id;
  std::uint64_t step = 0;
  std::string query_id;
  double prob = 0.5;
  double avg_reward = 0.0;
  int label = 0;

  CheckpointKey checkpoint() const { return {policy_id, step}; }
};

inline EvalRecord make_eval_record(const RolloutRecord& truth, double prob, double threshold = 0.5) {
  return EvalRecord{truth.policy_id, truth.step, truth.query_id, prob, truth.avg_reward,
                    binarize_reward(truth.avg_reward, threshold)};
}

// 1-based ranks with ties replaced by their mean rank.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

// Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("auc: size mismatch");
  std::size_t n_pos = 0;
  for (int l : labels) n_pos += (l != 0);
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("auc: needs both classes");
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0) rank_sum += ranks[i];
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct StepRange {
  std::uint64_t min_step = 0;
  std::uint64_t max_step = UINT64_MAX;
  bool contains(std::uint64_t s) const { return s >= min_step && s <= max_step; }
};

struct IntraAucResult {
  double value = 0.5;
  std::size_t groups_used = 0;
  std::size_t groups_skipped = 0;  // single-class checkpoints
  std::map<CheckpointKey, double> per_group;
};

// Macro average of per-checkpoint AUC over checkpoints that have both classes.
inline IntraAucResult intra_context_auc(std::span<const EvalRecord> records, StepRange range = {}) {
  std::map<CheckpointKey, std::pair<std::vector<double>, std::vector<int>>> groups;
  for (const auto& r : records) {
    if (!range.contains(r.step)) continue;
    auto& g = groups[r.checkpoint()];
    g.first.push_back(r.prob);
    g.second.push_back(r.label);
  }
  IntraAucResult out;
  double sum = 0.0;
  for (const auto& [key, g] : groups) {
    const auto n_pos = std::count_if(g.second.begin(), g.second.end(), [](int l) { return l != 0; });
    if (n_pos == 0 || static_cast<std::size_t>(n_pos) == g.second.size()) {
      ++out.groups_skipped;
      continue;
    }
    const double a = auc(g.first, g.second);
    out.per_group.emplace(key, a);
    sum += a;
    ++out.groups_used;
  }
  if (out.groups_used == 0) throw ValidationError("intra_context_auc: every checkpoint is single-class");
  out.value = sum / static_cast<double>(out.groups_used);
  return out;
}

struct PairwiseResult {
  double value = 0.5;
  std::size_t pairs = 0;
};

// Same query under two different checkpoints with opposite binarized truth:
// credit 1 if the predicted order matches, 0.5 on a tie, 0 otherwise.
inline PairwiseResult pairwise_calibration_accuracy(std::span<const EvalRecord> records,
                                                    StepRange range = {}) {
  std::unordered_map<std::string, std::vector<const EvalRecord*>> by_query;
  std::vector<std::string> order;
  for (const auto& r : records) {
    if (!range.contains(r.step)) continue;
    auto [it, inserted] = by_query.try_emplace(r.query_id);
    if (inserted) order.push_back(r.query_id);
    it->second.push_back(&r);
  }
  double credit = 0.0;
  std::size_t pairs = 0;
  for (const auto& q : order) {
    const auto& rs = by_query[q];
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        const EvalRecord* a = rs[i];
        const EvalRecord* b = rs[j];
        if (a->label == b->label || a->checkpoint() == b->checkpoint()) continue;
        const EvalRecord* hi = a->label > b->label ? a : b;
        const EvalRecord* lo = a->label > b->label ? b : a;
        if (hi->prob > lo->prob) {
          credit += 1.0;
        } else if (hi->prob == lo->prob) {
          credit += 0.5;
        }
        ++pairs;
      }
    }
  }
  if (pairs == 0) throw ValidationError("pairwise_calibration_accuracy: no eligible pairs");
  return PairwiseResult{credit / static_cast<double>(pairs), pairs};
}

inline double calibration_mse(std::span<const EvalRecord> records) {
  if (records.empty()) throw ValidationError("calibration_mse: no records");
  double sum = 0.0;
  for (const auto& r : records) {
    const double d = r.prob - r.avg_reward;
    sum += d * d;
  }
  return sum / static_cast<double>(records.size());
}

// Pearson correlation of average ranks.
inline double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("spearman: size mismatch");
  if (xs.size() < 3) throw ValidationError("spearman: needs at least 3 observations");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("spearman: zero rank variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// Mean avg_reward over a checkpoint's records.
inline double context_prior(const RolloutLog& log, const std::string& policy_id, std::uint64_t step) {
  const auto idx = log.checkpoint_records(CheckpointKey{policy_id, step});
  double sum = 0.0;
  for (std::size_t i : idx) sum += log.records()[i].avg_reward;
  return sum / static_cast<double>(idx.size());
}

// Mean avg_reward of a query across every checkpoint that attempted it.
inline double query_difficulty(const RolloutLog& log, const std::string& query_id) {
  const auto idx = log.query_records(query_id);
  double sum = 0.0;
  for (std::size_t i : idx) sum += log.records()[i].avg_reward;
  return sum / static_cast<double>(idx.size());
}

struct ResidualReport {
  double context_residual = 0.0;
  double query_residual = 0.0;
  std::size_t n = 0;
  std::map<CheckpointKey, double> context_priors;
  std::map<std::string, double> query_difficulties;
};

// Rank correlation of prediction error (prob - avg_reward) with the context
// prior and with query difficulty, both taken from `history`.
inline ResidualReport residual_report(std::span<const EvalRecord> records, const RolloutLog& history) {
  if (records.size() < 10) throw ValidationError("residual_report: needs at least 10 records");
  ResidualReport rep;
  std::vector<double> err, mu, dx;
  err.reserve(records.size());
  for (const auto& r : records) {
    auto ck = r.checkpoint();
    auto mit = rep.context_priors.find(ck);
    if (mit == rep.context_priors.end()) {
      if (!history.has_checkpoint(ck)) {
        throw ValidationError("residual_report: checkpoint " + ck.str() + " absent from history");
      }
      mit = rep.context_priors.emplace(ck, context_prior(history, r.policy_id, r.step)).first;
    }
    auto qit = rep.query_difficulties.find(r.query_id);
    if (qit == rep.query_difficulties.end()) {
      if (!history.has_query(r.query_id)) {
        throw ValidationError("residual_report: query \"" + r.query_id + "\" absent from history");
      }
      qit = rep.query_difficulties.emplace(r.query_id, query_difficulty(history, r.query_id)).first;
    }
    err.push_back(r.prob - r.avg_reward);
    mu.push_back(mit->second);
    dx.push_back(qit->second);
  }
  if (rep.context_priors.size() < 2) {
    throw ValidationError("residual_report: records must span at least 2 checkpoints");
  }
  rep.context_residual = spearman(err, mu);
  rep.query_residual = spearman(err, dx);
  rep.n = records.size();
  return rep;
}

// ---------------------------------------------------------------------------
// Information quantities (bits).

inline double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

struct ContextMiReport {
  double global_rate = 0.0;
  double h_y = 0.0;          // H(Y)
  double h_y_given_c = 0.0;  // sum_C P(C) H_b(mu(C))
  double mi = 0.0;           // I(Y; C)
  double var_mu = 0.0;       // P(C)-weighted variance of mu(C)
  std::size_t contexts = 0;
};

// Plug-in estimate with checkpoint identity as the discrete C, labels
// binarized at `threshold`.
inline ContextMiReport plugin_mi_context(const RolloutLog& log, double threshold = 0.5) {
  if (log.empty()) throw ValidationError("plugin_mi_context: empty log");
  ContextMiReport rep;
  const double total = static_cast<double>(log.size());
  double positives = 0.0;
  for (const auto& r : log.records()) positives += binarize_reward(r.avg_reward, threshold);
  rep.global_rate = positives / total;
  rep.h_y = binary_entropy(rep.global_rate);
  for (const auto& ck : log.checkpoints()) {
    const auto idx = log.checkpoint_records(ck);
    double pos = 0.0;
    for (std::size_t i : idx) pos += binarize_reward(log.records()[i].avg_reward, threshold);
    const double n = static_cast<double>(idx.size());
    const double mu = pos / n;
    rep.h_y_given_c += (n / total) * binary_entropy(mu);
    rep.var_mu += (n / total) * (mu - rep.global_rate) * (mu - rep.global_rate);
    ++rep.contexts;
  }
  rep.mi = rep.h_y - rep.h_y_given_c;
  return rep;
}

// Joint counts over (y, x, c) with small discrete alphabets.
class JointTable {
 public:
  void add(int y, int x, int c, double weight = 1.0) {
    cells_[{y, x, c}] += weight;
    total_ += weight;
  }

  double total() const { return total_; }

  // I(Y; X, C) = sum p(y,x,c) log p(y,x,c) / (p(y) p(x,c))
  double mi_y_xc() const {
    auto py = marginal([](const Key& k) { return std::make_tuple(std::get<0>(k), 0, 0); });
    auto pxc = marginal([](const Key& k) { return std::make_tuple(0, std::get<1>(k), std::get<2>(k)); });
    double mi = 0.0;
    for (const auto& [k, n] : cells_) {
      if (n <= 0.0) continue;
      const double p = n / total_;
      mi += p * std::log2(p / (py.at({std::get<0>(k), 0, 0}) * pxc.at({0, std::get<1>(k), std::get<2>(k)})));
    }
    return mi;
  }

  // I(Y; C) = sum p(y,c) log p(y,c) / (p(y) p(c))
  double mi_y_c() const {
    auto pyc = marginal([](const Key& k) { return std::make_tuple(std::get<0>(k), 0, std::get<2>(k)); });
    auto py = marginal([](const Key& k) { return std::make_tuple(std::get<0>(k), 0, 0); });
    auto pc = marginal([](const Key& k) { return std::make_tuple(0, 0, std::get<2>(k)); });
    double mi = 0.0;
    for (const auto& [k, p] : pyc) {
      if (p <= 0.0) continue;
      mi += p * std::log2(p / (py.at({std::get<0>(k), 0, 0}) * pc.at({0, 0, std::get<2>(k)})));
    }
    return mi;
  }

  // I(Y; X | C) = sum p(y,x,c) log p(y,x,c) p(c) / (p(x,c) p(y,c))
  double cmi_y_x_given_c() const {
    auto pc = marginal([](const Key& k) { return std::make_tuple(0, 0, std::get<2>(k)); });
    auto pxc = marginal([](const Key& k) { return std::make_tuple(0, std::get<1>(k), std::get<2>(k)); });
    auto pyc = marginal([](const Key& k) { return std::make_tuple(std::get<0>(k), 0, std::get<2>(k)); });
    double mi = 0.0;
    for (const auto& [k, n] : cells_) {
      if (n <= 0.0) continue;
      const auto [y, x, c] = k;
      const double p = n / total_;
      mi += p * std::log2(p * pc.at({0, 0, c}) / (pxc.at({0, x, c}) * pyc.at({y, 0, c})));
    }
    return mi;
  }

 private:
  using Key = std::tuple<int, int, int>;

  template <typename Project>
  std::map<Key, double> marginal(Project project) const {
    std::map<Key, double> out;
    for (const auto& [k, n] : cells_) out[project(k)] += n / total_;
    return out;
  }

  std::map<Key, double> cells_;
  double total_ = 0.0;
};

}  // namespace v0
