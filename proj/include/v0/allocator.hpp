#pragma once

// Rollout-budget allocation by expected gradient signal.
//
// With k ~ Binomial(B, p) successes in a group of B rollouts, group-normalized
// advantages are non-zero only when 0 < k < B. The signal proxy B - k summed
// over those cases has the closed form
//
//   U(B, p) = B (1 - p) [1 - (1 - p)^(B - 1)].
//
// U is not concave in B for small p, so the greedy marginal allocator is a
// heuristic; dp_allocate is the exact optimum used to measure the gap.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <string>
#include <vector>

#include "v0/common.hpp"

namespace v0 {

inline double utility(int budget, double p) {
  if (budget < 1) throw ValidationError("utility: budget must be >= 1");
  const double q = 1.0 - p;
  return static_cast<double>(budget) * q * (1.0 - std::pow(q, budget - 1));
}

inline double binomial_log_pmf(int n, int k, double p) {
  if (p <= 0.0) return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return k == n ? 0.0 : -std::numeric_limits<double>::infinity();
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
         (n - k) * std::log1p(-p);
}

// Direct sum over non-degenerate group outcomes: sum_{k=1}^{B-1} P(k) (B - k).
inline double expected_signal_bruteforce(int budget, double p) {
  if (budget < 1) throw ValidationError("expected_signal_bruteforce: budget must be >= 1");
  if (budget > 128) throw ValidationError("expected_signal_bruteforce: budget must be <= 128");
  double sum = 0.0;
  for (int k = 1; k <= budget - 1; ++k) {
    sum += std::exp(binomial_log_pmf(budget, k, p)) * static_cast<double>(budget - k);
  }
  return sum;
}

inline double marginal_utility(int budget, double p) { return utility(budget + 1, p) - utility(budget, p); }

struct Advantages {
  double pos = 0.0;      // advantage of each successful rollout
  double neg = 0.0;      // advantage of each failed rollout
  double signal = 0.0;   // sum of absolute advantages over the group
  double proxy = 0.0;    // signal scaled by pos / 2, equals B - k
  double group_mean = 0.0;
  double group_std = 0.0;  // population std of the standardized vector
};

// Standardizes a group of k ones and (B - k) zeros and reports its advantage
// statistics. Both classes must be present.
inline Advantages advantages(int budget, int k) {
  if (budget < 2 || k < 1 || k > budget - 1) {
    throw ValidationError("advantages: degenerate group (k=" + std::to_string(k) + ", B=" +
                          std::to_string(budget) + "), advantage collapses to zero");
  }
  const double b = budget;
  const double mean = static_cast<double>(k) / b;
  double var = 0.0;
  for (int i = 0; i < budget; ++i) {
    const double r = i < k ? 1.0 : 0.0;
    var += (r - mean) * (r - mean);
  }
  const double sd = std::sqrt(var / b);

  std::vector<double> adv(static_cast<std::size_t>(budget));
  for (int i = 0; i < budget; ++i) adv[static_cast<std::size_t>(i)] = ((i < k ? 1.0 : 0.0) - mean) / sd;

  Advantages a;
  a.pos = adv.front();
  a.neg = adv.back();
  for (double v : adv) {
    a.signal += std::abs(v);
    a.group_mean += v;
  }
  a.group_mean /= b;
  double sq = 0.0;
  for (double v : adv) sq += (v - a.group_mean) * (v - a.group_mean);
  a.group_std = std::sqrt(sq / b);
  a.proxy = a.signal * a.pos / 2.0;
  return a;
}

struct PromptPrediction {
  std::string prompt_id;
  double p = 0.5;
};

struct AllocationRequest {
  std::vector<PromptPrediction> prompts;
  int budget_total = 0;
  int budget_min = 2;
  int budget_max = 128;

  void validate() const {
    if (budget_min < 1) throw ValidationError("allocation: budget_min must be >= 1");
    if (budget_min > budget_max) throw ValidationError("allocation: budget_min exceeds budget_max");
    for (const auto& pr : prompts) {
      if (!(pr.p >= 0.0 && pr.p <= 1.0)) {
        throw ValidationError("allocation: p for \"" + pr.prompt_id + "\" outside [0,1]");
      }
    }
    const long long floor = static_cast<long long>(prompts.size()) * budget_min;
    if (budget_total < floor) {
      throw ValidationError("allocation infeasible: budget " + std::to_string(budget_total) + " < " +
                            std::to_string(prompts.size()) + " x " + std::to_string(budget_min));
    }
  }
};

struct AllocationPlan {
  std::vector<int> budgets;
  std::vector<double> utilities;
  double total_utility = 0.0;
  std::vector<std::size_t> trace;  // prompt index of each greedy grant

  int total_budget() const {
    int s = 0;
    for (int b : budgets) s += b;
    return s;
  }
};

inline void finalize_plan(AllocationPlan& plan, const AllocationRequest& req) {
  plan.utilities.resize(plan.budgets.size());
  plan.total_utility = 0.0;
  for (std::size_t i = 0; i < plan.budgets.size(); ++i) {
    plan.utilities[i] = utility(plan.budgets[i], req.prompts[i].p);
    plan.total_utility += plan.utilities[i];
  }
}

// Everyone starts at budget_min; single units go to the prompt with the
// largest marginal utility (lower index on ties) until the budget runs out or
// every prompt sits at budget_max.
inline AllocationPlan greedy_allocate(const AllocationRequest& req) {
  req.validate();
  const std::size_t n = req.prompts.size();
  AllocationPlan plan;
  plan.budgets.assign(n, req.budget_min);

  struct Entry {
    double gain;
    std::size_t index;
  };
  auto worse = [](const Entry& a, const Entry& b) {
    if (a.gain != b.gain) return a.gain < b.gain;
    return a.index > b.index;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  for (std::size_t i = 0; i < n; ++i) {
    if (req.budget_min < req.budget_max) heap.push({marginal_utility(req.budget_min, req.prompts[i].p), i});
  }
  long long remaining = static_cast<long long>(req.budget_total) - static_cast<long long>(n) * req.budget_min;
  while (remaining > 0 && !heap.empty()) {
    const Entry top = heap.top();
    heap.pop();
    int& b = plan.budgets[top.index];
    ++b;
    --remaining;
    plan.trace.push_back(top.index);
    if (b < req.budget_max) heap.push({marginal_utility(b, req.prompts[top.index].p), top.index});
  }
  finalize_plan(plan, req);
  return plan;
}

struct DpLimits {
  std::size_t max_cells = std::size_t{1} << 22;  // prompts x (budget_total + 1)
};

// Exact maximizer of sum U(B_i, p_i) under sum B_i <= budget_total and
// budget_min <= B_i <= budget_max. Among optimal allocations the
// lexicographically smallest is returned.
inline AllocationPlan dp_allocate(const AllocationRequest& req, DpLimits limits = {}) {
  req.validate();
  const std::size_t n = req.prompts.size();
  const int total = req.budget_total;
  const std::size_t cols = static_cast<std::size_t>(total) + 1;
  if (n * cols > limits.max_cells) {
    throw ValidationError("dp_allocate: table of " + std::to_string(n) + " x " + std::to_string(cols) +
                          " exceeds the configured limit");
  }
  constexpr double kNeg = -std::numeric_limits<double>::infinity();
  // best[i][b]: max utility for prompts i..n-1 using at most b units.
  std::vector<std::vector<double>> best(n + 1, std::vector<double>(cols, kNeg));
  std::fill(best[n].begin(), best[n].end(), 0.0);
  for (std::size_t i = n; i-- > 0;) {
    std::vector<double> u(static_cast<std::size_t>(req.budget_max) + 1, 0.0);
    for (int l = req.budget_min; l <= req.budget_max; ++l) u[static_cast<std::size_t>(l)] = utility(l, req.prompts[i].p);
    for (int b = 0; b <= total; ++b) {
      double v = kNeg;
      for (int l = req.budget_min; l <= std::min(req.budget_max, b); ++l) {
        const double rest = best[i + 1][static_cast<std::size_t>(b - l)];
        if (rest == kNeg) continue;
        v = std::max(v, u[static_cast<std::size_t>(l)] + rest);
      }
      best[i][static_cast<std::size_t>(b)] = v;
    }
  }
  AllocationPlan plan;
  plan.budgets.resize(n);
  int left = total;
  for (std::size_t i = 0; i < n; ++i) {
    const double target = best[i][static_cast<std::size_t>(left)];
    const double tol = 1e-12 * (1.0 + std::abs(target));
    int chosen = -1;
    for (int l = req.budget_min; l <= std::min(req.budget_max, left); ++l) {
      const double rest = best[i + 1][static_cast<std::size_t>(left - l)];
      if (rest == kNeg) continue;
      if (utility(l, req.prompts[i].p) + rest >= target - tol) {
        chosen = l;
        break;
      }
    }
    if (chosen < 0) throw Error("dp_allocate: reconstruction failed");
    plan.budgets[i] = chosen;
    left -= chosen;
  }
  finalize_plan(plan, req);
  return plan;
}

}  // namespace v0
