#pragma once

// Data model for prompts, rollout logs, embeddings, and capability contexts.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "v0/common.hpp"

namespace v0 {

using Embedding = std::vector<float>;

struct Query {
  std::string id;
  std::string text;
  std::optional<Embedding> embedding;
  std::string meta_json;  // compact serialized `meta` object, empty if absent
};

class QuerySet {
 public:
  QuerySet() = default;

  void add(Query q) {
    if (q.id.empty()) throw ValidationError("query id must be non-empty");
    if (index_.contains(q.id)) throw ValidationError("duplicate query id \"" + q.id + "\"");
    index_.emplace(q.id, queries_.size());
    queries_.push_back(std::move(q));
  }

  std::size_t size() const { return queries_.size(); }
  bool empty() const { return queries_.empty(); }
  const std::vector<Query>& queries() const { return queries_; }
  const Query& operator[](std::size_t i) const { return queries_[i]; }

  const Query* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &queries_[it->second];
  }

 private:
  std::vector<Query> queries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct RolloutRecord {
  std::string policy_id;
  std::uint64_t step = 0;
  std::string query_id;
  int successes = 0;
  int trials = 1;
  double avg_reward = 0.0;

  // Validates counts and derives avg_reward = successes / trials.
  static RolloutRecord make(std::string policy_id, std::uint64_t step, std::string query_id,
                            long long successes, long long trials) {
    if (trials <= 0) {
      throw ValidationError("rollout for query \"" + query_id + "\": trials must be >= 1");
    }
    if (successes < 0) {
      throw ValidationError("rollout for query \"" + query_id + "\": successes must be >= 0");
    }
    if (successes > trials) {
      throw ValidationError("rollout for query \"" + query_id + "\": successes (" +
                            std::to_string(successes) + ") exceed trials (" +
                            std::to_string(trials) + ")");
    }
    RolloutRecord r;
    r.policy_id = std::move(policy_id);
    r.step = step;
    r.query_id = std::move(query_id);
    r.successes = static_cast<int>(successes);
    r.trials = static_cast<int>(trials);
    r.avg_reward = static_cast<double>(successes) / static_cast<double>(trials);
    return r;
  }

  bool operator==(const RolloutRecord&) const = default;
};

// 1 iff avg_reward is strictly above the threshold; a tie is a failure.
inline int binarize_reward(double avg_reward, double threshold = 0.5) {
  return avg_reward > threshold ? 1 : 0;
}

// A (policy, step) pair identifies one checkpoint.
struct CheckpointKey {
  std::string policy_id;
  std::uint64_t step = 0;

  auto operator<=>(const CheckpointKey&) const = default;
  bool operator==(const CheckpointKey&) const = default;

  std::string str() const { return policy_id + "@" + std::to_string(step); }
};

class RolloutLog {
 public:
  RolloutLog() = default;

  // Appends a record. Throws on a duplicate (policy, step, query) key.
  void add(RolloutRecord r) {
    auto key = std::make_tuple(r.policy_id, r.step, r.query_id);
    if (keys_.contains(key)) {
      throw ValidationError("duplicate rollout record for (" + r.policy_id + ", " +
                            std::to_string(r.step) + ", " + r.query_id + ")");
    }
    const std::size_t idx = records_.size();
    keys_.emplace(std::move(key), idx);
    CheckpointKey ck{r.policy_id, r.step};
    auto [it, inserted] = by_checkpoint_.try_emplace(ck);
    if (inserted) checkpoint_order_.push_back(ck);
    it->second.push_back(idx);
    by_query_[r.query_id].push_back(idx);
    records_.push_back(std::move(r));
  }

  const std::vector<RolloutRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  // Checkpoints in order of first arrival.
  const std::vector<CheckpointKey>& checkpoints() const { return checkpoint_order_; }

  bool has_checkpoint(const CheckpointKey& key) const { return by_checkpoint_.contains(key); }

  std::span<const std::size_t> checkpoint_records(const CheckpointKey& key) const {
    auto it = by_checkpoint_.find(key);
    if (it == by_checkpoint_.end()) {
      throw ValidationError("unknown checkpoint " + key.str());
    }
    return it->second;
  }

  bool has_query(const std::string& query_id) const { return by_query_.contains(query_id); }

  std::span<const std::size_t> query_records(const std::string& query_id) const {
    auto it = by_query_.find(query_id);
    if (it == by_query_.end()) throw ValidationError("unknown query \"" + query_id + "\"");
    return it->second;
  }

  const RolloutRecord* find(const std::string& policy_id, std::uint64_t step,
                            const std::string& query_id) const {
    auto it = keys_.find(std::make_tuple(policy_id, step, query_id));
    return it == keys_.end() ? nullptr : &records_[it->second];
  }

  // Policies in order of first arrival.
  std::vector<std::string> policies() const {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& ck : checkpoint_order_) {
      if (seen.insert(ck.policy_id).second) out.push_back(ck.policy_id);
    }
    return out;
  }

  std::uint64_t latest_step(const std::string& policy_id) const {
    std::optional<std::uint64_t> best;
    for (const auto& ck : checkpoint_order_) {
      if (ck.policy_id == policy_id && (!best || ck.step > *best)) best = ck.step;
    }
    if (!best) throw ValidationError("unknown policy \"" + policy_id + "\"");
    return *best;
  }

 private:
  std::vector<RolloutRecord> records_;
  std::map<std::tuple<std::string, std::uint64_t, std::string>, std::size_t> keys_;
  std::map<CheckpointKey, std::vector<std::size_t>> by_checkpoint_;
  std::vector<CheckpointKey> checkpoint_order_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_query_;
};

// Row-major store of 32-bit embeddings, ids kept in insertion order.
class EmbeddingStore {
 public:
  explicit EmbeddingStore(std::uint32_t dim = 1) : dim_(dim) {
    if (dim == 0) throw ValidationError("embedding dim must be positive");
  }

  std::uint32_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }

  void add(std::string id, std::span<const float> row) {
    if (row.size() != dim_) {
      throw ValidationError("embedding for \"" + id + "\" has dim " + std::to_string(row.size()) +
                            ", store dim is " + std::to_string(dim_));
    }
    if (index_.contains(id)) throw ValidationError("duplicate embedding id \"" + id + "\"");
    index_.emplace(id, ids_.size());
    ids_.push_back(std::move(id));
    data_.insert(data_.end(), row.begin(), row.end());
  }

  bool contains(const std::string& id) const { return index_.contains(id); }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }

  std::optional<std::span<const float>> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return row(it->second);
  }

  std::span<const float> at(const std::string& id) const {
    auto r = find(id);
    if (!r) throw ValidationError("missing embedding for query \"" + id + "\"");
    return *r;
  }

  // Bit-exact equality of ids, order and payload.
  friend bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.data_.size() == b.data_.size() &&
           (a.data_.empty() ||
            std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
  }

 private:
  std::uint32_t dim_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<float> data_;
};

struct ContextPair {
  std::string query_id;
  double label = 0.0;  // avg@k reward, or a cost-weighted score
  Embedding embedding;
};

// A policy's explicit capability profile: sampled (query, label) pairs.
struct CapabilityContext {
  std::string policy_id;
  std::uint64_t step = 0;
  std::vector<ContextPair> pairs;
  std::uint64_t sample_seed = 0;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
  std::size_t dim() const { return pairs.empty() ? 0 : pairs.front().embedding.size(); }
};

// Seeded uniform sample of `n` distinct indices from [0, pool), returned in
// ascending order. Partial Fisher-Yates: the permutation prefix is the sample.
inline std::vector<std::size_t> sample_without_replacement(std::size_t pool, std::size_t n,
                                                           std::uint64_t seed) {
  std::vector<std::size_t> perm(pool);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  const std::size_t take = std::min(n, pool);
  Rng rng(seed);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool - i));
    std::swap(perm[i], perm[j]);
  }
  perm.resize(take);
  std::sort(perm.begin(), perm.end());
  return perm;
}

// Samples up to N pairs uniformly without replacement from the checkpoint's
// pool, keeping pool arrival order. Queries in `exclude` never enter the pool.
inline CapabilityContext build_context(const RolloutLog& log, const EmbeddingStore& store,
                                       const std::string& policy_id, std::uint64_t step,
                                       std::size_t n, std::uint64_t seed,
                                       const std::unordered_set<std::string>& exclude = {}) {
  const CheckpointKey key{policy_id, step};
  if (!log.has_checkpoint(key)) throw ValidationError("unknown checkpoint " + key.str());
  std::vector<std::size_t> pool;
  for (std::size_t idx : log.checkpoint_records(key)) {
    if (!exclude.contains(log.records()[idx].query_id)) pool.push_back(idx);
  }
  CapabilityContext ctx;
  ctx.policy_id = policy_id;
  ctx.step = step;
  ctx.sample_seed = seed;
  for (std::size_t pick : sample_without_replacement(pool.size(), n, seed)) {
    const RolloutRecord& r = log.records()[pool[pick]];
    auto emb = store.at(r.query_id);
    ctx.pairs.push_back(ContextPair{r.query_id, r.avg_reward, Embedding(emb.begin(), emb.end())});
  }
  return ctx;
}

}  // namespace v0
