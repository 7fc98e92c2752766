#pragma once

// Composite-objective training of the linear feature scorer:
//   L = alpha * mean(rank losses over intra-context pairs)
//     + (1 - alpha) * mean(soft cross-entropy over labelled queries).
// Gradients are analytic; the optimizer is AdamW.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "v0/common.hpp"
#include "v0/core.hpp"
#include "v0/estimators.hpp"
#include "v0/metrics.hpp"

namespace v0 {

using Weights = std::array<double, kFeatureDim>;

// ---------------------------------------------------------------------------
// Losses

struct RankLoss {
  double loss = 0.0;
  double grad_delta = 0.0;  // d loss / d (s_winner - s_loser)
};

// Bradley-Terry loss -log sigmoid(s_winner - s_loser). The difference is
// formed before anything else touches the scores, so a shared per-context
// offset cancels exactly.
inline RankLoss rank_loss_from_delta(double delta) { return RankLoss{softplus(-delta), sigmoid(delta) - 1.0}; }

inline RankLoss rank_loss(double s_winner, double s_loser) { return rank_loss_from_delta(s_winner - s_loser); }

// Score difference of a pair under the linear scorer, taken over the feature
// difference so that any feature constant within the context contributes an
// exact zero.
inline double pair_delta(const Weights& w, const FeatureVec& winner, const FeatureVec& loser) {
  double d = 0.0;
  for (std::size_t k = 0; k < kFeatureDim; ++k) d += w[k] * (winner[k] - loser[k]);
  return d;
}

struct CeLoss {
  double loss = 0.0;
  double grad_logit = 0.0;
};

// Soft-label cross-entropy in nats on a probability in (0, 1).
inline CeLoss soft_ce_loss(double prob, double y) {
  if (!(prob > 0.0 && prob < 1.0)) throw ValidationError("soft_ce_loss: prob must lie in (0,1)");
  return CeLoss{-(y * std::log(prob) + (1.0 - y) * std::log1p(-prob)), prob - y};
}

// Same loss evaluated from the logit without forming log(prob).
inline CeLoss soft_ce_from_logit(double logit_value, double y) {
  return CeLoss{softplus(logit_value) - y * logit_value, sigmoid(logit_value) - y};
}

// ---------------------------------------------------------------------------
// Pair sampling and balancing

struct IntraPair {
  std::size_t winner = 0;  // index of a positive item
  std::size_t loser = 0;   // index of a negative item
  bool operator==(const IntraPair&) const = default;
};

class NoPairsError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// m pairs drawn i.i.d. uniformly from positives x negatives.
inline std::vector<IntraPair> sample_intra_pairs(std::span<const double> labels, std::size_t m,
                                                 std::uint64_t seed, double threshold = 0.5) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (binarize_reward(labels[i], threshold) ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty()) throw NoPairsError("pool lacks one class; no intra-context pairs");
  Rng rng(seed);
  std::vector<IntraPair> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto w = pos[rng.below(pos.size())];
    const auto l = neg[rng.below(neg.size())];
    out.push_back({w, l});
  }
  return out;
}

// Indices of a 1:1 subsample: the majority class is cut to the minority
// count. Returned in ascending order.
inline std::vector<std::size_t> balance_queries(std::span<const double> labels, std::uint64_t seed,
                                                double threshold = 0.5) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    (binarize_reward(labels[i], threshold) ? pos : neg).push_back(i);
  }
  if (pos.empty() || neg.empty()) throw ValidationError("balance_queries: single-class pool");
  const std::size_t m = std::min(pos.size(), neg.size());
  std::vector<std::size_t> out;
  out.reserve(2 * m);
  for (std::size_t i : sample_without_replacement(pos.size(), m, hash_combine(seed, 1))) out.push_back(pos[i]);
  for (std::size_t i : sample_without_replacement(neg.size(), m, hash_combine(seed, 2))) out.push_back(neg[i]);
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Composite objective

struct ContextBatch {
  std::vector<FeatureVec> features;
  std::vector<double> soft_labels;
  std::vector<IntraPair> pairs;
};

struct CompositeTerms {
  double loss = 0.0;
  double rank = 0.0;  // mean rank loss, 0 without pairs
  double ce = 0.0;    // mean CE loss, 0 without singles
  Weights grad{};
  std::size_t n_pairs = 0;
  std::size_t n_singles = 0;
};

inline CompositeTerms composite_loss(const Weights& w, std::span<const ContextBatch> batch, double alpha) {
  CompositeTerms t;
  Weights rank_grad{}, ce_grad{};
  for (const auto& cb : batch) {
    std::vector<double> scores(cb.features.size());
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = dot(w, cb.features[i]);
    for (const auto& pr : cb.pairs) {
      const FeatureVec& fw = cb.features[pr.winner];
      const FeatureVec& fl = cb.features[pr.loser];
      const RankLoss rl = rank_loss_from_delta(pair_delta(w, fw, fl));
      t.rank += rl.loss;
      for (std::size_t k = 0; k < kFeatureDim; ++k) rank_grad[k] += rl.grad_delta * (fw[k] - fl[k]);
      ++t.n_pairs;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const CeLoss ce = soft_ce_from_logit(scores[i], cb.soft_labels[i]);
      t.ce += ce.loss;
      for (std::size_t k = 0; k < kFeatureDim; ++k) ce_grad[k] += ce.grad_logit * cb.features[i][k];
      ++t.n_singles;
    }
  }
  const double rank_scale = t.n_pairs ? alpha / static_cast<double>(t.n_pairs) : 0.0;
  const double ce_scale = t.n_singles ? (1.0 - alpha) / static_cast<double>(t.n_singles) : 0.0;
  if (t.n_pairs) t.rank /= static_cast<double>(t.n_pairs);
  if (t.n_singles) t.ce /= static_cast<double>(t.n_singles);
  t.loss = (t.n_pairs ? alpha * t.rank : 0.0) + (t.n_singles ? (1.0 - alpha) * t.ce : 0.0);
  for (std::size_t k = 0; k < kFeatureDim; ++k) t.grad[k] = rank_scale * rank_grad[k] + ce_scale * ce_grad[k];
  return t;
}

// Adam with decoupled weight decay.
struct AdamW {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  Weights m{};
  Weights v{};
  std::uint64_t t = 0;

  void step(Weights& w, const Weights& grad) {
    ++t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t k = 0; k < kFeatureDim; ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * grad[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * grad[k] * grad[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] -= learning_rate * (mhat / (std::sqrt(vhat) + epsilon) + weight_decay * w[k]);
    }
  }
};

enum class ContextResample { kPerBatch, kPerEpoch };

struct TrainConfig {
  double alpha = 0.25;
  double learning_rate = 2e-4;
  double weight_decay = 0.01;
  std::size_t context_batch = 2;
  std::size_t query_batch = 8;
  std::size_t pair_cap = 8;
  std::size_t context_size = 256;
  std::size_t epochs = 20;
  std::size_t passes_per_epoch = 1;  // visits of each checkpoint per epoch
  std::size_t patience = 5;
  bool inter_context_pairs = false;  // ablation: also pair across contexts in a batch
  ContextResample resample = ContextResample::kPerBatch;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  FeatureConfig features{};

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("train: alpha must lie in [0,1]");
    if (!(learning_rate > 0.0)) throw ValidationError("train: learning rate must be positive");
    if (context_batch == 0 || query_batch == 0 || context_size == 0 || passes_per_epoch == 0) {
      throw ValidationError("train: batch sizes and context size must be positive");
    }
  }
};

struct StepStats {
  double loss = 0.0;
  double rank = 0.0;
  double ce = 0.0;
  std::size_t n_pairs = 0;
  std::size_t n_singles = 0;
};

// One AdamW step on the composite objective. Aborts on a non-finite loss.
inline StepStats composite_step(Weights& w, std::span<const ContextBatch> batch, double alpha, AdamW& opt) {
  const CompositeTerms t = composite_loss(w, batch, alpha);
  if (!std::isfinite(t.loss)) {
    std::ostringstream os;
    os << "composite_step: non-finite loss (rank=" << t.rank << ", ce=" << t.ce << ", pairs=" << t.n_pairs
       << ", singles=" << t.n_singles << ")";
    throw Error(os.str());
  }
  for (double g : t.grad) {
    if (!std::isfinite(g)) throw Error("composite_step: non-finite gradient");
  }
  opt.step(w, t.grad);
  return StepStats{t.loss, t.rank, t.ce, t.n_pairs, t.n_singles};
}

// ---------------------------------------------------------------------------
// Dataset protocol: query ids are split into held-out test ids and the rest;
// the rest are halved into a context pool (natural label distribution) and a
// training set (balanced 1:1 per checkpoint).

struct PoolItem {
  std::string query_id;
  double label = 0.0;  // avg@k
  std::span<const float> embedding;
};

struct CheckpointData {
  CheckpointKey key;
  std::vector<PoolItem> context_pool;
  std::vector<PoolItem> train_items;  // balanced
  std::vector<PoolItem> test_items;   // natural distribution
};

struct SplitConfig {
  double test_fraction = 0.2;
  double context_fraction = 0.5;  // of the non-test ids
  std::uint64_t seed = 0;
  double threshold = 0.5;
};

struct TrainingData {
  std::vector<CheckpointData> checkpoints;
  std::size_t dim = 0;
};

inline CapabilityContext sample_context(const CheckpointData& cd, std::size_t n, std::uint64_t seed) {
  CapabilityContext ctx;
  ctx.policy_id = cd.key.policy_id;
  ctx.step = cd.key.step;
  ctx.sample_seed = seed;
  for (std::size_t i : sample_without_replacement(cd.context_pool.size(), n, seed)) {
    const PoolItem& it = cd.context_pool[i];
    ctx.pairs.push_back(ContextPair{it.query_id, it.label, Embedding(it.embedding.begin(), it.embedding.end())});
  }
  return ctx;
}

inline TrainingData make_training_data(const RolloutLog& log, const EmbeddingStore& store, const SplitConfig& cfg) {
  if (!(cfg.test_fraction >= 0.0 && cfg.test_fraction < 1.0) ||
      !(cfg.context_fraction > 0.0 && cfg.context_fraction < 1.0)) {
    throw ValidationError("split fractions out of range");
  }
  // Unique query ids in first-arrival order.
  std::vector<std::string> ids;
  {
    std::unordered_set<std::string> seen;
    for (const auto& r : log.records()) {
      if (seen.insert(r.query_id).second) ids.push_back(r.query_id);
    }
  }
  const std::size_t n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(ids.size())));
  const auto test_pick = sample_without_replacement(ids.size(), n_test, hash_combine(cfg.seed, 11));
  std::unordered_set<std::string> test_ids;
  for (std::size_t i : test_pick) test_ids.insert(ids[i]);
  std::vector<std::string> rest;
  for (const auto& id : ids) {
    if (!test_ids.contains(id)) rest.push_back(id);
  }
  const std::size_t n_ctx = static_cast<std::size_t>(std::llround(cfg.context_fraction * static_cast<double>(rest.size())));
  std::unordered_set<std::string> ctx_ids;
  for (std::size_t i : sample_without_replacement(rest.size(), n_ctx, hash_combine(cfg.seed, 12))) ctx_ids.insert(rest[i]);

  TrainingData data;
  data.dim = store.dim();
  for (const auto& ck : log.checkpoints()) {
    CheckpointData cd;
    cd.key = ck;
    std::vector<PoolItem> train_all;
    for (std::size_t idx : log.checkpoint_records(ck)) {
      const RolloutRecord& r = log.records()[idx];
      PoolItem item{r.query_id, r.avg_reward, store.at(r.query_id)};
      if (test_ids.contains(r.query_id)) {
        cd.test_items.push_back(item);
      } else if (ctx_ids.contains(r.query_id)) {
        cd.context_pool.push_back(item);
      } else {
        train_all.push_back(item);
      }
    }
    std::vector<double> labels;
    for (const auto& it : train_all) labels.push_back(it.label);
    try {
      for (std::size_t i : balance_queries(labels, hash_combine(cfg.seed, hash_string(ck.str())), cfg.threshold)) {
        cd.train_items.push_back(train_all[i]);
      }
    } catch (const ValidationError&) {
      // single-class checkpoint: nothing to train on, still usable for evaluation
    }
    data.checkpoints.push_back(std::move(cd));
  }
  return data;
}

// Evaluates an estimator on every checkpoint's test items with one context
// per checkpoint drawn from its context pool.
inline std::vector<EvalRecord> evaluate_estimator(const Estimator& est, const TrainingData& data,
                                                  std::size_t context_size, std::uint64_t seed,
                                                  double threshold = 0.5) {
  std::vector<EvalRecord> out;
  for (const auto& cd : data.checkpoints) {
    if (cd.context_pool.empty() || cd.test_items.empty()) continue;
    const auto ctx = sample_context(cd, context_size, hash_combine(seed, hash_string(cd.key.str())));
    for (const auto& it : cd.test_items) {
      const ValueEstimate v = est.estimate(QueryView{it.query_id, it.embedding}, ctx);
      out.push_back(EvalRecord{cd.key.policy_id, cd.key.step, it.query_id, v.prob, it.label,
                               binarize_reward(it.label, threshold)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TraceEntry {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double rank = 0.0;
  double ce = 0.0;
  std::optional<double> val_auc;

  nlohmann::json to_json() const {
    nlohmann::json j{{"epoch", epoch}, {"step", step}, {"loss", loss}, {"rank_loss", rank}, {"ce_loss", ce}};
    j["val_auc"] = val_auc ? nlohmann::json(*val_auc) : nlohmann::json(nullptr);
    return j;
  }
};

struct TrainedScorer {
  ScorerWeights weights;
  std::vector<TraceEntry> trace;
  double best_val_auc = 0.5;
  std::size_t best_epoch = 0;  // 0 = initial weights
  std::size_t epochs_run = 0;
};

namespace detail {

struct PreparedEval {
  std::vector<std::vector<FeatureVec>> features;  // per checkpoint
  std::vector<std::vector<const PoolItem*>> items;
  std::vector<CheckpointKey> keys;
};

inline PreparedEval prepare_eval(const TrainingData& data, const FeatureExtractor& fx, std::size_t n,
                                 std::uint64_t seed) {
  PreparedEval pe;
  for (const auto& cd : data.checkpoints) {
    if (cd.context_pool.empty() || cd.test_items.empty()) continue;
    const auto ctx = sample_context(cd, n, hash_combine(seed, hash_string(cd.key.str())));
    std::vector<FeatureVec> fs;
    std::vector<const PoolItem*> its;
    for (const auto& it : cd.test_items) {
      fs.push_back(fx(it.embedding, ctx));
      its.push_back(&it);
    }
    pe.features.push_back(std::move(fs));
    pe.items.push_back(std::move(its));
    pe.keys.push_back(cd.key);
  }
  return pe;
}

inline std::vector<EvalRecord> score_prepared(const PreparedEval& pe, const Weights& w, double threshold) {
  std::vector<EvalRecord> out;
  for (std::size_t c = 0; c < pe.keys.size(); ++c) {
    for (std::size_t i = 0; i < pe.items[c].size(); ++i) {
      const PoolItem& it = *pe.items[c][i];
      out.push_back(EvalRecord{pe.keys[c].policy_id, pe.keys[c].step, it.query_id, sigmoid(dot(w, pe.features[c][i])),
                               it.label, binarize_reward(it.label, threshold)});
    }
  }
  return out;
}

inline double safe_intra_auc(std::span<const EvalRecord> recs) {
  try {
    return intra_context_auc(recs).value;
  } catch (const ValidationError&) {
    return 0.5;
  }
}

}  // namespace detail

// Trains from zero weights; keeps the weights with the best validation
// intra-context AUC and stops after `patience` epochs without improvement.
// Validation uses the test items of `validation` (often the same data).
inline TrainedScorer train(const TrainingData& data, const TrainConfig& cfg,
                           const TrainingData* validation = nullptr,
                           const std::function<void(const TraceEntry&)>& on_trace = {}) {
  cfg.validate();
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < data.checkpoints.size(); ++i) {
    const auto& cd = data.checkpoints[i];
    if (!cd.context_pool.empty() && cd.train_items.size() >= 2) usable.push_back(i);
  }
  if (usable.empty()) throw ValidationError("train: no checkpoint has both a context pool and balanced training items");

  const FeatureExtractor fx(cfg.features, data.dim);
  const TrainingData& val = validation ? *validation : data;
  const auto prepared = detail::prepare_eval(val, fx, cfg.context_size, hash_combine(cfg.seed, 0xe7a1));

  TrainedScorer result;
  Weights w{};
  AdamW opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  auto val_auc = [&](const Weights& ww) {
    const auto recs = detail::score_prepared(prepared, ww, cfg.threshold);
    return detail::safe_intra_auc(recs);
  };

  Weights best = w;
  result.best_val_auc = val_auc(w);
  std::size_t stale = 0;
  std::size_t global_step = 0;
  Rng order_rng(hash_combine(cfg.seed, 0x0de5));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> visits;
    for (std::size_t p = 0; p < cfg.passes_per_epoch; ++p) visits.insert(visits.end(), usable.begin(), usable.end());
    for (std::size_t i = visits.size(); i > 1; --i) std::swap(visits[i - 1], visits[order_rng.below(i)]);

    TraceEntry last;
    for (std::size_t start = 0; start < visits.size(); start += cfg.context_batch) {
      const std::size_t end = std::min(visits.size(), start + cfg.context_batch);
      std::vector<ContextBatch> batch;
      for (std::size_t v = start; v < end; ++v) {
        const CheckpointData& cd = data.checkpoints[visits[v]];
        const std::uint64_t ck_hash = hash_string(cd.key.str());
        const std::uint64_t ctx_seed = cfg.resample == ContextResample::kPerBatch
                                           ? hash_combine(hash_combine(cfg.seed, global_step), hash_combine(ck_hash, v))
                                           : hash_combine(hash_combine(cfg.seed, epoch), ck_hash);
        const auto ctx = sample_context(cd, cfg.context_size, ctx_seed);
        const std::uint64_t q_seed = hash_combine(hash_combine(cfg.seed ^ 0x9b, global_step), hash_combine(ck_hash, v));
        const auto picks = sample_without_replacement(cd.train_items.size(), cfg.query_batch, q_seed);
        ContextBatch cb;
        std::vector<std::size_t> pos, neg;
        for (std::size_t pi : picks) {
          const PoolItem& it = cd.train_items[pi];
          (binarize_reward(it.label, cfg.threshold) ? pos : neg).push_back(cb.features.size());
          cb.features.push_back(fx(it.embedding, ctx));
          cb.soft_labels.push_back(it.label);
        }
        std::vector<IntraPair> all;
        for (std::size_t a : pos) {
          for (std::size_t b : neg) all.push_back({a, b});
        }
        if (all.size() > cfg.pair_cap) {
          for (std::size_t i : sample_without_replacement(all.size(), cfg.pair_cap, hash_combine(q_seed, 7))) {
            cb.pairs.push_back(all[i]);
          }
        } else {
          cb.pairs = std::move(all);
        }
        batch.push_back(std::move(cb));
      }
      if (cfg.inter_context_pairs && batch.size() >= 2) {
        // Ablation: one merged batch that also pairs items across contexts.
        ContextBatch merged;
        std::vector<std::size_t> owner;
        for (std::size_t b = 0; b < batch.size(); ++b) {
          const std::size_t offset = merged.features.size();
          for (const auto& pr : batch[b].pairs) merged.pairs.push_back({pr.winner + offset, pr.loser + offset});
          merged.features.insert(merged.features.end(), batch[b].features.begin(), batch[b].features.end());
          merged.soft_labels.insert(merged.soft_labels.end(), batch[b].soft_labels.begin(), batch[b].soft_labels.end());
          owner.insert(owner.end(), batch[b].features.size(), b);
        }
        std::vector<IntraPair> cross;
        for (std::size_t i = 0; i < owner.size(); ++i) {
          for (std::size_t j = 0; j < owner.size(); ++j) {
            if (owner[i] == owner[j]) continue;
            if (binarize_reward(merged.soft_labels[i], cfg.threshold) == 1 &&
                binarize_reward(merged.soft_labels[j], cfg.threshold) == 0) {
              cross.push_back({i, j});
            }
          }
        }
        for (std::size_t i : sample_without_replacement(cross.size(), cfg.pair_cap, hash_combine(cfg.seed, global_step))) {
          merged.pairs.push_back(cross[i]);
        }
        batch.assign(1, std::move(merged));
      }
      const StepStats st = composite_step(w, batch, cfg.alpha, opt);
      ++global_step;
      last = TraceEntry{epoch, global_step, st.loss, st.rank, st.ce, std::nullopt};
      result.weights.loss_trace.push_back(st.loss);
      if (on_trace) on_trace(last);
      result.trace.push_back(last);
    }
    const double auc_now = val_auc(w);
    result.trace.back().val_auc = auc_now;
    if (on_trace) on_trace(result.trace.back());
    result.epochs_run = epoch;
    if (auc_now > result.best_val_auc) {
      result.best_val_auc = auc_now;
      result.best_epoch = epoch;
      best = w;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
  }
  result.weights.w = best;
  result.weights.alpha = cfg.alpha;
  result.weights.learning_rate = cfg.learning_rate;
  result.weights.seed = cfg.seed;
  return result;
}

}  // namespace v0
