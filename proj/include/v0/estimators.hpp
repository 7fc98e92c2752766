#pragma once

// Value estimators V(x, C) -> (logit, probability). Every implementation
// returns prob == sigmoid(logit).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ranges>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "v0/common.hpp"
#include "v0/core.hpp"

namespace v0 {

struct ValueEstimate {
  double logit = 0.0;
  double prob = 0.5;

  static ValueEstimate from_logit(double s) {
    if (!std::isfinite(s)) throw Error("non-finite logit");
    return ValueEstimate{s, sigmoid(s)};
  }

  // Clamps p to [eps, 1 - eps] and derives the logit; prob is recomputed from
  // the logit so the sigmoid contract holds to rounding.
  static ValueEstimate from_prob(double p) { return from_logit(v0::logit(clamp_prob(p))); }
};

// What an estimator sees of the target query.
struct QueryView {
  std::string_view id;
  std::span<const float> embedding;
};

class Estimator {
 public:
  virtual ~Estimator() = default;
  virtual ValueEstimate estimate(const QueryView& query, const CapabilityContext& ctx) const = 0;
  virtual std::string_view name() const = 0;
};

// ---------------------------------------------------------------------------
// Shortcut: the context prior, blind to the query.

inline double context_mean_label(const CapabilityContext& ctx) {
  if (ctx.empty()) throw ValidationError("empty context");
  double sum = 0.0;
  for (const auto& p : ctx.pairs) sum += p.label;
  return sum / static_cast<double>(ctx.size());
}

inline ValueEstimate shortcut_estimate(const CapabilityContext& ctx) {
  return ValueEstimate::from_prob(context_mean_label(ctx));
}

class ShortcutEstimator final : public Estimator {
 public:
  ValueEstimate estimate(const QueryView&, const CapabilityContext& ctx) const override {
    return shortcut_estimate(ctx);
  }
  std::string_view name() const override { return "shortcut"; }
};

// ---------------------------------------------------------------------------
// kNN over a FIFO window of labelled embeddings.

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ValidationError("embedding dimension mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    d += t * t;
  }
  return d;
}

// Mean label of the k Euclidean-nearest pairs among the most recent `window`
// entries of `buffer` (arrival order). Equal distances: earlier arrival wins.
template <std::ranges::random_access_range Buffer>
  requires std::same_as<std::ranges::range_value_t<Buffer>, ContextPair>
ValueEstimate knn_estimate(std::span<const float> query, const Buffer& buffer, std::size_t k = 64,
                           std::size_t window = 2048) {
  if (k == 0) throw ValidationError("knn: k must be >= 1");
  if (query.empty()) throw ValidationError("knn: query lacks an embedding");
  const std::size_t n = std::ranges::size(buffer);
  if (n == 0 || window == 0) throw ValidationError("knn: empty buffer");
  const std::size_t first = n > window ? n - window : 0;

  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(n - first);
  for (std::size_t i = first; i < n; ++i) {
    dist.emplace_back(squared_distance(query, buffer[i].embedding), i);
  }
  const std::size_t take = std::min(k, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(take), dist.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < take; ++i) sum += buffer[dist[i].second].label;
  return ValueEstimate::from_prob(sum / static_cast<double>(take));
}

inline ValueEstimate knn_estimate(std::span<const float> query, const CapabilityContext& ctx,
                                  std::size_t k = 64, std::size_t window = 2048) {
  return knn_estimate(query, ctx.pairs, k, window);
}

// Bounded first-in-first-out buffer of observed (query, label) pairs.
class FifoBuffer {
 public:
  explicit FifoBuffer(std::size_t capacity = 2048) : capacity_(capacity) {
    if (capacity == 0) throw ValidationError("FIFO capacity must be positive");
    ring_.reserve(capacity);
  }

  void push(ContextPair pair) {
    if (ring_.size() < capacity_) {
      ring_.push_back(std::move(pair));
    } else {
      ring_[head_] = std::move(pair);
      head_ = (head_ + 1) % capacity_;
    }
  }

  std::size_t size() const { return ring_.size(); }
  std::size_t capacity() const { return capacity_; }

  // i = 0 is the oldest retained entry.
  const ContextPair& operator[](std::size_t i) const { return ring_[(head_ + i) % ring_.size()]; }

  std::vector<ContextPair> snapshot() const {
    std::vector<ContextPair> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back((*this)[i]);
    return out;
  }

  ValueEstimate estimate(std::span<const float> query, std::size_t k = 64) const {
    auto view = std::views::iota(std::size_t{0}, size()) |
                std::views::transform([this](std::size_t i) -> const ContextPair& { return (*this)[i]; });
    return knn_estimate(query, view, k, capacity_);
  }

 private:
  std::size_t capacity_;
  std::size_t head_ = 0;
  std::vector<ContextPair> ring_;
};

class KnnEstimator final : public Estimator {
 public:
  explicit KnnEstimator(std::size_t k = 64, std::size_t window = 2048) : k_(k), window_(window) {}

  ValueEstimate estimate(const QueryView& query, const CapabilityContext& ctx) const override {
    return knn_estimate(query.embedding, ctx, k_, window_);
  }
  std::string_view name() const override { return "knn"; }

 private:
  std::size_t k_;
  std::size_t window_;
};

// ---------------------------------------------------------------------------
// Engineered features for the linear scorer.

inline constexpr std::size_t kProjectionDim = 16;
inline constexpr std::size_t kFeatureDim = 4 + kProjectionDim;

enum FeatureIndex : std::size_t {
  kBiasFeature = 0,
  kCtxRateFeature = 1,
  kKnnRateFeature = 2,
  kSimGapFeature = 3,
  kFirstProjectionFeature = 4,
};

using FeatureVec = std::array<double, kFeatureDim>;

struct FeatureConfig {
  std::size_t knn_k = 16;
  std::size_t knn_window = 2048;
  std::uint64_t projection_seed = 0x76305f70726f6aULL;
  double threshold = 0.5;  // binarization for the positive/negative split
};

inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ValidationError("embedding dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

// Maps (query embedding, context) to a FeatureVec. The random projection is
// fixed by (projection_seed, dim).
class FeatureExtractor {
 public:
  FeatureExtractor(FeatureConfig cfg, std::size_t dim) : cfg_(cfg), dim_(dim) {
    if (dim == 0) throw ValidationError("feature extractor: dim must be positive");
    Rng rng(hash_combine(cfg.projection_seed, dim));
    projection_.resize(kProjectionDim * dim);
    for (auto& v : projection_) v = rng.normal();
  }

  const FeatureConfig& config() const { return cfg_; }
  std::size_t dim() const { return dim_; }

  FeatureVec operator()(std::span<const float> query, const CapabilityContext& ctx) const {
    if (query.size() != dim_) {
      throw ValidationError("feature extractor: query dim " + std::to_string(query.size()) +
                            " != " + std::to_string(dim_));
    }
    if (ctx.empty()) throw ValidationError("feature extractor: empty context");
    FeatureVec f{};
    f[kBiasFeature] = 1.0;
    f[kCtxRateFeature] = context_mean_label(ctx);
    f[kKnnRateFeature] = knn_estimate(query, ctx, cfg_.knn_k, cfg_.knn_window).prob;

    double pos_sum = 0.0, neg_sum = 0.0;
    std::size_t n_pos = 0, n_neg = 0;
    for (const auto& p : ctx.pairs) {
      if (p.embedding.size() != dim_) throw ValidationError("context embedding dimension mismatch");
      const double c = cosine_similarity(query, p.embedding);
      if (binarize_reward(p.label, cfg_.threshold) == 1) {
        pos_sum += c;
        ++n_pos;
      } else {
        neg_sum += c;
        ++n_neg;
      }
    }
    f[kSimGapFeature] = (n_pos == 0 || n_neg == 0)
                            ? 0.0
                            : pos_sum / static_cast<double>(n_pos) - neg_sum / static_cast<double>(n_neg);

    for (std::size_t k = 0; k < kProjectionDim; ++k) {
      double acc = 0.0;
      const float* row = projection_.data() + k * dim_;
      for (std::size_t j = 0; j < dim_; ++j) acc += static_cast<double>(row[j]) * query[j];
      f[kFirstProjectionFeature + k] = acc;
    }
    return f;
  }

 private:
  FeatureConfig cfg_;
  std::size_t dim_;
  std::vector<float> projection_;
};

inline FeatureVec feature_vector(std::span<const float> query, const CapabilityContext& ctx,
                                 const FeatureConfig& cfg = {}) {
  return FeatureExtractor(cfg, query.size())(query, ctx);
}

// ---------------------------------------------------------------------------
// Linear scorer.

inline constexpr int kWeightsFormatVersion = 1;

struct ScorerWeights {
  std::array<double, kFeatureDim> w{};
  double alpha = 0.25;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  std::vector<double> loss_trace;

  nlohmann::json to_json() const {
    return nlohmann::json{{"format_version", kWeightsFormatVersion},
                          {"weights", w},
                          {"alpha", alpha},
                          {"learning_rate", learning_rate},
                          {"seed", seed},
                          {"loss_trace", loss_trace}};
  }

  static ScorerWeights from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("format_version")) {
      throw ValidationError("scorer weights: missing format_version");
    }
    if (j.at("format_version").get<int>() != kWeightsFormatVersion) {
      throw ValidationError("scorer weights: unsupported format_version");
    }
    const auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != kFeatureDim) {
      throw ValidationError("scorer weights: expected " + std::to_string(kFeatureDim) +
                            " weights, got " + std::to_string(w.size()));
    }
    ScorerWeights out;
    std::copy(w.begin(), w.end(), out.w.begin());
    for (double v : out.w) {
      if (!std::isfinite(v)) throw ValidationError("scorer weights: non-finite weight");
    }
    out.alpha = j.value("alpha", 0.25);
    out.learning_rate = j.value("learning_rate", 2e-4);
    out.seed = j.value("seed", std::uint64_t{0});
    out.loss_trace = j.value("loss_trace", std::vector<double>{});
    return out;
  }
};

inline double dot(const std::array<double, kFeatureDim>& w, const FeatureVec& f) {
  double s = 0.0;
  for (std::size_t i = 0; i < kFeatureDim; ++i) s += w[i] * f[i];
  return s;
}

inline ValueEstimate scorer_estimate(const ScorerWeights& weights, const FeatureVec& features) {
  return ValueEstimate::from_logit(dot(weights.w, features));
}

class ScorerEstimator final : public Estimator {
 public:
  ScorerEstimator(ScorerWeights weights, FeatureExtractor extractor)
      : weights_(std::move(weights)), extractor_(std::move(extractor)) {}

  ValueEstimate estimate(const QueryView& query, const CapabilityContext& ctx) const override {
    return scorer_estimate(weights_, extractor_(query.embedding, ctx));
  }
  std::string_view name() const override { return "scorer"; }

  const ScorerWeights& weights() const { return weights_; }

 private:
  ScorerWeights weights_;
  FeatureExtractor extractor_;
};

// Scores the query from its embedding alone (bias + projection features);
// the same query gets the same value under every context.
class PromptOnlyEstimator final : public Estimator {
 public:
  PromptOnlyEstimator(ScorerWeights weights, FeatureExtractor extractor)
      : weights_(std::move(weights)), extractor_(std::move(extractor)) {}

  ValueEstimate estimate(const QueryView& query, const CapabilityContext&) const override {
    CapabilityContext blank;
    blank.pairs.push_back(ContextPair{"", 0.0, Embedding(query.embedding.begin(), query.embedding.end())});
    FeatureVec f = extractor_(query.embedding, blank);
    f[kCtxRateFeature] = 0.0;
    f[kKnnRateFeature] = 0.0;
    f[kSimGapFeature] = 0.0;
    return scorer_estimate(weights_, f);
  }
  std::string_view name() const override { return "prompt-only"; }

 private:
  ScorerWeights weights_;
  FeatureExtractor extractor_;
};

}  // namespace v0
