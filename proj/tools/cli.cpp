#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "v0/v0.hpp"

namespace v0::cli {
namespace {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Option registry and config layering

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string timestamp_now() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH"); sde && *sde) {
    t = static_cast<std::time_t>(std::strtoll(sde, nullptr, 10));
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Reads the first JSON object of a file: either a whole-file object or the
// first line of a JSONL file.
json read_first_object(const std::string& path) {
  auto in = detail::open_in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
  }
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      return json::parse(line);
    } catch (const json::parse_error& e) {
      throw ValidationError("config \"" + path + "\": " + e.what());
    }
  }
  throw ValidationError("config \"" + path + "\": empty file");
}

class Command {
 public:
  Command(std::string name, std::string description) : name_(std::move(name)), app_(std::move(description), "v0 " + name_) {
    app_.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app_.add_option("--config", config_path_,
                    "JSON object of option values, or an output file whose header config is reused");
  }

  template <typename T>
  CLI::Option* option(const std::string& name, T& var, const std::string& help) {
    fields_.emplace_back(name, [&var] { return json(var); });
    return app_.add_option("--" + name, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    fields_.emplace_back(name, [&var] { return json(var); });
    return app_.add_flag("--" + name, var, help);
  }

  void seed(std::uint64_t& var) {
    seed_ = &var;
    app_.add_option("--seed", var, "Global seed; falls back to $V0_SEED")->capture_default_str();
  }

  // Returns an exit code when parsing ends the run (help or usage error).
  std::optional<int> parse(const std::vector<std::string>& user_args, std::ostream& out, std::ostream& err) {
    std::vector<std::string> layered;
    try {
      if (auto path = find_config(user_args)) layered = config_args(*path);
    } catch (const IoError& e) {
      err << "error: " << e.what() << '\n';
      return 2;
    } catch (const ValidationError& e) {
      err << "error: " << e.what() << '\n';
      return 1;
    }
    if (seed_) {
      if (const char* env = std::getenv("V0_SEED"); env && *env) layered.push_back(std::string("--seed=") + env);
    }
    layered.insert(layered.end(), user_args.begin(), user_args.end());
    std::reverse(layered.begin(), layered.end());
    try {
      app_.parse(layered);
    } catch (const CLI::CallForHelp&) {
      out << app_.help();
      return 0;
    } catch (const CLI::ParseError& e) {
      err << "error: " << e.what() << "\n\n" << app_.help();
      return 1;
    }
    return std::nullopt;
  }

  json resolved_config() const {
    json cfg = json::object();
    for (const auto& [name, get] : fields_) cfg[name] = get();
    if (seed_) cfg["seed"] = *seed_;
    return cfg;
  }

  json header() const {
    const json cfg = resolved_config();
    json seeds = json::object();
    if (seed_) seeds["seed"] = *seed_;
    return json{{kHeaderKey,
                 {{"tool", "v0"},
                  {"version", kToolVersion},
                  {"subcommand", name_},
                  {"config", cfg},
                  {"config_hash", hex64(hash_string(cfg.dump()))},
                  {"seeds", seeds},
                  {"timestamp", timestamp_now()}}}};
  }

  CLI::App& app() { return app_; }

 private:
  static std::optional<std::string> find_config(const std::vector<std::string>& args) {
    std::optional<std::string> path;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    return path;
  }

  std::vector<std::string> config_args(const std::string& path) const {
    json cfg = read_first_object(path);
    if (cfg.is_object() && cfg.contains(kHeaderKey)) {
      const json& h = cfg[kHeaderKey];
      if (h.value("subcommand", name_) != name_) {
        throw ValidationError("config \"" + path + "\" was written by \"" + h.value("subcommand", "") + "\"");
      }
      cfg = h.value("config", json::object());
    }
    if (!cfg.is_object()) throw ValidationError("config \"" + path + "\": expected a JSON object");
    std::vector<std::string> args;
    for (const auto& [key, value] : cfg.items()) {
      if (key == "config") continue;
      std::string text;
      if (value.is_string()) {
        text = value.get<std::string>();
      } else if (value.is_boolean() || value.is_number()) {
        text = value.dump();
      } else {
        throw ValidationError("config \"" + path + "\": value of \"" + key + "\" must be a scalar");
      }
      args.push_back("--" + key + "=" + text);
    }
    return args;
  }

  std::string name_;
  CLI::App app_;
  std::string config_path_;
  std::uint64_t* seed_ = nullptr;
  std::vector<std::pair<std::string, std::function<json()>>> fields_;
};

void write_jsonl(const std::string& path, const json& header, const std::vector<json>& rows) {
  auto out = detail::open_out(path);
  out << header.dump() << '\n';
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw IoError("write failure on \"" + path + "\"");
}

std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> rows;
  detail::for_each_json_line(path, [&](const json& obj, std::size_t) { rows.push_back(obj); });
  return rows;
}

// ---------------------------------------------------------------------------
// Shared loaders

json eval_record_json(const EvalRecord& r) {
  return json{{"policy_id", r.policy_id}, {"step", r.step},     {"query_id", r.query_id},
              {"prob", r.prob},           {"avg_reward", r.avg_reward}, {"label", r.label}};
}

std::vector<EvalRecord> load_eval_records(const std::string& path) {
  std::vector<EvalRecord> out;
  detail::for_each_json_line(path, [&](const json& o, std::size_t) {
    EvalRecord r;
    r.policy_id = detail::require<std::string>(o, "policy_id");
    r.step = detail::require<std::uint64_t>(o, "step");
    r.query_id = detail::require<std::string>(o, "query_id");
    r.prob = detail::require<double>(o, "prob");
    r.avg_reward = detail::require<double>(o, "avg_reward");
    r.label = detail::require<int>(o, "label");
    if (!(r.prob >= 0.0 && r.prob <= 1.0) || !(r.avg_reward >= 0.0 && r.avg_reward <= 1.0)) {
      throw ValidationError("prob and avg_reward must lie in [0,1]");
    }
    out.push_back(std::move(r));
  });
  return out;
}

// True success probabilities written by `simulate`, served as an estimator.
class TableOracle final : public Estimator {
 public:
  explicit TableOracle(const std::string& path) {
    detail::for_each_json_line(path, [&](const json& o, std::size_t) {
      const CheckpointKey ck{detail::require<std::string>(o, "policy_id"), detail::require<std::uint64_t>(o, "step")};
      probs_[key(ck.policy_id, ck.step, detail::require<std::string>(o, "query_id"))] = detail::require<double>(o, "prob");
    });
  }

  ValueEstimate estimate(const QueryView& q, const CapabilityContext& ctx) const override {
    auto it = probs_.find(key(ctx.policy_id, ctx.step, std::string(q.id)));
    if (it == probs_.end()) {
      throw ValidationError("oracle table has no entry for " + ctx.policy_id + "@" + std::to_string(ctx.step) + " / " +
                            std::string(q.id));
    }
    return ValueEstimate::from_prob(it->second);
  }
  std::string_view name() const override { return "oracle"; }

 private:
  static std::string key(const std::string& p, std::uint64_t s, const std::string& q) {
    return p + '\x1f' + std::to_string(s) + '\x1f' + q;
  }
  std::unordered_map<std::string, double> probs_;
};

struct LoadedWeights {
  ScorerWeights weights;
  FeatureConfig features;
};

LoadedWeights load_weights(const std::string& path) {
  const auto rows = read_jsonl(path);
  if (rows.empty()) throw ValidationError("weights file \"" + path + "\" is empty");
  LoadedWeights lw;
  lw.weights = ScorerWeights::from_json(rows.front());
  if (rows.front().contains("features")) {
    const json& f = rows.front()["features"];
    lw.features.knn_k = f.value("knn_k", lw.features.knn_k);
    lw.features.knn_window = f.value("knn_window", lw.features.knn_window);
    lw.features.projection_seed = f.value("projection_seed", lw.features.projection_seed);
    lw.features.threshold = f.value("threshold", lw.features.threshold);
  }
  return lw;
}

struct EstimatorOptions {
  std::string kind = "knn";
  std::string weights;
  std::string truth;
  std::size_t k = 64;
  std::size_t window = 2048;

  void add_to(Command& c, bool allow_oracle) {
    std::vector<std::string> kinds{"shortcut", "knn", "scorer", "prompt-only"};
    if (allow_oracle) kinds.push_back("oracle");
    c.option("estimator", kind, "Value estimator")->check(CLI::IsMember(kinds));
    c.option("weights", weights, "Trained weights file (scorer, prompt-only)");
    if (allow_oracle) c.option("truth", truth, "True probability table from `simulate` (oracle)");
    c.option("k", k, "kNN neighbours")->check(CLI::PositiveNumber);
    c.option("window", window, "kNN FIFO window")->check(CLI::PositiveNumber);
  }

  std::unique_ptr<Estimator> make(std::size_t dim) const {
    if (kind == "shortcut") return std::make_unique<ShortcutEstimator>();
    if (kind == "knn") return std::make_unique<KnnEstimator>(k, window);
    if (kind == "oracle") {
      if (truth.empty()) throw ValidationError("--estimator oracle needs --truth");
      return std::make_unique<TableOracle>(truth);
    }
    if (weights.empty()) throw ValidationError("--estimator " + kind + " needs --weights");
    auto lw = load_weights(weights);
    FeatureExtractor fx(lw.features, dim);
    if (kind == "scorer") return std::make_unique<ScorerEstimator>(lw.weights, std::move(fx));
    return std::make_unique<PromptOnlyEstimator>(lw.weights, std::move(fx));
  }
};

std::optional<double> try_metric(const std::function<double()>& f) {
  try {
    return f();
  } catch (const ValidationError&) {
    return std::nullopt;
  }
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v, int prec = 4) { return v ? fmt(*v, prec) : "n/a"; }

std::vector<double> parse_betas(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string tok;
  while (std::getline(is, tok, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != tok.size() || !(v >= 0.0 && v <= 1.0)) {
      throw ValidationError("--betas: \"" + tok + "\" is not a number in [0,1]");
    }
    out.push_back(v);
  }
  if (out.empty()) throw ValidationError("--betas: empty list");
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_simulate(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("simulate", "Generate a synthetic policy zoo: prompts, embeddings, rollouts and true probabilities");
  WorldConfig w;
  std::string out_dir = "sim";
  c.option("policies", w.n_policies, "Number of policies")->check(CLI::PositiveNumber);
  c.option("queries", w.n_queries, "Number of queries")->check(CLI::PositiveNumber);
  c.option("dim", w.dim, "Embedding dimension");
  c.option("sigma-theta", w.sigma_theta, "Spread of policy capability");
  c.option("sigma-b", w.sigma_b, "Spread of query difficulty");
  c.option("eta", w.eta, "Difficulty signal strength in the embeddings, in [0,1]");
  c.option("trials", w.trials, "Rollouts per cell (k of avg@k)");
  c.option("steps", w.n_steps, "Checkpoints per policy");
  c.option("step-drift", w.step_drift, "Mean capability gain per checkpoint");
  c.option("step-noise", w.step_noise, "Capability jitter per checkpoint");
  c.option("theta-mean", w.theta_mean, "Mean capability");
  c.option("out-dir", out_dir, "Output directory");
  c.seed(w.seed);
  if (auto rc = c.parse(args, out, err)) return *rc;

  const SynthWorld world = gen_world(w);
  const RolloutLog log = simulate_log(world, hash_combine(w.seed, 0x5eed));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create \"" + out_dir + "\": " + ec.message());
  const auto dir = std::filesystem::path(out_dir);
  const json header = c.header();

  save_prompts(world.prompts(), (dir / "prompts.jsonl").string(), &header);
  save_rollouts(log, (dir / "rollouts.jsonl").string(), &header);
  write_embeddings(world.embeddings(), (dir / "embeddings.v0em").string());
  std::vector<json> truth;
  for (std::size_t p = 0; p < world.n_policies(); ++p) {
    for (std::size_t t = 0; t < world.n_steps(); ++t) {
      for (std::size_t q = 0; q < world.n_queries(); ++q) {
        truth.push_back(json{{"policy_id", world.policy_ids()[p]},
                             {"step", t},
                             {"query_id", world.query_ids()[q]},
                             {"prob", world.true_prob(p, t, q)}});
      }
    }
  }
  write_jsonl((dir / "truth.jsonl").string(), header, truth);
  out << "simulate: " << world.n_policies() << " policies x " << world.n_steps() << " steps x " << world.n_queries()
      << " queries -> " << log.size() << " rollout records in " << out_dir << '\n';
  return 0;
}

struct SplitOptions {
  double test_fraction = 0.2;
  double context_fraction = 0.5;
  double threshold = 0.5;

  void add_to(Command& c) {
    c.option("test-fraction", test_fraction, "Fraction of query ids held out for evaluation");
    c.option("context-fraction", context_fraction, "Fraction of remaining ids reserved for context pools");
    c.option("threshold", threshold, "Binarization threshold on avg@k (strictly above = success)");
  }
};

int cmd_train(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("train", "Train the linear value scorer with the composite ranking + calibration objective");
  std::string rollouts, embeddings, out_path, trace_path, resample = "batch";
  TrainConfig cfg;
  SplitOptions split;
  c.option("rollouts", rollouts, "Rollout log (JSONL)")->required();
  c.option("embeddings", embeddings, "Query embeddings (V0EM)")->required();
  c.option("out", out_path, "Output weights file")->required();
  c.option("trace", trace_path, "Optional per-step metrics trace (JSONL)");
  c.option("alpha", cfg.alpha, "Weight of the ranking term, in [0,1]");
  c.option("lr", cfg.learning_rate, "AdamW learning rate");
  c.option("weight-decay", cfg.weight_decay, "AdamW decoupled weight decay");
  c.option("epochs", cfg.epochs, "Maximum epochs");
  c.option("patience", cfg.patience, "Early-stopping patience in epochs");
  c.option("context-size", cfg.context_size, "Context pairs per checkpoint");
  c.option("context-batch", cfg.context_batch, "Checkpoints per optimizer step");
  c.option("query-batch", cfg.query_batch, "Queries per checkpoint per step");
  c.option("pair-cap", cfg.pair_cap, "Maximum ranking pairs per checkpoint per step");
  c.option("passes", cfg.passes_per_epoch, "Visits of each checkpoint per epoch");
  c.option("resample", resample, "Context resampling: per batch or per epoch")->check(CLI::IsMember({"batch", "epoch"}));
  c.option("knn-k", cfg.features.knn_k, "Neighbours for the knn_rate feature");
  c.flag("inter-context", cfg.inter_context_pairs, "Also rank across contexts (ablation)");
  split.add_to(c);
  c.seed(cfg.seed);
  if (auto rc = c.parse(args, out, err)) return *rc;

  cfg.threshold = split.threshold;
  cfg.features.threshold = split.threshold;
  cfg.resample = resample == "epoch" ? ContextResample::kPerEpoch : ContextResample::kPerBatch;
  const RolloutLog log = load_rollouts(rollouts);
  const EmbeddingStore store = read_embeddings(embeddings);
  const TrainingData data =
      make_training_data(log, store, SplitConfig{split.test_fraction, split.context_fraction, cfg.seed, split.threshold});
  const TrainedScorer trained = train(data, cfg);

  const json header = c.header();
  json w = trained.weights.to_json();
  w["features"] = json{{"knn_k", cfg.features.knn_k},
                       {"knn_window", cfg.features.knn_window},
                       {"projection_seed", cfg.features.projection_seed},
                       {"threshold", cfg.features.threshold}};
  w["best_val_auc"] = trained.best_val_auc;
  w["best_epoch"] = trained.best_epoch;
  w["epochs_run"] = trained.epochs_run;
  write_jsonl(out_path, header, {w});
  if (!trace_path.empty()) {
    std::vector<json> rows;
    for (const auto& t : trained.trace) rows.push_back(t.to_json());
    write_jsonl(trace_path, header, rows);
  }
  out << "train: " << trained.epochs_run << " epochs, " << trained.trace.size() << " steps, best val intra-AUC "
      << fmt(trained.best_val_auc) << " at epoch " << trained.best_epoch << '\n';
  return 0;
}

int cmd_eval(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("eval", "Score held-out queries with an estimator and report discrimination and calibration metrics");
  std::string rollouts, embeddings, out_path, report_path;
  std::size_t context_size = 256;
  std::uint64_t seed = 0;
  EstimatorOptions est;
  SplitOptions split;
  c.option("rollouts", rollouts, "Rollout log (JSONL)")->required();
  c.option("embeddings", embeddings, "Query embeddings (V0EM)")->required();
  c.option("out", out_path, "Output predictions (JSONL)")->required();
  c.option("report", report_path, "Optional metrics report (JSONL)");
  c.option("context-size", context_size, "Context pairs per checkpoint")->check(CLI::PositiveNumber);
  est.add_to(c, true);
  split.add_to(c);
  c.seed(seed);
  if (auto rc = c.parse(args, out, err)) return *rc;

  const RolloutLog log = load_rollouts(rollouts);
  const EmbeddingStore store = read_embeddings(embeddings);
  const TrainingData data =
      make_training_data(log, store, SplitConfig{split.test_fraction, split.context_fraction, seed, split.threshold});
  const auto estimator = est.make(store.dim());
  const auto records = evaluate_estimator(*estimator, data, context_size, hash_combine(seed, 0xe7a1), split.threshold);
  if (records.empty()) throw ValidationError("eval: no held-out records to score");

  const auto intra = try_metric([&] { return intra_context_auc(records).value; });
  const auto pairwise = try_metric([&] { return pairwise_calibration_accuracy(records).value; });
  const double mse = calibration_mse(records);
  const json header = c.header();
  std::vector<json> rows;
  for (const auto& r : records) rows.push_back(eval_record_json(r));
  write_jsonl(out_path, header, rows);
  if (!report_path.empty()) {
    write_jsonl(report_path, header,
                {json{{"estimator", est.kind},
                      {"n", records.size()},
                      {"intra_auc", opt_json(intra)},
                      {"pairwise_accuracy", opt_json(pairwise)},
                      {"calibration_mse", mse}}});
  }
  out << "eval (" << est.kind << "): n=" << records.size() << " intra-AUC=" << fmt(intra)
      << " pairwise=" << fmt(pairwise) << " mse=" << fmt(mse) << '\n';
  return 0;
}

int cmd_diagnose(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("diagnose", "Rank-correlate prediction errors with context priors and query difficulty");
  std::string predictions, history, out_path;
  c.option("predictions", predictions, "Evaluation records from `eval` (JSONL)")->required();
  c.option("history", history, "Rollout log supplying priors and difficulties (JSONL)")->required();
  c.option("out", out_path, "Output report (JSONL)")->required();
  if (auto rc = c.parse(args, out, err)) return *rc;

  const auto records = load_eval_records(predictions);
  const RolloutLog log = load_rollouts(history);
  const ResidualReport rep = residual_report(records, log);
  const double bound = 3.0 / std::sqrt(static_cast<double>(rep.n));
  const bool ctx_flag = std::abs(rep.context_residual) > bound;
  const bool q_flag = std::abs(rep.query_residual) > bound;
  std::vector<json> rows{json{{"context_residual", rep.context_residual},
                              {"query_residual", rep.query_residual},
                              {"n", rep.n},
                              {"bound", bound},
                              {"context_dependent", ctx_flag},
                              {"query_dependent", q_flag}}};
  for (const auto& [ck, mu] : rep.context_priors) {
    rows.push_back(json{{"policy_id", ck.policy_id}, {"step", ck.step}, {"context_prior", mu}});
  }
  for (const auto& [q, d] : rep.query_difficulties) rows.push_back(json{{"query_id", q}, {"difficulty", d}});
  write_jsonl(out_path, c.header(), rows);
  out << "diagnose: n=" << rep.n << " context residual=" << fmt(rep.context_residual)
      << (ctx_flag ? " (flagged)" : "") << " query residual=" << fmt(rep.query_residual)
      << (q_flag ? " (flagged)" : "") << " bound=" << fmt(bound) << '\n';
  return 0;
}

int cmd_allocate(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("allocate", "Split a rollout budget across prompts to maximize expected learning signal");
  std::string predictions, out_path, solver = "greedy";
  AllocationRequest req;
  req.budget_total = 0;
  c.option("predictions", predictions, "Per-prompt success probabilities: {prompt_id|query_id|id, p|prob} (JSONL)")
      ->required();
  c.option("budget", req.budget_total, "Total rollout budget")->required();
  c.option("solver", solver, "Allocation solver")->check(CLI::IsMember({"greedy", "dp"}));
  c.option("b-min", req.budget_min, "Per-prompt minimum budget");
  c.option("b-max", req.budget_max, "Per-prompt maximum budget");
  c.option("out", out_path, "Output plan (JSONL)");
  if (auto rc = c.parse(args, out, err)) return *rc;

  std::unordered_set<std::string> seen;
  detail::for_each_json_line(predictions, [&](const json& o, std::size_t) {
    PromptPrediction p;
    for (const char* k : {"prompt_id", "query_id", "id"}) {
      if (o.contains(k)) {
        p.prompt_id = o[k].get<std::string>();
        break;
      }
    }
    if (p.prompt_id.empty()) throw ValidationError("missing prompt id");
    if (!seen.insert(p.prompt_id).second) throw ValidationError("duplicate prompt \"" + p.prompt_id + "\"");
    if (o.contains("p")) {
      p.p = o["p"].get<double>();
    } else {
      p.p = detail::require<double>(o, "prob");
    }
    req.prompts.push_back(std::move(p));
  });
  const AllocationPlan plan = solver == "dp" ? dp_allocate(req) : greedy_allocate(req);
  if (out_path.empty()) out_path = "plan.jsonl";
  std::vector<json> rows;
  for (std::size_t i = 0; i < req.prompts.size(); ++i) {
    rows.push_back(json{{"prompt_id", req.prompts[i].prompt_id},
                        {"p", req.prompts[i].p},
                        {"budget", plan.budgets[i]},
                        {"utility", plan.utilities[i]}});
  }
  json summary{{"solver", solver},
               {"prompts", req.prompts.size()},
               {"budget_used", plan.total_budget()},
               {"total_utility", plan.total_utility}};
  if (solver == "dp") {
    const double greedy = greedy_allocate(req).total_utility;
    summary["greedy_total_utility"] = greedy;
    summary["greedy_dp_ratio"] = plan.total_utility > 0.0 ? greedy / plan.total_utility : 1.0;
  }
  rows.push_back(json{{"summary", summary}});
  write_jsonl(out_path, c.header(), rows);
  out << "allocate (" << solver << "): " << req.prompts.size() << " prompts, budget " << plan.total_budget() << "/"
      << req.budget_total << ", total utility " << fmt(plan.total_utility, 6) << " -> " << out_path << '\n';
  return 0;
}

struct FleetOptions {
  std::string rollouts, embeddings, fleet, queries;
  std::size_t context_size = 256;
  double threshold = 0.5;
  EstimatorOptions est;

  void add_to(Command& c) {
    c.option("rollouts", rollouts, "History rollout log for building contexts (JSONL)")->required();
    c.option("embeddings", embeddings, "Query embeddings (V0EM)")->required();
    c.option("fleet", fleet, "Fleet manifest (JSON)")->required();
    c.option("queries", queries, "Queries to route, prompts format (JSONL)")->required();
    c.option("context-size", context_size, "Context pairs per policy")->check(CLI::PositiveNumber);
    c.option("threshold", threshold, "Binarization threshold for accuracy");
    est.add_to(c, false);
  }

  std::vector<std::string> query_ids() const {
    const QuerySet set = load_prompts(queries);
    std::vector<std::string> ids;
    for (const auto& q : set.queries()) ids.push_back(q.id);
    if (ids.empty()) throw ValidationError("no queries to route");
    return ids;
  }
};

int cmd_route(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("route", "Send each query to the fleet policy with the highest cost-weighted value");
  FleetOptions fo;
  double beta = 1.0;
  std::string out_path;
  std::uint64_t seed = 0;
  fo.add_to(c);
  c.option("beta", beta, "Performance weight in [0,1]; 0 routes purely on cost")->check(CLI::Range(0.0, 1.0));
  c.option("out", out_path, "Output decisions (JSONL)")->required();
  c.seed(seed);
  if (auto rc = c.parse(args, out, err)) return *rc;

  const FleetManifest fleet = FleetManifest::load(fo.fleet);
  const RolloutLog log = load_rollouts(fo.rollouts);
  const EmbeddingStore store = read_embeddings(fo.embeddings);
  SweepInputs in;
  in.context_log = &log;
  in.store = &store;
  in.eval_queries = fo.query_ids();
  in.context_size = fo.context_size;
  in.seed = seed;
  const auto ctxs = build_fleet_contexts(in, fleet, beta);
  const auto estimator = fo.est.make(store.dim());
  std::map<std::string, std::size_t> counts;
  std::vector<json> rows;
  for (const auto& qid : in.eval_queries) {
    const auto d = route(QueryView{qid, store.at(qid)}, ctxs, *estimator, fleet, beta);
    ++counts[d.chosen];
    rows.push_back(d.to_json());
  }
  write_jsonl(out_path, c.header(), rows);
  out << "route (beta=" << beta << "): " << rows.size() << " queries;";
  for (const auto& [pid, n] : counts) out << ' ' << pid << '=' << n;
  out << '\n';
  return 0;
}

int cmd_sweep(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("sweep", "Trace routing cost against accuracy over a range of beta values");
  FleetOptions fo;
  std::string truth, betas_text = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1", out_path;
  std::uint64_t seed = 0;
  fo.add_to(c);
  c.option("truth-rollouts", truth, "Ground-truth rollouts for the routed queries (JSONL)")->required();
  c.option("betas", betas_text, "Comma-separated beta values");
  c.option("out", out_path, "Output operating points (JSONL)")->required();
  c.seed(seed);
  if (auto rc = c.parse(args, out, err)) return *rc;

  const auto betas = parse_betas(betas_text);
  const FleetManifest fleet = FleetManifest::load(fo.fleet);
  const RolloutLog log = load_rollouts(fo.rollouts);
  const RolloutLog truth_log = load_rollouts(truth);
  const EmbeddingStore store = read_embeddings(fo.embeddings);
  SweepInputs in;
  in.context_log = &log;
  in.truth = &truth_log;
  in.store = &store;
  in.eval_queries = fo.query_ids();
  in.context_size = fo.context_size;
  in.seed = seed;
  in.threshold = fo.threshold;
  const auto estimator = fo.est.make(store.dim());
  const auto points = pareto_sweep(in, fleet, betas, *estimator);
  const auto frontier = pareto_filter(points);
  std::vector<json> rows;
  out << "sweep: beta  mean_cost  accuracy  frontier\n";
  for (const auto& p : points) {
    const bool on = std::any_of(frontier.begin(), frontier.end(), [&](const ParetoPoint& f) {
      return f.beta == p.beta && f.mean_cost == p.mean_cost && f.accuracy == p.accuracy;
    });
    json j = p.to_json();
    j["on_frontier"] = on;
    rows.push_back(j);
    out << "  " << fmt(p.beta, 2) << "  " << fmt(p.mean_cost, 2) << "  " << fmt(p.accuracy) << "  "
        << (on ? "yes" : "no") << '\n';
  }
  write_jsonl(out_path, c.header(), rows);
  return 0;
}

// ---------------------------------------------------------------------------
// verify

struct Check {
  std::string suite;
  std::string name;
  bool pass = false;
  std::string detail;
};

void suite_utility(std::vector<Check>& checks) {
  double worst = 0.0;
  for (int b = 1; b <= 128; ++b) {
    for (int i = 1; i <= 99; ++i) {
      const double p = i / 100.0;
      worst = std::max(worst, std::abs(utility(b, p) - expected_signal_bruteforce(b, p)));
    }
  }
  checks.push_back({"utility", "closed form = binomial enumeration", worst <= 1e-9, "max err " + std::to_string(worst)});
  double s_err = 0.0, proxy_err = 0.0, mean_err = 0.0, std_err = 0.0;
  for (int b = 2; b <= 64; ++b) {
    for (int k = 1; k < b; ++k) {
      const auto a = advantages(b, k);
      s_err = std::max(s_err, std::abs(a.signal - 2.0 * std::sqrt(static_cast<double>(k) * (b - k))));
      proxy_err = std::max(proxy_err, std::abs(a.proxy - (b - k)));
      mean_err = std::max(mean_err, std::abs(a.group_mean));
      std_err = std::max(std_err, std::abs(a.group_std - 1.0));
    }
  }
  checks.push_back({"utility", "signal = 2 sqrt(k(B-k))", s_err <= 1e-9, "max err " + std::to_string(s_err)});
  checks.push_back({"utility", "proxy = B - k", proxy_err <= 1e-9, "max err " + std::to_string(proxy_err)});
  checks.push_back({"utility", "group advantages standardized", mean_err <= 1e-12 && std_err <= 1e-12,
                    "mean " + std::to_string(mean_err) + ", std " + std::to_string(std_err)});
}

void suite_shortcut(std::vector<Check>& checks, std::uint64_t seed) {
  WorldConfig cfg{.n_policies = 8, .n_queries = 2000, .sigma_theta = 1.5, .seed = seed};
  cfg = calibrate_theta_mean(cfg, 0.5);
  const auto log = simulate_log(gen_world(cfg), hash_combine(seed, 1));
  const auto rep = verify_shortcut(log);
  checks.push_back({"shortcut", "context-only CE beats H(Y) by >= 0.02 bits", rep.gap >= 0.02,
                    "gap " + std::to_string(rep.gap) + " bits, rate " + std::to_string(rep.global_rate)});
  checks.push_back({"shortcut", "CE gap = plug-in I(Y;C)", std::abs(rep.gap - rep.mi) <= 1e-9,
                    "|gap - mi| " + std::to_string(std::abs(rep.gap - rep.mi))});
  WorldConfig flat = cfg;
  flat.sigma_theta = 0.0;
  const auto mi = plugin_mi_context(simulate_log(gen_world(flat), hash_combine(seed, 2)));
  checks.push_back({"shortcut", "identical policies carry no shortcut", mi.mi <= 0.01, "mi " + std::to_string(mi.mi)});
}

void suite_invariance(std::vector<Check>& checks, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ScoredPair> pairs;
  std::vector<double> rate(8);
  for (auto& r : rate) r = rng.uniform();
  for (int i = 0; i < 400; ++i) {
    ScoredPair p;
    p.context = rng.below(rate.size());
    for (auto& x : p.winner) x = rng.normal();
    for (auto& x : p.loser) x = rng.normal();
    p.winner[kBiasFeature] = p.loser[kBiasFeature] = 1.0;
    p.winner[kCtxRateFeature] = p.loser[kCtxRateFeature] = rate[p.context];
    pairs.push_back(p);
  }
  Weights w{};
  for (auto& x : w) x = 0.3 * rng.normal();
  const auto rep = verify_invariance(w, pairs, [&](std::size_t ctx) { return 10.0 * rate[ctx]; });
  checks.push_back({"invariance", "rank gradient unchanged by context bias", rep.rank_deviation <= 1e-9,
                    "relative change " + std::to_string(rep.rank_deviation)});
  checks.push_back({"invariance", "CE gradient moved by context bias", rep.ce_deviation >= 0.01,
                    "relative change " + std::to_string(rep.ce_deviation)});
  checks.push_back({"invariance", "ctx_rate rank gradient exactly 0", rep.ctx_rate_exact_zero, ""});
}

void suite_degenerate(std::vector<Check>& checks, std::uint64_t seed) {
  WorldConfig cfg{.n_policies = 6, .n_queries = 600, .dim = 16, .sigma_theta = 1.0, .seed = seed};
  const SynthWorld world = gen_world(cfg);
  const RolloutLog log = simulate_log(world, hash_combine(seed, 3));
  const TrainingData data = make_training_data(log, world.embeddings(), SplitConfig{.seed = seed});
  const auto shortcut = evaluate_estimator(ShortcutEstimator{}, data, 128, seed);
  const double intra = intra_context_auc(shortcut).value;
  checks.push_back({"degenerate", "shortcut intra-context AUC = 0.5", intra == 0.5, "value " + std::to_string(intra)});
  ScorerWeights w;
  Rng rng(hash_combine(seed, 4));
  for (auto& x : w.w) x = rng.normal();
  const PromptOnlyEstimator blind(w, FeatureExtractor({}, world.embeddings().dim()));
  const auto recs = evaluate_estimator(blind, data, 128, seed);
  const double pw = pairwise_calibration_accuracy(recs).value;
  checks.push_back({"degenerate", "context-free pairwise accuracy = 0.5", pw == 0.5, "value " + std::to_string(pw)});
}

int cmd_verify(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("verify", "Run built-in property suites and print a pass/fail table");
  std::string suite = "all";
  std::uint64_t seed = 1;
  c.option("suite", suite, "Suite to run")->check(CLI::IsMember({"utility", "shortcut", "invariance", "degenerate", "all"}));
  c.seed(seed);
  if (auto rc = c.parse(args, out, err)) return *rc;

  std::vector<Check> checks;
  if (suite == "utility" || suite == "all") suite_utility(checks);
  if (suite == "shortcut" || suite == "all") suite_shortcut(checks, seed);
  if (suite == "invariance" || suite == "all") suite_invariance(checks, seed);
  if (suite == "degenerate" || suite == "all") suite_degenerate(checks, seed);
  bool all = true;
  for (const auto& ch : checks) {
    all = all && ch.pass;
    out << (ch.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(11) << ch.suite << std::setw(46) << ch.name
        << ch.detail << '\n';
  }
  out << (all ? "all checks passed" : "some checks FAILED") << '\n';
  return all ? 0 : 1;
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Command c("report", "Summarize a training trace and optional sweep output into plot-ready data");
  std::string trace, pareto, out_path;
  c.option("trace", trace, "Training trace from `train --trace` (JSONL)");
  c.option("pareto", pareto, "Operating points from `sweep` (JSONL)");
  c.option("out", out_path, "Output summary (JSONL)")->required();
  if (auto rc = c.parse(args, out, err)) return *rc;
  if (trace.empty() && pareto.empty()) throw ValidationError("report: pass --trace and/or --pareto");

  json summary = json::object();
  if (!trace.empty()) {
    const auto rows = read_jsonl(trace);
    if (rows.empty()) throw ValidationError("report: trace \"" + trace + "\" has no entries");
    json curve = json::array();
    double best = -1.0;
    std::size_t best_epoch = 0;
    for (const auto& r : rows) {
      if (!r.contains("val_auc") || r["val_auc"].is_null()) continue;
      const double v = r["val_auc"].get<double>();
      const std::size_t e = detail::require<std::size_t>(r, "epoch");
      curve.push_back(json{{"epoch", e}, {"val_auc", v}});
      if (v > best) {
        best = v;
        best_epoch = e;
      }
    }
    summary["training"] = json{{"steps", rows.size()},
                               {"final_loss", detail::require<double>(rows.back(), "loss")},
                               {"best_val_auc", best >= 0 ? json(best) : json(nullptr)},
                               {"best_epoch", best_epoch},
                               {"val_auc_curve", curve}};
    out << "report: " << rows.size() << " training steps, final loss " << fmt(rows.back()["loss"].get<double>())
        << ", best val intra-AUC " << (best >= 0 ? fmt(best) : "n/a") << '\n';
  }
  if (!pareto.empty()) {
    std::vector<ParetoPoint> pts;
    for (const auto& r : read_jsonl(pareto)) {
      pts.push_back(ParetoPoint{detail::require<double>(r, "beta"), detail::require<double>(r, "mean_cost"),
                                detail::require<double>(r, "accuracy"), r.value("mean_reward", 0.0)});
    }
    json front = json::array();
    for (const auto& p : pareto_filter(pts)) front.push_back(p.to_json());
    summary["pareto"] = json{{"points", pts.size()}, {"frontier", front}};
    out << "report: " << pts.size() << " operating points, " << front.size() << " on the frontier\n";
  }
  write_jsonl(out_path, c.header(), {summary});
  return 0;
}

// ---------------------------------------------------------------------------

struct Entry {
  const char* name;
  const char* summary;
  int (*fn)(const std::vector<std::string>&, std::ostream&, std::ostream&);
};

constexpr Entry kCommands[] = {
    {"simulate", "generate a synthetic policy zoo", cmd_simulate},
    {"train", "train the linear value scorer", cmd_train},
    {"eval", "score held-out queries and report metrics", cmd_eval},
    {"allocate", "allocate a rollout budget across prompts", cmd_allocate},
    {"route", "route queries across a policy fleet", cmd_route},
    {"sweep", "trace the routing cost/accuracy frontier", cmd_sweep},
    {"diagnose", "residual correlation diagnostics", cmd_diagnose},
    {"verify", "run built-in property suites", cmd_verify},
    {"report", "summarize training traces and sweeps", cmd_report},
};

std::string usage() {
  std::ostringstream os;
  os << "usage: v0 <subcommand> [options]\n\nsubcommands:\n";
  for (const auto& e : kCommands) os << "  " << std::left << std::setw(10) << e.name << e.summary << '\n';
  os << "\nRun `v0 <subcommand> --help` for options. Options may also come from --config FILE (JSON)\n"
        "and the seed from $V0_SEED; flags override the environment, which overrides the file.\n";
  return os.str();
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.empty()) {
    err << usage();
    return 1;
  }
  const std::string& sub = args.front();
  if (sub == "--help" || sub == "-h" || sub == "help") {
    out << usage();
    return 0;
  }
  if (sub == "--version") {
    out << "v0 " << kToolVersion << '\n';
    return 0;
  }
  const auto* it = std::find_if(std::begin(kCommands), std::end(kCommands), [&](const Entry& e) { return sub == e.name; });
  if (it == std::end(kCommands)) {
    err << "error: unknown subcommand \"" << sub << "\"\n\n" << usage();
    return 1;
  }
  const std::vector<std::string> rest(args.begin() + 1, args.end());
  try {
    return it->fn(rest, out, err);
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace v0::cli
