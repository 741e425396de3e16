#include "beliefqa/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "beliefqa/env.hpp"
#include "beliefqa/errors.hpp"
#include "beliefqa/memory_bank.hpp"
#include "beliefqa/model.hpp"
#include "beliefqa/training.hpp"

namespace beliefqa {
namespace {

std::string trim(const std::string& s) {
  std::size_t begin = 0, end = s.size();
  while (begin < end &&
         std::isspace(static_cast<unsigned char>(s[begin])))
    ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1])))
    --end;
  return s.substr(begin, end - begin);
}

// Applies a key=value configuration file to a parsed subcommand. Lines are
// `name=value` using the long option names without dashes; `#` starts a
// comment. Options given explicitly on the command line keep their values.
void apply_config_file(CLI::App* sub, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("config file " + path + ": cannot open");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "config file " + path + ":" +
                              std::to_string(line_no);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(where + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 &&
        ((value.front() == '"' && value.back() == '"') ||
         (value.front() == '\'' && value.back() == '\'')))
      value = value.substr(1, value.size() - 2);

    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) {
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      opt = sub->get_option_no_throw("--" + dashed);
    }
    if (opt == nullptr || key == "config")
      throw ConfigError(where + ": unknown option '" + key + "'");
    if (opt->count() > 0) continue;
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void write_json_file(const nlohmann::json& doc, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw std::runtime_error(path + ": write failed");
}

// Sidecar next to an artifact recording the fully resolved configuration the
// command ran with, so every output is self-describing.
void write_meta(const std::string& artifact, const std::string& command,
                const nlohmann::json& config, const nlohmann::json& summary) {
  nlohmann::json doc{
      {"artifact", std::filesystem::path(artifact).filename().string()},
      {"command", command},
      {"config", config},
      {"summary", summary}};
  write_json_file(doc, artifact + ".meta.json");
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct DataDims {
  std::size_t d_v = 0;
  std::size_t d_l = 0;
  std::size_t k_ans = 0;
};

DataDims scan_dims(const Dataset& ds, const std::string& path) {
  if (ds.empty() || ds.front().steps.empty())
    throw ConfigError(path + ": dataset has no steps");
  const QAStep& first = ds.front().steps.front();
  DataDims dims{first.visual_raw.size(), first.language_raw.size(),
                first.k_ans};
  for (const Session& session : ds)
    for (const QAStep& step : session.steps)
      if (step.visual_raw.size() != dims.d_v ||
          step.language_raw.size() != dims.d_l || step.k_ans != dims.k_ans)
        throw ConfigError(path + ": inconsistent step shapes in session " +
                          std::to_string(session.session_id));
  return dims;
}

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  GenConfig gen;
  std::string out;
  bool quiet = false;
};

int run_gen_data(const GenDataArgs& a) {
  a.gen.validate();
  Dataset ds = generate(a.gen);
  write_dataset(ds, a.out);

  std::uint64_t total = 0, context = 0, cued = 0;
  for (const Session& session : ds) {
    for (const QAStep& step : session.steps) {
      ++total;
      context += step.kind == StepKind::context;
      cued += step.cue_present;
    }
  }

  const nlohmann::json config{{"context_fraction", a.gen.context_fraction},
                              {"cue_dim", a.gen.cue_dim},
                              {"cue_fraction", a.gen.cue_fraction},
                              {"d_l", a.gen.d_l},
                              {"d_v", a.gen.d_v},
                              {"intents", a.gen.intents},
                              {"k_ans", a.gen.k_ans},
                              {"out", a.out},
                              {"seed", a.gen.seed},
                              {"session_offset", a.gen.session_offset},
                              {"sessions", a.gen.sessions},
                              {"sigma", a.gen.sigma},
                              {"steps", a.gen.steps}};
  const nlohmann::json summary{{"context_steps", context},
                               {"cue_steps", cued},
                               {"sessions", ds.size()},
                               {"total_steps", total}};
  write_meta(a.out, "gen-data", config, summary);

  if (!a.quiet) {
    std::cout << "wrote " << ds.size() << " sessions (" << total
              << " steps) to " << a.out << "\n"
              << "context steps: " << context << ", cue-bearing steps: "
              << cued << "\n";
  }
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string data;
  std::string out;
  std::string metrics_path;
  std::string init_from;
  std::uint64_t seed = 0;
  PPOConfig ppo;
  ModelConfig model;
  TrainOptions opts;
  bool no_belief = false;
  bool quiet = false;
};

nlohmann::json train_config_echo(const TrainArgs& a,
                                 const std::string& metrics_path) {
  return nlohmann::json{{"bank_capacity", a.opts.bank_capacity},
                        {"ce_weight", a.ppo.ce_weight},
                        {"clip", a.ppo.clip},
                        {"d_c", a.model.d_c},
                        {"d_h", a.model.d_h},
                        {"d_l", a.model.d_l},
                        {"d_v", a.model.d_v},
                        {"d_zl", a.model.d_zl},
                        {"d_zv", a.model.d_zv},
                        {"data", a.data},
                        {"encoder_freeze_passes", a.opts.encoder_freeze_passes},
                        {"entropy_coef", a.ppo.entropy_coef},
                        {"epochs", a.ppo.epochs},
                        {"freeze_backbone", a.opts.freeze_backbone},
                        {"init_from", a.init_from},
                        {"k_ans", a.model.k_ans},
                        {"learning_rate", a.ppo.learning_rate},
                        {"linear_backbone", a.model.linear_backbone},
                        {"metrics", metrics_path},
                        {"minibatch", a.ppo.minibatch},
                        {"no_belief", a.no_belief},
                        {"out", a.out},
                        {"passes", a.opts.dataset_passes},
                        {"ppo_weight", a.ppo.ppo_weight},
                        {"retrieval_k", a.model.retrieval_k},
                        {"rollout_steps", a.ppo.rollout_steps},
                        {"seed", a.seed},
                        {"share_heads", a.model.share_heads},
                        {"shared_bank", a.opts.shared_bank},
                        {"temperature", a.model.temperature},
                        {"value_weight", a.ppo.value_weight}};
}

nlohmann::json metrics_row(const TrainingMetrics& m) {
  return nlohmann::json{{"accuracy_context", m.accuracy_context},
                        {"accuracy_observable", m.accuracy_observable},
                        {"accuracy_overall", m.accuracy_overall},
                        {"ce_loss", m.ce_loss},
                        {"checkpoint", m.checkpoint},
                        {"entropy", m.entropy},
                        {"mean_reward", m.mean_reward},
                        {"ppo_objective", m.ppo_objective},
                        {"sessions_seen", m.sessions_seen},
                        {"value_loss", m.value_loss}};
}

int run_train(TrainArgs a) {
  Dataset ds = read_dataset(a.data);
  const DataDims dims = scan_dims(ds, a.data);
  a.model.d_v = dims.d_v;
  a.model.d_l = dims.d_l;
  a.model.k_ans = dims.k_ans;
  a.model.validate();
  a.ppo.seed = a.seed;
  a.opts.use_belief = !a.no_belief;

  ModelParams mp = a.init_from.empty() ? ModelParams::init(a.model, a.seed)
                                       : load_checkpoint(a.init_from);
  if (!a.init_from.empty() &&
      (mp.config.d_v != dims.d_v || mp.config.d_l != dims.d_l ||
       mp.config.k_ans != dims.k_ans))
    throw ConfigError(a.init_from + ": checkpoint expects inputs of shape (" +
                      std::to_string(mp.config.d_v) + ", " +
                      std::to_string(mp.config.d_l) + ", " +
                      std::to_string(mp.config.k_ans) +
                      "), dataset provides (" + std::to_string(dims.d_v) +
                      ", " + std::to_string(dims.d_l) + ", " +
                      std::to_string(dims.k_ans) + ")");

  const std::vector<TrainingMetrics> metrics = train(ds, mp, a.ppo, a.opts);
  save_checkpoint(mp, a.out);
  const std::string metrics_path =
      a.metrics_path.empty() ? a.out + ".metrics.jsonl" : a.metrics_path;
  write_metrics(metrics, metrics_path);

  nlohmann::json summary{{"optimizer_steps", mp.adam_t},
                         {"parameters", mp.params.total_parameters()},
                         {"rounds", metrics.size()}};
  if (!metrics.empty()) summary["final"] = metrics_row(metrics.back());
  write_meta(a.out, "train", train_config_echo(a, metrics_path), summary);

  if (!a.quiet) {
    std::cout << "trained on " << ds.size() << " sessions, "
              << metrics.size() << " optimization rounds\n";
    if (!metrics.empty()) {
      const TrainingMetrics& last = metrics.back();
      std::cout << "final round: reward " << last.mean_reward << ", context "
                << last.accuracy_context << ", observable "
                << last.accuracy_observable << "\n";
    }
    std::cout << "checkpoint: " << a.out << "\nmetrics: " << metrics_path
              << "\n";
  }
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string data;
  std::string checkpoint;
  std::string out;
  EvalOptions opts;
  bool sampled = false;
  bool answer_head = false;
  bool no_belief = false;
  bool quiet = false;
};

int run_eval(EvalArgs a) {
  ModelParams mp = load_checkpoint(a.checkpoint);
  Dataset ds = read_dataset(a.data);
  const DataDims dims = scan_dims(ds, a.data);
  if (mp.config.d_v != dims.d_v || mp.config.d_l != dims.d_l ||
      mp.config.k_ans != dims.k_ans)
    throw ConfigError(a.checkpoint + ": checkpoint expects inputs of shape (" +
                      std::to_string(mp.config.d_v) + ", " +
                      std::to_string(mp.config.d_l) + ", " +
                      std::to_string(mp.config.k_ans) +
                      "), dataset provides (" + std::to_string(dims.d_v) +
                      ", " + std::to_string(dims.d_l) + ", " +
                      std::to_string(dims.k_ans) + ")");

  a.opts.greedy = !a.sampled;
  a.opts.use_answer_head = a.answer_head;
  a.opts.use_belief = !a.no_belief;
  const EvalReport r = evaluate(ds, mp, a.opts);

  nlohmann::json confusion = nlohmann::json::array();
  for (std::size_t row = 0; row < r.k_ans; ++row) {
    nlohmann::json line = nlohmann::json::array();
    for (std::size_t col = 0; col < r.k_ans; ++col)
      line.push_back(r.confusion[row * r.k_ans + col]);
    confusion.push_back(line);
  }
  double per_min = 1.0, per_max = 0.0, per_mean = 0.0;
  for (double acc : r.per_session_accuracy) {
    per_min = std::min(per_min, acc);
    per_max = std::max(per_max, acc);
    per_mean += acc;
  }
  if (!r.per_session_accuracy.empty())
    per_mean /= static_cast<double>(r.per_session_accuracy.size());
  else
    per_min = 0.0;

  const nlohmann::json config{{"answer_head", a.answer_head},
                              {"bank_capacity", a.opts.bank_capacity},
                              {"checkpoint", a.checkpoint},
                              {"data", a.data},
                              {"greedy", a.opts.greedy},
                              {"no_belief", a.no_belief},
                              {"out", a.out},
                              {"seed", a.opts.seed},
                              {"shared_bank", a.opts.shared_bank}};
  const nlohmann::json report{
      {"accuracy_context", r.accuracy_context},
      {"accuracy_observable", r.accuracy_observable},
      {"accuracy_overall", r.accuracy_overall},
      {"config", config},
      {"confusion", confusion},
      {"k_ans", r.k_ans},
      {"mean_reward", r.mean_reward},
      {"per_session_accuracy", r.per_session_accuracy},
      {"per_session_summary",
       {{"max", per_max}, {"mean", per_mean}, {"min", per_min}}},
      {"sessions", r.sessions},
      {"steps", r.steps},
      {"steps_context", r.steps_context},
      {"steps_observable", r.steps_observable}};
  write_json_file(report, a.out);

  if (!a.quiet) {
    std::cout << "evaluated " << r.sessions << " sessions (" << r.steps
              << " steps)\n"
              << "accuracy: overall " << r.accuracy_overall << ", context "
              << r.accuracy_context << ", observable " << r.accuracy_observable
              << "\nreport: " << a.out << "\n";
  }
  return 0;
}

// --------------------------------------------------------- inspect-memory

struct InspectArgs {
  std::string bank_path;
  std::string out;
  std::string query_csv;
  std::size_t k = 5;
  double temperature = 1.0;
  bool quiet = false;
};

Vec parse_query(const std::string& csv) {
  Vec query;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      query.push_back(std::stod(item, &used));
      while (used < item.size() && std::isspace(
                 static_cast<unsigned char>(item[used])))
        ++used;
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("inspect-memory: cannot parse query component '" +
                        item + "'");
    }
  }
  if (query.empty())
    throw ConfigError("inspect-memory: query must contain at least one value");
  return query;
}

int run_inspect(const InspectArgs& a) {
  MemoryBank bank = load_bank(a.bank_path);

  std::uint64_t index_min = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t index_max = 0;
  double reward_sum = 0.0;
  std::map<std::uint32_t, std::uint64_t> action_counts;
  for (const MemoryEntry& e : bank.entries()) {
    index_min = std::min(index_min, e.insert_index);
    index_max = std::max(index_max, e.insert_index);
    reward_sum += e.reward;
    action_counts[e.action] += 1;
  }

  nlohmann::json actions = nlohmann::json::array();
  for (const auto& [action, count] : action_counts)
    actions.push_back({{"action", action}, {"count", count}});

  nlohmann::json doc{
      {"actions", actions},
      {"bank", a.bank_path},
      {"count", bank.size()},
      {"dim_key", bank.dim_key()},
      {"dim_value", bank.dim_value()},
      {"mean_reward",
       bank.empty() ? 0.0 : reward_sum / static_cast<double>(bank.size())}};
  if (!bank.empty()) {
    doc["insert_index_min"] = index_min;
    doc["insert_index_max"] = index_max;
  }

  if (!a.query_csv.empty()) {
    const Vec query = parse_query(a.query_csv);
    if (query.size() != bank.dim_key())
      throw ConfigError("inspect-memory: query has " +
                        std::to_string(query.size()) +
                        " components, bank keys have " +
                        std::to_string(bank.dim_key()));
    const RetrievalResult res = bank.retrieve_topk(query, a.k, a.temperature);
    const BeliefVector belief = aggregate_belief(res, bank);
    nlohmann::json results = nlohmann::json::array();
    for (std::size_t i = 0; i < res.count(); ++i) {
      const MemoryEntry* e = bank.find(res.indices[i]);
      results.push_back({{"action", e ? e->action : 0},
                         {"insert_index", res.indices[i]},
                         {"reward", e ? e->reward : 0.0f},
                         {"similarity", res.similarities[i]},
                         {"weight", res.weights[i]}});
    }
    doc["query"] = {{"k", a.k},
                    {"temperature", a.temperature},
                    {"values", query}};
    doc["results"] = results;
    doc["belief"] = belief.values;
    doc["cold_start"] = belief.is_cold_start;
  }

  if (!a.out.empty()) {
    write_json_file(doc, a.out);
    if (!a.quiet)
      std::cout << "bank " << a.bank_path << ": " << bank.size()
                << " entries\nreport: " << a.out << "\n";
  } else {
    std::cout << doc.dump(2) << "\n";
  }
  return 0;
}

// ------------------------------------------------------------------ verify

struct GateResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream ss;
  ss << std::scientific << std::setprecision(2) << v;
  return ss.str();
}

GateResult gate_retrieval(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "verify-retrieval");
  double worst_weight_gap = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 4 + rng.below(29);
    const std::size_t n = 1 + rng.below(200);
    const std::size_t k = 1 + rng.below(8);
    MemoryBank bank(d, 3, n + 8, 0);
    for (std::size_t i = 0; i < n; ++i) {
      Vec key(d), payload(3);
      for (double& v : key) v = rng.normal();
      for (double& v : payload) v = rng.normal();
      bank.insert(key, payload, static_cast<std::uint32_t>(rng.below(4)),
                  static_cast<float>(rng.uniform()));
    }
    Vec query(d);
    for (double& v : query) v = rng.normal();
    const double temperature = 0.7;
    const RetrievalResult got = bank.retrieve_topk(query, k, temperature);

    // Exhaustive reference: same cosine arithmetic, full sort.
    double norm = 0.0;
    for (double v : query) norm += v * v;
    norm = std::sqrt(norm);
    struct Scored {
      double sim;
      std::uint64_t index;
    };
    std::vector<Scored> scored;
    for (const MemoryEntry& e : bank.entries()) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i)
        s += (query[i] / norm) * static_cast<double>(e.key[i]);
      scored.push_back({std::clamp(s, -1.0, 1.0), e.insert_index});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a,
                                               const Scored& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      return a.index < b.index;
    });
    const std::size_t take = std::min(k, scored.size());
    if (got.count() != take)
      return {"retrieval", false,
              "trial " + std::to_string(trial) + ": expected " +
                  std::to_string(take) + " results, got " +
                  std::to_string(got.count())};
    Vec scaled(take);
    for (std::size_t i = 0; i < take; ++i) {
      if (got.indices[i] != scored[i].index ||
          got.similarities[i] != scored[i].sim)
        return {"retrieval", false,
                "trial " + std::to_string(trial) +
                    ": ranking differs from the exhaustive reference at " +
                    std::to_string(i)};
      scaled[i] = scored[i].sim / temperature;
    }
    const Vec ref_weights = softmax(scaled);
    for (std::size_t i = 0; i < take; ++i)
      worst_weight_gap = std::max(
          worst_weight_gap, std::fabs(ref_weights[i] - got.weights[i]));
  }
  if (worst_weight_gap > 1e-12)
    return {"retrieval", false,
            "weights drift from softmax reference by " +
                sci(worst_weight_gap)};
  return {"retrieval", true,
          "20 random banks match the exhaustive reference, max weight gap " +
              sci(worst_weight_gap)};
}

GateResult gate_gradients(std::uint64_t seed, bool inject_fault) {
  GenConfig env;
  env.seed = Rng::derive(seed, "verify-gradient-data");
  env.sessions = 3;
  env.steps = 6;
  Dataset ds = generate(env);

  ModelConfig mc;
  ModelParams mp = ModelParams::init(mc, seed);
  Rng head_rng = Rng::stream(seed, "verify-head-init");
  for (const std::string& name : mp.params.names()) {
    if (name.find("head") == std::string::npos) continue;
    for (double& v : mp.params.param(name).data) v = 0.1 * head_rng.normal();
  }

  std::vector<RolloutRecord> records;
  MemoryBank bank(mc.d_z(), mc.d_c, 4096, 0);
  for (const Session& session : ds) {
    bank.clear(session.session_id);
    Rng rng = Rng::stream(seed, "verify-rollout", session.session_id);
    for (auto& rec : rollout_session(session, bank, mp, rng, true))
      records.push_back(std::move(rec));
  }

  Rng nudge = Rng::stream(seed, "verify-nudge");
  for (const std::string& name : mp.params.names())
    for (double& v : mp.params.param(name).data) v += 0.01 * nudge.normal();

  PPOConfig cfg;
  auto f = [&](bool with_grad) {
    const double loss = total_loss(records, mp, cfg, with_grad).total;
    if (with_grad && inject_fault)
      for (double& g : mp.params.grad("backbone1.W").data) g = -g;
    return loss;
  };
  Rng probe = Rng::stream(seed, "verify-probes");
  const double worst = grad_check(f, mp.params, 4, 1e-5, probe);
  if (!(worst < 1e-4))
    return {"gradients", false,
            "worst relative error " + sci(worst) + " exceeds 1e-4"};
  return {"gradients", true, "worst relative error " + sci(worst)};
}

GateResult gate_softmax(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "verify-softmax");
  double worst_sum = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t size = 1 + rng.below(8);
    const double scale = (trial % 3 == 2) ? 300.0 : 3.0;
    Vec logits(size);
    for (double& v : logits) v = scale * rng.normal();
    const Vec probs = softmax(logits);
    double sum = 0.0;
    for (double p : probs) {
      if (p < 0.0)
        return {"softmax-normalization", false, "negative probability"};
      sum += p;
    }
    worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));
  }

  MemoryBank bank(8, 4, 64, 0);
  for (int i = 0; i < 50; ++i) {
    Vec key(8), payload(4);
    for (double& v : key) v = rng.normal();
    for (double& v : payload) v = rng.normal();
    bank.insert(key, payload, 0, 0.0f);
  }
  double worst_hull = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    Vec query(8);
    for (double& v : query) v = rng.normal();
    const RetrievalResult res = bank.retrieve_topk(query, 5, 0.7);
    double sum = 0.0;
    for (std::size_t i = 0; i < res.count(); ++i) {
      sum += res.weights[i];
      if (res.similarities[i] < -1.0 || res.similarities[i] > 1.0)
        return {"softmax-normalization", false,
                "similarity outside [-1, 1]"};
    }
    worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));

    const BeliefVector belief = aggregate_belief(res, bank);
    for (std::size_t c = 0; c < belief.values.size(); ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < res.count(); ++i) {
        const MemoryEntry* e = bank.find(res.indices[i]);
        lo = std::min(lo, static_cast<double>(e->value[c]));
        hi = std::max(hi, static_cast<double>(e->value[c]));
      }
      worst_hull = std::max(worst_hull,
                            std::max(lo - belief.values[c],
                                     belief.values[c] - hi));
    }
  }
  if (worst_sum > 1e-9)
    return {"softmax-normalization", false,
            "weight sums drift by " + sci(worst_sum)};
  if (worst_hull > 1e-9)
    return {"softmax-normalization", false,
            "belief leaves the convex hull by " + sci(worst_hull)};
  return {"softmax-normalization", true,
          "max |sum - 1| = " + sci(worst_sum) + ", hull slack " +
              sci(worst_hull)};
}

GateResult gate_persistence(std::uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path dir =
      fs::temp_directory_path() / ("beliefqa-verify-" + std::to_string(seed));
  fs::create_directories(dir);
  Rng rng = Rng::stream(seed, "verify-persistence");
  GateResult fail{"persistence", false, ""};

  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t d_z = 2 + rng.below(12);
    const std::size_t d_c = 1 + rng.below(6);
    const std::size_t n = rng.below(40);
    MemoryBank bank(d_z, d_c, 4096, 0);
    for (std::size_t i = 0; i < n; ++i) {
      Vec key(d_z), payload(d_c);
      for (double& v : key) v = rng.normal();
      for (double& v : payload) v = rng.normal();
      bank.insert(key, payload, static_cast<std::uint32_t>(rng.below(6)),
                  static_cast<float>(rng.normal()));
    }
    const std::string path_a = (dir / "bank_a.bin").string();
    const std::string path_b = (dir / "bank_b.bin").string();
    save_bank(bank, path_a);
    MemoryBank loaded = load_bank(path_a);
    save_bank(loaded, path_b);
    if (read_file_bytes(path_a) != read_file_bytes(path_b)) {
      fail.detail = "bank round trip is not byte-identical";
      fs::remove_all(dir);
      return fail;
    }
  }

  for (int trial = 0; trial < 3; ++trial) {
    ModelConfig mc;
    mc.d_v = 6 + rng.below(6);
    mc.d_l = 5 + rng.below(4);
    mc.d_zv = 3;
    mc.d_zl = 3;
    mc.d_c = 4;
    mc.d_h = 5;
    ModelParams mp = ModelParams::init(mc, rng.next_u64());
    for (const std::string& name : mp.params.names()) {
      for (double& v : mp.params.param(name).data) v = rng.normal();
      for (double& v : mp.params.moment1(name).data) v = rng.normal();
      for (double& v : mp.params.moment2(name).data) v = rng.uniform();
    }
    mp.adam_t = 7 + trial;
    const std::string path_a = (dir / "model_a.bin").string();
    const std::string path_b = (dir / "model_b.bin").string();
    save_checkpoint(mp, path_a);
    ModelParams loaded = load_checkpoint(path_a);
    save_checkpoint(loaded, path_b);
    if (read_file_bytes(path_a) != read_file_bytes(path_b)) {
      fail.detail = "checkpoint round trip is not byte-identical";
      fs::remove_all(dir);
      return fail;
    }
  }

  // Damaged files must be rejected, not silently accepted.
  {
    MemoryBank bank(4, 2, 16, 0);
    Vec key{1.0, 0.0, 0.0, 0.0}, payload{0.5, -0.5};
    bank.insert(key, payload, 1, 1.0f);
    const std::string good = (dir / "bank_good.bin").string();
    save_bank(bank, good);
    std::string bytes = read_file_bytes(good);
    const std::string cut = (dir / "bank_cut.bin").string();
    std::ofstream(cut, std::ios::binary)
        << bytes.substr(0, bytes.size() - 5);
    bool rejected = false;
    try {
      load_bank(cut);
    } catch (const FormatError&) {
      rejected = true;
    }
    if (!rejected) {
      fail.detail = "truncated bank file was accepted";
      fs::remove_all(dir);
      return fail;
    }

    bytes[0] = 'X';
    const std::string bad = (dir / "bank_bad.bin").string();
    std::ofstream(bad, std::ios::binary) << bytes;
    rejected = false;
    try {
      load_bank(bad);
    } catch (const FormatError&) {
      rejected = true;
    }
    if (!rejected) {
      fail.detail = "bank file with a damaged header was accepted";
      fs::remove_all(dir);
      return fail;
    }
  }

  fs::remove_all(dir);
  return {"persistence", true,
          "round trips byte-identical, damaged files rejected"};
}

struct VerifyArgs {
  std::string gate;
  std::string out;
  bool inject_fault = false;
  std::uint64_t seed = 0;
  bool quiet = false;
};

int run_verify(const VerifyArgs& a) {
  std::vector<GateResult> results;
  const bool all = a.gate.empty();
  if (all || a.gate == "retrieval") results.push_back(gate_retrieval(a.seed));
  if (all || a.gate == "gradients")
    results.push_back(gate_gradients(a.seed, a.inject_fault));
  if (all || a.gate == "softmax-normalization")
    results.push_back(gate_softmax(a.seed));
  if (all || a.gate == "persistence")
    results.push_back(gate_persistence(a.seed));

  if (!a.quiet) {
    for (const GateResult& r : results)
      std::cout << std::left << std::setw(23) << r.name
                << (r.pass ? "PASS  " : "FAIL  ") << r.detail << "\n";
  }

  if (!a.out.empty()) {
    nlohmann::json gates = nlohmann::json::array();
    for (const GateResult& r : results)
      gates.push_back(
          {{"detail", r.detail}, {"gate", r.name}, {"pass", r.pass}});
    bool ok = true;
    for (const GateResult& r : results) ok = ok && r.pass;
    const nlohmann::json doc{{"config",
                              {{"gate", all ? "all" : a.gate},
                               {"inject_fault", a.inject_fault},
                               {"seed", a.seed}}},
                             {"gates", gates},
                             {"pass", ok}};
    write_json_file(doc, a.out);
  }

  for (const GateResult& r : results) {
    if (!r.pass) {
      std::cerr << "verify: gate '" << r.name << "' failed: " << r.detail
                << "\n";
      return 1;
    }
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"belief-augmented question answering workbench"};
  app.require_subcommand(1);

  std::string gen_config, train_config, eval_config, inspect_config,
      verify_config;

  GenDataArgs gen_args;
  CLI::App* gen = app.add_subcommand(
      "gen-data", "generate a synthetic session dataset");
  gen->add_option("--config", gen_config,
                  "read options from a key=value file");
  gen->add_option("--sessions", gen_args.gen.sessions, "number of sessions")
      ->capture_default_str();
  gen->add_option("--steps", gen_args.gen.steps, "steps per session")
      ->capture_default_str();
  gen->add_option("--intents", gen_args.gen.intents,
                  "number of latent intents")
      ->capture_default_str();
  gen->add_option("--k-ans", gen_args.gen.k_ans, "answer candidates per step")
      ->capture_default_str();
  gen->add_option("--sigma", gen_args.gen.sigma, "cue noise level")
      ->capture_default_str();
  gen->add_option("--context-fraction", gen_args.gen.context_fraction,
                  "fraction of steps that need session context")
      ->capture_default_str();
  gen->add_option("--cue-fraction", gen_args.gen.cue_fraction,
                  "fraction of steps carrying an intent cue")
      ->capture_default_str();
  gen->add_option("--d-v", gen_args.gen.d_v, "visual feature length")
      ->capture_default_str();
  gen->add_option("--d-l", gen_args.gen.d_l, "language feature length")
      ->capture_default_str();
  gen->add_option("--cue-dim", gen_args.gen.cue_dim,
                  "coordinates reserved for the cue")
      ->capture_default_str();
  gen->add_option("--session-offset", gen_args.gen.session_offset,
                  "first session id, for disjoint splits of one universe")
      ->capture_default_str();
  gen->add_option("--seed", gen_args.gen.seed, "generator seed")
      ->capture_default_str();
  gen->add_option("--out", gen_args.out, "output dataset path (jsonl)")
      ->required();
  gen->add_flag("--quiet", gen_args.quiet, "suppress progress output");

  TrainArgs train_args;
  CLI::App* tr = app.add_subcommand("train", "train a model on a dataset");
  tr->add_option("--config", train_config,
                  "read options from a key=value file");
  tr->add_option("--data", train_args.data, "training dataset (jsonl)")
      ->required();
  tr->add_option("--out", train_args.out, "checkpoint output path")
      ->required();
  tr->add_option("--metrics", train_args.metrics_path,
                 "metrics output path (default: <out>.metrics.jsonl)");
  tr->add_option("--init-from", train_args.init_from,
                 "resume from an existing checkpoint");
  tr->add_option("--seed", train_args.seed, "training seed")
      ->capture_default_str();
  tr->add_option("--epochs", train_args.ppo.epochs,
                 "optimization epochs per round")
      ->capture_default_str();
  tr->add_option("--minibatch", train_args.ppo.minibatch, "minibatch size")
      ->capture_default_str();
  tr->add_option("--rollout", train_args.ppo.rollout_steps,
                 "rollout steps per optimization round")
      ->capture_default_str();
  tr->add_option("--clip", train_args.ppo.clip, "surrogate clip range")
      ->capture_default_str();
  tr->add_option("--lr", train_args.ppo.learning_rate, "learning rate")
      ->capture_default_str();
  tr->add_option("--ce-weight", train_args.ppo.ce_weight,
                 "answer-head loss weight")
      ->capture_default_str();
  tr->add_option("--ppo-weight", train_args.ppo.ppo_weight,
                 "policy surrogate weight")
      ->capture_default_str();
  tr->add_option("--value-weight", train_args.ppo.value_weight,
                 "value loss weight")
      ->capture_default_str();
  tr->add_option("--entropy-coef", train_args.ppo.entropy_coef,
                 "entropy bonus coefficient")
      ->capture_default_str();
  tr->add_option("--encoder-freeze-passes",
                 train_args.opts.encoder_freeze_passes,
                 "passes during which the encoders are held fixed; they "
                 "update afterward")
      ->capture_default_str();
  tr->add_option("--passes", train_args.opts.dataset_passes,
                 "passes over the dataset")
      ->capture_default_str();
  tr->add_option("--d-zv", train_args.model.d_zv, "visual embedding length")
      ->capture_default_str();
  tr->add_option("--d-zl", train_args.model.d_zl, "language embedding length")
      ->capture_default_str();
  tr->add_option("--d-c", train_args.model.d_c, "context payload length")
      ->capture_default_str();
  tr->add_option("--d-h", train_args.model.d_h, "latent state length")
      ->capture_default_str();
  tr->add_option("--retrieval-k", train_args.model.retrieval_k,
                 "memory entries retrieved per step")
      ->capture_default_str();
  tr->add_option("--temperature", train_args.model.temperature,
                 "retrieval softmax temperature")
      ->capture_default_str();
  tr->add_option("--bank-capacity", train_args.opts.bank_capacity,
                 "memory bank capacity")
      ->capture_default_str();
  tr->add_flag("--share-heads", train_args.model.share_heads,
               "policy head aliases the answer head");
  tr->add_flag("--linear-backbone", train_args.model.linear_backbone,
               "drop the backbone nonlinearity");
  tr->add_flag("--no-belief", train_args.no_belief,
               "disable retrieval and keep the belief input at zero");
  tr->add_flag("--freeze-backbone", train_args.opts.freeze_backbone,
               "keep policy updates out of the shared trunk");
  tr->add_flag("--shared-bank", train_args.opts.shared_bank,
               "one memory bank across all sessions");
  tr->add_flag("--quiet", train_args.quiet, "suppress progress output");

  EvalArgs eval_args;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--config", eval_config,
                  "read options from a key=value file");
  ev->add_option("--data", eval_args.data, "evaluation dataset (jsonl)")
      ->required();
  ev->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint")
      ->required();
  ev->add_option("--out", eval_args.out, "report output path (json)")
      ->required();
  ev->add_option("--seed", eval_args.opts.seed, "sampling seed")
      ->capture_default_str();
  ev->add_option("--bank-capacity", eval_args.opts.bank_capacity,
                 "memory bank capacity")
      ->capture_default_str();
  ev->add_flag("--sampled", eval_args.sampled,
               "sample actions instead of taking the argmax");
  ev->add_flag("--answer-head", eval_args.answer_head,
               "score with the supervised answer head");
  ev->add_flag("--no-belief", eval_args.no_belief,
               "disable retrieval during evaluation");
  ev->add_flag("--shared-bank", eval_args.opts.shared_bank,
               "one memory bank across all sessions");
  ev->add_flag("--quiet", eval_args.quiet, "suppress progress output");

  InspectArgs inspect_args;
  CLI::App* ins = app.add_subcommand("inspect-memory",
                                     "summarize a saved memory bank");
  ins->add_option("--config", inspect_config,
                  "read options from a key=value file");
  ins->add_option("--bank", inspect_args.bank_path, "memory bank file")
      ->required();
  ins->add_option("--out", inspect_args.out,
                  "write the report here instead of stdout");
  ins->add_option("--query", inspect_args.query_csv,
                  "comma-separated query vector to retrieve against");
  ins->add_option("--k", inspect_args.k, "entries to retrieve")
      ->capture_default_str();
  ins->add_option("--temperature", inspect_args.temperature,
                  "retrieval softmax temperature")
      ->capture_default_str();
  ins->add_flag("--quiet", inspect_args.quiet, "suppress progress output");

  VerifyArgs verify_args;
  CLI::App* ver = app.add_subcommand(
      "verify", "run the numerical and persistence self-checks");
  ver->add_option("--config", verify_config,
                  "read options from a key=value file");
  ver->add_option("--gate", verify_args.gate, "run a single gate")
      ->check(CLI::IsMember({"retrieval", "gradients",
                             "softmax-normalization", "persistence"}));
  ver->add_option("--out", verify_args.out, "write gate results here (json)");
  ver->add_option("--seed", verify_args.seed, "seed for the randomized gates")
      ->capture_default_str();
  ver->add_flag("--inject-fault", verify_args.inject_fault,
                "flip a gradient sign to prove the gradient gate catches it");
  ver->add_flag("--quiet", verify_args.quiet, "suppress the gate table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      apply_config_file(gen, gen_config);
      return run_gen_data(gen_args);
    }
    if (tr->parsed()) {
      apply_config_file(tr, train_config);
      return run_train(train_args);
    }
    if (ev->parsed()) {
      apply_config_file(ev, eval_config);
      return run_eval(eval_args);
    }
    if (ins->parsed()) {
      apply_config_file(ins, inspect_config);
      return run_inspect(inspect_args);
    }
    if (ver->parsed()) {
      apply_config_file(ver, verify_config);
      return run_verify(verify_args);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.reserve(args.size() + 1);
  full.push_back("beliefqa");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  argv.reserve(full.size());
  for (const std::string& s : full) argv.push_back(s.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace beliefqa
