#include "beliefqa/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include "json.hpp"

#include "beliefqa/rng.hpp"

namespace beliefqa {

namespace {

constexpr double kPrototypeSeparation = 0.3;

// Scale of the offset one-hot. The block is noiseless, so any positive
// value keeps the offset exactly readable; at unit scale it would dominate
// the cosine geometry of raw-feature embeddings and drown out the cue.
constexpr double kQuestionScale = 0.3;

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec random_unit(Rng& rng, std::size_t n) {
  Vec v(n);
  double sq = 0.0;
  do {
    for (auto& x : v) x = rng.normal();
    sq = dot(v, v);
  } while (sq < 1e-12);
  const double norm = std::sqrt(sq);
  for (auto& x : v) x /= norm;
  return v;
}

}  // namespace

void GenConfig::validate() const {
  if (intents < 2) throw ConfigError("gen config: need at least 2 intents");
  if (steps == 0) throw ConfigError("gen config: steps must be positive");
  if (sessions == 0) throw ConfigError("gen config: sessions must be positive");
  if (sigma < 0.0) throw ConfigError("gen config: sigma must be nonnegative");
  if (context_fraction < 0.0 || context_fraction > 1.0)
    throw ConfigError("gen config: context fraction must be in [0, 1]");
  if (cue_fraction < 0.0 || cue_fraction > 1.0)
    throw ConfigError("gen config: cue fraction must be in [0, 1]");
  if (k_ans < 2) throw ConfigError("gen config: need at least 2 candidates");
  if (cue_dim == 0) throw ConfigError("gen config: cue_dim must be positive");
  if (d_v < cue_dim + k_ans)
    throw ConfigError("gen config: d_v must cover the cue block plus " +
                      std::to_string(k_ans) + " probe directions");
  if (d_l < k_ans)
    throw ConfigError("gen config: d_l must cover the offset one-hot");
  // Context labels are (intent + offset) mod k_ans; uniformity over answers,
  // and with it the at-chance floor for memoryless models, needs the intent
  // count to be a multiple of the candidate count.
  if (context_fraction > 0.0 && intents % k_ans != 0)
    throw ConfigError("gen config: intents must be a multiple of k_ans when "
                      "context questions are enabled");
}

std::vector<Vec> make_intent_prototypes(const GenConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "intent-prototypes");
  std::vector<Vec> protos;
  protos.reserve(cfg.intents);
  const std::size_t budget = 200 * cfg.intents;
  std::size_t draws = 0;
  while (protos.size() < cfg.intents) {
    if (draws++ >= budget)
      throw ConfigError("gen config: cannot place " +
                        std::to_string(cfg.intents) +
                        " prototypes with pairwise |dot| < " +
                        std::to_string(kPrototypeSeparation) + " in " +
                        std::to_string(cfg.cue_dim) + " dimensions");
    Vec cand = random_unit(rng, cfg.cue_dim);
    bool ok = true;
    for (const auto& p : protos) {
      if (std::fabs(dot(cand, p)) >= kPrototypeSeparation) {
        ok = false;
        break;
      }
    }
    if (ok) protos.push_back(std::move(cand));
  }
  return protos;
}

std::vector<Vec> make_observable_probes(const GenConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "observable-probes");
  const std::size_t content_dim = cfg.d_v - cfg.cue_dim;
  // Gram-Schmidt over the content block, then embedded into full d_v width
  // with zeros over the cue block.
  std::vector<Vec> basis;
  while (basis.size() < cfg.k_ans) {
    Vec v(content_dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {
      const double proj = dot(v, b);
      for (std::size_t i = 0; i < content_dim; ++i) v[i] -= proj * b[i];
    }
    const double norm = std::sqrt(dot(v, v));
    if (norm < 1e-6) continue;  // essentially dependent draw, redo
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<Vec> probes(cfg.k_ans, Vec(cfg.d_v, 0.0));
  for (std::size_t j = 0; j < cfg.k_ans; ++j)
    for (std::size_t i = 0; i < content_dim; ++i)
      probes[j][cfg.cue_dim + i] = basis[j][i];
  return probes;
}

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  const auto protos = make_intent_prototypes(cfg);
  const auto probes = make_observable_probes(cfg);

  const double p = cfg.context_fraction;
  const double cue_given_observable =
      (cfg.cue_fraction <= 0.0 || p >= 1.0)
          ? 0.0
          : std::min(1.0, cfg.cue_fraction / (1.0 - p));

  Dataset out;
  out.reserve(cfg.sessions);
  for (std::size_t s = 0; s < cfg.sessions; ++s) {
    const std::uint64_t session_id = cfg.session_offset + s;
    Rng rng = Rng::stream(cfg.seed, "session", session_id);

    Session sess;
    sess.session_id = session_id;
    sess.intent = rng.below(cfg.intents);
    sess.steps.reserve(cfg.steps);

    for (std::size_t t = 0; t < cfg.steps; ++t) {
      // Every step consumes the same draws in the same order, so the step
      // structure for a seed is invariant under sigma changes.
      const double kind_draw = rng.uniform();
      const double cue_draw = rng.uniform();
      Vec cue_noise(cfg.cue_dim);
      for (auto& x : cue_noise) x = rng.normal();
      Vec content(cfg.d_v - cfg.cue_dim);
      for (auto& x : content) x = rng.normal();
      const std::size_t offset = rng.below(cfg.k_ans);
      Vec lang_noise(cfg.d_l - cfg.k_ans);
      for (auto& x : lang_noise) x = rng.normal();

      QAStep step;
      step.session_id = session_id;
      step.step = t;
      step.k_ans = cfg.k_ans;
      step.intent_truth = sess.intent;
      // The opening step always carries a cue and an observable question, so
      // the intent is recoverable before the first context question.
      const bool is_context = (t > 0) && (kind_draw < p);
      step.kind = is_context ? StepKind::context : StepKind::observable;
      step.cue_present =
          !is_context && (t == 0 || cue_draw < cue_given_observable);

      step.visual_raw.assign(cfg.d_v, 0.0);
      for (std::size_t i = 0; i < cfg.cue_dim; ++i) {
        double v = cfg.sigma * cue_noise[i];
        if (step.cue_present) v += protos[sess.intent][i];
        step.visual_raw[i] = v;
      }
      // Outside the cue block the features are pure sigma-scaled noise, so
      // the unit-norm cue stands well above the floor wherever it appears.
      for (std::size_t i = 0; i < content.size(); ++i)
        step.visual_raw[cfg.cue_dim + i] = cfg.sigma * content[i];

      // The offset block is noiseless: a context step sets exactly one of
      // the first k_ans coordinates, an observable step leaves all of them
      // zero, and that difference alone announces the question kind.
      step.language_raw.assign(cfg.d_l, 0.0);
      if (is_context) step.language_raw[offset] = kQuestionScale;
      for (std::size_t i = 0; i < lang_noise.size(); ++i)
        step.language_raw[cfg.k_ans + i] = cfg.sigma * lang_noise[i];

      if (is_context) {
        step.label = (sess.intent + offset) % cfg.k_ans;
      } else {
        std::size_t best = 0;
        double best_score = dot(probes[0], step.visual_raw);
        for (std::size_t j = 1; j < cfg.k_ans; ++j) {
          const double score = dot(probes[j], step.visual_raw);
          if (score > best_score) {
            best_score = score;
            best = j;
          }
        }
        step.label = best;
      }
      sess.steps.push_back(std::move(step));
    }
    out.push_back(std::move(sess));
  }
  return out;
}

SplitResult split(const Dataset& dataset, const SplitRatios& ratios,
                  std::uint64_t seed) {
  const double sum = ratios.train + ratios.validation + ratios.test;
  if (ratios.train < 0.0 || ratios.validation < 0.0 || ratios.test < 0.0 ||
      std::fabs(sum - 1.0) > 1e-9)
    throw ConfigError("split: ratios must be nonnegative and sum to 1");

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = Rng::stream(seed, "split-shuffle");
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);

  const auto n = dataset.size();
  const std::size_t n_train =
      static_cast<std::size_t>(std::llround(ratios.train * n));
  const std::size_t n_val = std::min(
      n - n_train,
      static_cast<std::size_t>(std::llround(ratios.validation * n)));
  const std::size_t n_test = n - n_train - n_val;

  auto check = [](double ratio, std::size_t count, const char* name) {
    if (ratio > 0.0 && count == 0)
      throw ConfigError(std::string("split: ") + name +
                        " ratio is positive but receives no sessions");
  };
  check(ratios.train, n_train, "train");
  check(ratios.validation, n_val, "validation");
  check(ratios.test, n_test, "test");

  SplitResult result;
  for (std::size_t i = 0; i < n; ++i) {
    const Session& s = dataset[order[i]];
    if (i < n_train)
      result.train.push_back(s);
    else if (i < n_train + n_val)
      result.validation.push_back(s);
    else
      result.test.push_back(s);
  }
  return result;
}

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const auto& sess : dataset) {
    for (const auto& step : sess.steps) {
      nlohmann::json j;
      j["session_id"] = step.session_id;
      j["step"] = step.step;
      j["kind"] =
          step.kind == StepKind::context ? "context" : "observable";
      j["visual_raw"] = step.visual_raw;
      j["language_raw"] = step.language_raw;
      j["k_ans"] = step.k_ans;
      j["label"] = step.label;
      j["cue_present"] = step.cue_present;
      j["intent_truth"] = step.intent_truth;
      out << j.dump() << '\n';
    }
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open");

  Dataset out;
  std::size_t line_no = 0;
  std::string line;
  // session_id -> position in out; sessions appear in first-seen order.
  std::unordered_map<std::uint64_t, std::size_t> index;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) +
                        ": parse error: " + e.what());
    }
    QAStep step;
    try {
      step.session_id = j.at("session_id").get<std::uint64_t>();
      step.step = j.at("step").get<std::size_t>();
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "observable")
        step.kind = StepKind::observable;
      else if (kind == "context")
        step.kind = StepKind::context;
      else
        throw FormatError("unknown kind \"" + kind + "\"");
      step.visual_raw = j.at("visual_raw").get<Vec>();
      step.language_raw = j.at("language_raw").get<Vec>();
      step.k_ans = j.at("k_ans").get<std::size_t>();
      step.label = j.at("label").get<std::size_t>();
      step.cue_present = j.at("cue_present").get<bool>();
      step.intent_truth = j.at("intent_truth").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(line_no) +
                        ": bad step record: " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": " +
                        e.what());
    }

    auto it = index.find(step.session_id);
    if (it == index.end()) {
      it = index.emplace(step.session_id, out.size()).first;
      out.emplace_back();
      out.back().session_id = step.session_id;
      out.back().intent = step.intent_truth;
    }
    out[it->second].steps.push_back(std::move(step));
  }
  return out;
}

Observation observation_from(const QAStep& step) {
  Observation obs;
  obs.visual_raw = step.visual_raw;
  obs.language_raw = step.language_raw;
  obs.candidate_count = step.k_ans;
  return obs;
}

}  // namespace beliefqa
