#include "beliefqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <utility>

#include "beliefqa/errors.hpp"
#include "json.hpp"

namespace beliefqa {

namespace {

double log_prob_of(const Vec& logits, std::size_t action) {
  if (action >= logits.size())
    throw IndexError("log_prob_of: action " + std::to_string(action) +
                     " out of range for " + std::to_string(logits.size()) +
                     " candidates");
  return logits[action] - log_sum_exp(logits);
}

double policy_entropy(const Vec& probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

double safe_ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

void PPOConfig::validate() const {
  if (!(clip > 0.0) || !(clip < 1.0))
    throw ConfigError("ppo: clip must lie in (0, 1), got " +
                      std::to_string(clip));
  if (minibatch == 0) throw ConfigError("ppo: minibatch size must be positive");
  if (rollout_steps == 0)
    throw ConfigError("ppo: rollout horizon must be positive");
  if (ce_weight < 0.0 || ppo_weight < 0.0 || value_weight < 0.0 ||
      entropy_coef < 0.0)
    throw ConfigError("ppo: loss weights must be non-negative");
  if (ce_weight == 0.0 && ppo_weight == 0.0 && value_weight == 0.0)
    throw ConfigError("ppo: at least one loss weight must be positive");
  if (!(learning_rate > 0.0))
    throw ConfigError("ppo: learning rate must be positive");
}

double compute_reward(std::size_t action, std::size_t label) {
  return action == label ? 1.0 : 0.0;
}

double advantage(const RolloutRecord& rec) {
  return rec.reward - rec.value_rollout;
}

double ppo_surrogate(double new_log_prob, double old_log_prob, double adv,
                     double clip) {
  if (!std::isfinite(new_log_prob) || !std::isfinite(old_log_prob) ||
      !std::isfinite(adv))
    throw NumericError("ppo_surrogate: non-finite input");
  const double ratio = std::exp(new_log_prob - old_log_prob);
  if (!std::isfinite(ratio))
    throw NumericError("ppo_surrogate: probability ratio overflowed");
  const double capped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * adv, capped * adv);
}

LossBreakdown total_loss(const std::vector<RolloutRecord>& records,
                         const std::vector<std::size_t>& indices,
                         ModelParams& mp, const PPOConfig& cfg, bool with_grad,
                         bool freeze_backbone) {
  if (indices.empty()) throw ContractError("total_loss: empty batch");
  cfg.validate();

  const double n = static_cast<double>(indices.size());
  const std::size_t k = mp.config.k_ans;
  LossBreakdown out;

  for (std::size_t idx : indices) {
    if (idx >= records.size())
      throw IndexError("total_loss: record index " + std::to_string(idx) +
                       " out of range");
    const RolloutRecord& rec = records[idx];
    StepTrace trace = forward_snapshot(rec.obs, rec.retrieved_keys,
                                       rec.retrieved_payloads, mp);

    const Vec ce_probs = softmax(trace.ce_logits);
    const CrossEntropyResult ce = cross_entropy(ce_probs, rec.label);

    const double new_lp = log_prob_of(trace.policy_logits, rec.action);
    const double adv = advantage(rec);
    const double surrogate =
        ppo_surrogate(new_lp, rec.old_log_prob, adv, cfg.clip);

    const double value_err = trace.value - rec.reward;
    const double entropy = policy_entropy(trace.policy_probs);

    out.ce += ce.loss / n;
    out.ppo_objective += surrogate / n;
    out.value_loss += value_err * value_err / n;
    out.entropy += entropy / n;

    if (!with_grad) continue;

    Vec d_ce(k, 0.0);
    for (std::size_t j = 0; j < k; ++j)
      d_ce[j] = ce.dlogits[j] * (cfg.ce_weight / n);

    Vec d_pol(k, 0.0);
    const double ratio = std::exp(new_lp - rec.old_log_prob);
    const double capped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    // Gradient flows through the unclipped branch whenever it attains the
    // minimum; a clipped-and-smaller branch is constant in the parameters.
    if (ratio * adv <= capped * adv) {
      for (std::size_t j = 0; j < k; ++j) {
        const double indicator = (j == rec.action) ? 1.0 : 0.0;
        d_pol[j] -= (cfg.ppo_weight / n) * ratio * adv *
                    (indicator - trace.policy_probs[j]);
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      const double p = trace.policy_probs[j];
      if (p > 0.0)
        d_pol[j] += (cfg.entropy_coef / n) * p * (std::log(p) + entropy);
    }

    const double d_val = (cfg.value_weight / n) * 2.0 * value_err;

    backward_step(trace, d_ce, d_pol, d_val, mp, freeze_backbone);
  }

  out.total = cfg.ce_weight * out.ce - cfg.ppo_weight * out.ppo_objective +
              cfg.value_weight * out.value_loss -
              cfg.entropy_coef * out.entropy;
  if (!std::isfinite(out.total))
    throw NumericError("total_loss: loss is not finite");
  return out;
}

LossBreakdown total_loss(const std::vector<RolloutRecord>& records,
                         ModelParams& mp, const PPOConfig& cfg, bool with_grad,
                         bool freeze_backbone) {
  std::vector<std::size_t> all(records.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return total_loss(records, all, mp, cfg, with_grad, freeze_backbone);
}

std::vector<RolloutRecord> rollout_session(const Session& session,
                                           MemoryBank& bank, ModelParams& mp,
                                           Rng& rng, bool use_belief) {
  std::vector<RolloutRecord> records;
  records.reserve(session.steps.size());

  for (const QAStep& step : session.steps) {
    const Observation obs = observation_from(step);
    StepTrace trace = use_belief ? forward_step(obs, bank, mp)
                                 : forward_nobelief(obs, mp);

    RolloutRecord rec;
    rec.obs = obs;
    rec.kind = step.kind;
    rec.session_id = step.session_id;
    rec.step = step.step;
    rec.label = step.label;
    rec.action = sample_action(trace.policy_probs, rng);
    rec.old_log_prob = log_prob_of(trace.policy_logits, rec.action);
    rec.reward = compute_reward(rec.action, step.label);
    rec.value_rollout = trace.value;
    rec.h = trace.h;
    rec.retrieved_keys = trace.retrieved_keys;
    rec.retrieved_payloads = trace.retrieved_payloads;

    if (use_belief)
      bank.insert(trace.z, context_payload(obs, mp),
                  static_cast<std::uint32_t>(rec.action),
                  static_cast<float>(rec.reward));

    records.push_back(std::move(rec));
  }
  return records;
}

namespace {

TrainingMetrics round_metrics(const std::vector<RolloutRecord>& buffer,
                              const LossBreakdown& post, std::uint64_t round,
                              std::uint64_t sessions_seen) {
  std::uint64_t hits = 0, ctx_hits = 0, obs_hits = 0, ctx = 0, obs = 0;
  for (const RolloutRecord& rec : buffer) {
    const bool hit = rec.reward > 0.5;
    hits += hit;
    if (rec.kind == StepKind::context) {
      ++ctx;
      ctx_hits += hit;
    } else {
      ++obs;
      obs_hits += hit;
    }
  }
  TrainingMetrics m;
  m.checkpoint = round;
  m.sessions_seen = sessions_seen;
  m.mean_reward = safe_ratio(hits, buffer.size());
  m.accuracy_overall = m.mean_reward;
  m.accuracy_context = safe_ratio(ctx_hits, ctx);
  m.accuracy_observable = safe_ratio(obs_hits, obs);
  m.ce_loss = post.ce;
  m.ppo_objective = post.ppo_objective;
  m.value_loss = post.value_loss;
  m.entropy = post.entropy;
  return m;
}

}  // namespace

std::vector<TrainingMetrics> train(const Dataset& dataset, ModelParams& mp,
                                   const PPOConfig& cfg,
                                   const TrainOptions& opts) {
  cfg.validate();
  mp.config.validate();
  if (dataset.empty()) throw ContractError("train: empty dataset");
  if (opts.dataset_passes == 0)
    throw ConfigError("train: dataset passes must be positive");

  AdamConfig adam;
  adam.lr = cfg.learning_rate;

  MemoryBank bank(mp.config.d_z(), mp.config.d_c, opts.bank_capacity, 0);
  std::vector<RolloutRecord> buffer;
  std::vector<TrainingMetrics> metrics;
  std::uint64_t sessions_seen = 0;
  std::uint64_t round = 0;
  std::uint64_t shuffle_epoch = 0;

  auto optimize_round = [&]() {
    if (buffer.empty()) return;
    ++round;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<std::size_t> order(buffer.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng =
          Rng::stream(cfg.seed, "minibatch-shuffle", shuffle_epoch++);
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[shuffle_rng.below(i)]);

      for (std::size_t start = 0; start < order.size();
           start += cfg.minibatch) {
        const std::size_t stop =
            std::min(order.size(), start + cfg.minibatch);
        std::vector<std::size_t> batch(order.begin() + start,
                                       order.begin() + stop);
        mp.params.zero_grads();
        total_loss(buffer, batch, mp, cfg, true, opts.freeze_backbone);
        adam_step(mp.params, adam, ++mp.adam_t);
      }
    }
    const LossBreakdown post = total_loss(buffer, mp, cfg, false);
    metrics.push_back(round_metrics(buffer, post, round, sessions_seen));
    buffer.clear();
  };

  for (std::size_t pass = 0; pass < opts.dataset_passes; ++pass) {
    // Encoders stay frozen through the opening passes so the backbone can
    // learn to read the stored answers while the retrieval keys and queries
    // hold still. Unfreezing them earlier lets the answer head lock onto the
    // directly observable cues first, and the backbone then resists the
    // reshaping that reading retrieved answers requires.
    adam.encoder_lr_scale =
        pass < opts.encoder_freeze_passes ? 0.0 : 1.0;
    for (const Session& session : dataset) {
      if (opts.use_belief && !opts.shared_bank)
        bank.clear(session.session_id);
      Rng action_rng = Rng::stream(
          cfg.seed, "action-sample",
          pass * 0x100000000ull + session.session_id);
      std::vector<RolloutRecord> records =
          rollout_session(session, bank, mp, action_rng, opts.use_belief);
      sessions_seen += 1;
      for (RolloutRecord& rec : records) buffer.push_back(std::move(rec));
      if (buffer.size() >= cfg.rollout_steps) optimize_round();
    }
  }
  optimize_round();
  return metrics;
}

EvalReport evaluate(const Dataset& dataset, ModelParams& mp,
                    const EvalOptions& opts) {
  mp.config.validate();

  EvalReport report;
  report.k_ans = mp.config.k_ans;
  report.confusion.assign(report.k_ans * report.k_ans, 0);

  MemoryBank bank(mp.config.d_z(), mp.config.d_c, opts.bank_capacity, 0);
  std::uint64_t hits = 0, ctx_hits = 0, obs_hits = 0;

  for (const Session& session : dataset) {
    if (opts.use_belief && !opts.shared_bank) bank.clear(session.session_id);
    Rng rng = Rng::stream(opts.seed, "eval-sample", session.session_id);
    std::uint64_t session_hits = 0;

    for (const QAStep& step : session.steps) {
      const Observation obs = observation_from(step);
      StepTrace trace = opts.use_belief ? forward_step(obs, bank, mp)
                                        : forward_nobelief(obs, mp);
      const Vec& probs = opts.use_answer_head ? softmax(trace.ce_logits)
                                              : trace.policy_probs;
      const std::size_t action =
          opts.greedy ? greedy_action(probs) : sample_action(probs, rng);
      const double reward = compute_reward(action, step.label);

      if (opts.use_belief)
        bank.insert(trace.z, context_payload(obs, mp),
                    static_cast<std::uint32_t>(action),
                    static_cast<float>(reward));

      report.steps += 1;
      if (step.label < report.k_ans && action < report.k_ans)
        report.confusion[step.label * report.k_ans + action] += 1;
      const bool hit = reward > 0.5;
      hits += hit;
      session_hits += hit;
      if (step.kind == StepKind::context) {
        report.steps_context += 1;
        ctx_hits += hit;
      } else {
        report.steps_observable += 1;
        obs_hits += hit;
      }
    }
    report.sessions += 1;
    report.per_session_accuracy.push_back(
        safe_ratio(session_hits, session.steps.size()));
  }

  report.accuracy_overall = safe_ratio(hits, report.steps);
  report.accuracy_context = safe_ratio(ctx_hits, report.steps_context);
  report.accuracy_observable = safe_ratio(obs_hits, report.steps_observable);
  report.mean_reward = report.accuracy_overall;
  return report;
}

void write_metrics(const std::vector<TrainingMetrics>& metrics,
                   const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  for (const TrainingMetrics& m : metrics) {
    nlohmann::json row{{"checkpoint", m.checkpoint},
                       {"sessions_seen", m.sessions_seen},
                       {"mean_reward", m.mean_reward},
                       {"accuracy_overall", m.accuracy_overall},
                       {"accuracy_context", m.accuracy_context},
                       {"accuracy_observable", m.accuracy_observable},
                       {"ce_loss", m.ce_loss},
                       {"ppo_objective", m.ppo_objective},
                       {"value_loss", m.value_loss},
                       {"entropy", m.entropy}};
    out << row.dump() << '\n';
  }
  if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace beliefqa
