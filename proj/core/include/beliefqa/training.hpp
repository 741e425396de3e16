#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beliefqa/env.hpp"
#include "beliefqa/memory_bank.hpp"
#include "beliefqa/model.hpp"

namespace beliefqa {

// One decision taken during rollout, with everything needed to recompute the
// loss later under updated parameters: the raw observation, the frozen
// retrieval snapshot, and the behavior policy's log-probability and value.
struct RolloutRecord {
  Observation obs;
  StepKind kind = StepKind::observable;
  std::uint64_t session_id = 0;
  std::uint32_t step = 0;
  std::size_t label = 0;
  std::size_t action = 0;
  double old_log_prob = 0.0;
  double reward = 0.0;
  double value_rollout = 0.0;
  Vec h;
  std::vector<Vec> retrieved_keys;
  std::vector<Vec> retrieved_payloads;
};

struct PPOConfig {
  double clip = 0.2;
  std::size_t epochs = 4;
  std::size_t minibatch = 64;
  std::size_t rollout_steps = 512;
  double ce_weight = 1.0;
  double ppo_weight = 1.0;
  double value_weight = 0.5;
  double entropy_coef = 0.01;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  void validate() const;
};

// Per-term view of one loss evaluation. `ppo_objective` is the clipped
// surrogate being maximized, so it enters `total` with a minus sign.
struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double ppo_objective = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

struct TrainOptions {
  bool use_belief = true;
  bool freeze_backbone = false;
  bool shared_bank = false;
  std::size_t dataset_passes = 1;
  // Encoders are held fixed for the first this-many passes and update
  // afterward. The backbone needs the early passes to pick up the stored
  // answers from a stationary retrieval geometry; once it reads them, the
  // late passes let the encoders sharpen both the cue features and the
  // retrieval keys without yanking that circuit's inputs around.
  std::size_t encoder_freeze_passes = 10;
  std::size_t bank_capacity = 4096;
};

struct TrainingMetrics {
  std::uint64_t checkpoint = 0;
  std::uint64_t sessions_seen = 0;
  double mean_reward = 0.0;
  double accuracy_overall = 0.0;
  double accuracy_context = 0.0;
  double accuracy_observable = 0.0;
  double ce_loss = 0.0;
  double ppo_objective = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
};

struct EvalOptions {
  bool use_belief = true;
  bool greedy = true;
  // Score with the supervised answer head instead of the policy head.
  bool use_answer_head = false;
  bool shared_bank = false;
  std::size_t bank_capacity = 4096;
  std::uint64_t seed = 0;
};

struct EvalReport {
  std::uint64_t sessions = 0;
  std::uint64_t steps = 0;
  std::uint64_t steps_context = 0;
  std::uint64_t steps_observable = 0;
  std::size_t k_ans = 0;
  double accuracy_overall = 0.0;
  double accuracy_context = 0.0;
  double accuracy_observable = 0.0;
  double mean_reward = 0.0;
  std::vector<std::uint64_t> confusion;  // row = true label, col = prediction
  std::vector<double> per_session_accuracy;
};

double compute_reward(std::size_t action, std::size_t label);

// One-step advantage against the value estimate frozen at rollout time.
double advantage(const RolloutRecord& rec);

// Clipped surrogate min(r * adv, clip(r, 1-eps, 1+eps) * adv) with
// r = exp(new_log_prob - old_log_prob).
double ppo_surrogate(double new_log_prob, double old_log_prob, double adv,
                     double clip);

// Mean loss over the indexed records, recomputing every forward pass against
// each record's frozen retrieval snapshot so the result depends only on the
// current parameters. With `with_grad` the gradients accumulate into
// `mp.params`; callers zero them first. `freeze_backbone` keeps the policy
// and entropy terms out of the shared trunk.
LossBreakdown total_loss(const std::vector<RolloutRecord>& records,
                         const std::vector<std::size_t>& indices,
                         ModelParams& mp, const PPOConfig& cfg, bool with_grad,
                         bool freeze_backbone = false);
LossBreakdown total_loss(const std::vector<RolloutRecord>& records,
                         ModelParams& mp, const PPOConfig& cfg, bool with_grad,
                         bool freeze_backbone = false);

// Plays one session under the current policy, sampling actions from `rng`.
// With `use_belief` each step retrieves from `bank` before acting and writes
// its own (embedding, payload, action, reward) entry after acting; without it
// the bank is never touched and the belief input stays zero.
std::vector<RolloutRecord> rollout_session(const Session& session,
                                           MemoryBank& bank, ModelParams& mp,
                                           Rng& rng, bool use_belief);

// Full training driver: collects rollouts session by session, runs the
// clipped-surrogate updates once the buffer reaches the rollout horizon, and
// emits one metrics row per optimization round.
std::vector<TrainingMetrics> train(const Dataset& dataset, ModelParams& mp,
                                   const PPOConfig& cfg,
                                   const TrainOptions& opts);

EvalReport evaluate(const Dataset& dataset, ModelParams& mp,
                    const EvalOptions& opts);

// One JSON object per line, keys in alphabetical order.
void write_metrics(const std::vector<TrainingMetrics>& metrics,
                   const std::string& path);

}  // namespace beliefqa
