#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beliefqa/errors.hpp"
#include "beliefqa/model.hpp"
#include "beliefqa/numerics.hpp"

namespace beliefqa {

/// Generator settings for the synthetic partially observable QA benchmark.
/// Each session hides one intent; cue-bearing steps leak it through a
/// prototype planted in the first cue_dim visual coordinates, and context
/// questions are answerable only by recovering it from earlier steps.
struct GenConfig {
  std::uint64_t seed = 0;
  std::size_t intents = 8;        // distinct latent intents
  std::size_t steps = 20;         // steps per session
  std::size_t sessions = 3000;
  double sigma = 0.1;             // cue-block noise scale
  double context_fraction = 0.5;  // probability a step asks a context question
  double cue_fraction = 0.4;      // target fraction of cue-bearing steps
  std::size_t k_ans = 4;
  std::size_t d_v = 48;
  std::size_t d_l = 24;
  std::size_t cue_dim = 16;
  // First session id to emit; lets a second invocation extend the same
  // universe (identical prototypes and probes) with fresh sessions.
  std::uint64_t session_offset = 0;

  void validate() const;
};

enum class StepKind { observable, context };

struct QAStep {
  std::uint64_t session_id = 0;
  std::size_t step = 0;
  StepKind kind = StepKind::observable;
  Vec visual_raw;
  Vec language_raw;
  std::size_t k_ans = 0;
  std::size_t label = 0;
  bool cue_present = false;
  std::size_t intent_truth = 0;  // generator ground truth, analysis only
};

struct Session {
  std::uint64_t session_id = 0;
  std::size_t intent = 0;
  std::vector<QAStep> steps;
};

using Dataset = std::vector<Session>;

/// Unit prototype per intent in R^cue_dim, pairwise |dot| < 0.3, drawn by
/// rejection from the seed's prototype stream. Throws ConfigError when the
/// separation cannot be met for the requested count and dimension.
std::vector<Vec> make_intent_prototypes(const GenConfig& cfg);

/// k_ans orthonormal probes over the visual vector, supported on the
/// non-cue coordinates. The observable label is their argmax response.
std::vector<Vec> make_observable_probes(const GenConfig& cfg);

Dataset generate(const GenConfig& cfg);

struct SplitRatios {
  double train = 1.0;
  double validation = 0.0;
  double test = 0.0;
};

struct SplitResult {
  Dataset train, validation, test;
};

/// Session-level partition, deterministic per seed. A ratio of zero means an
/// intentionally empty part; a positive ratio that rounds to zero sessions
/// is a ConfigError.
SplitResult split(const Dataset& dataset, const SplitRatios& ratios,
                  std::uint64_t seed);

/// JSON lines, one step per line, full float round trip.
void write_dataset(const Dataset& dataset, const std::string& path);
Dataset read_dataset(const std::string& path);

/// Model-facing view: raw features and candidate count only, never the
/// label, kind, or intent.
Observation observation_from(const QAStep& step);

}  // namespace beliefqa
