#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "beliefqa/errors.hpp"
#include "beliefqa/memory_bank.hpp"
#include "beliefqa/numerics.hpp"
#include "beliefqa/rng.hpp"

namespace beliefqa {

struct ModelConfig {
  std::size_t d_v = 48;   // raw visual feature length
  std::size_t d_l = 24;   // raw language feature length
  std::size_t d_zv = 16;  // visual embedding length
  std::size_t d_zl = 16;  // language embedding length
  std::size_t d_c = 16;   // context payload / belief length
  std::size_t d_h = 32;   // latent state length
  std::size_t k_ans = 4;  // answer candidates
  std::size_t retrieval_k = 5;
  double temperature = 1.0;
  bool share_heads = false;     // policy head aliases the answer head
  bool linear_backbone = false; // drop the backbone tanh (linearity probes)

  std::size_t d_z() const { return d_zv + d_zl; }
  void validate() const;
};

struct Observation {
  Vec visual_raw;
  Vec language_raw;
  std::size_t candidate_count = 0;
};

struct JointEmbedding {
  Vec values;
  bool normalized = false;
};

/// All trainable matrices plus the fixed context projection. The projection
/// is regenerated from its seed, never trained, and never serialized as data.
struct ModelParams {
  ModelConfig config;
  ParamSet params;
  DenseMatrix context_projection;  // d_c x (d_v + d_l)
  std::uint64_t context_seed = 0;
  std::uint64_t adam_t = 0;  // optimizer steps taken so far

  static ModelParams init(const ModelConfig& cfg, std::uint64_t master_seed);
};

/// Everything one forward pass touches, kept so the backward pass and the
/// optimization epochs can replay it. The retrieved keys/payloads are frozen
/// double-precision snapshots: later epochs recompute similarities from the
/// current embedding against exactly this set.
struct StepTrace {
  Observation obs;
  Vec vis_act, lang_act;  // encoder tanh outputs
  double prenorm = 0.0;   // embedding norm before normalization
  Vec z;                  // unit joint embedding

  RetrievalResult retrieval;  // provenance (empty when belief disabled)
  std::vector<Vec> retrieved_keys;
  std::vector<Vec> retrieved_payloads;
  Vec sims, weights;  // recomputed from z over the snapshot
  Vec belief;         // d_c, zero on cold start

  Vec fuse_in;  // concat(z, belief)
  Vec h1, h;    // backbone activations
  Vec ce_logits, policy_logits, policy_probs;
  double value = 0.0;

  bool cold_start() const { return retrieved_keys.empty(); }
};

struct FuseResult {
  Vec input, h1, h;
};

struct HeadsOut {
  Vec ce_logits, policy_logits, policy_probs;
  double value = 0.0;
};

/// z = normalize(concat(tanh(Wv v + bv), tanh(Wl l + bl))). A degenerate
/// zero-norm pre-normalization embedding raises NumericError.
JointEmbedding embed(const Observation& obs, const ModelParams& mp);

/// c = P concat(v, l) through the fixed seeded projection.
Vec context_payload(const Observation& obs, const ModelParams& mp);

/// h = backbone(concat(z, b)); two affine layers, tanh unless the config
/// asks for a linear backbone.
FuseResult fuse(const Vec& z, const Vec& belief, const ModelParams& mp);

/// Answer logits, policy logits (aliasing answer logits when heads are
/// shared), policy softmax, and the scalar value.
HeadsOut heads_forward(const Vec& h, const ModelParams& mp);

/// Full pass against a frozen retrieved set; an empty snapshot means a zero
/// belief (cold start and belief-off share this path).
StepTrace forward_snapshot(const Observation& obs,
                           const std::vector<Vec>& keys,
                           const std::vector<Vec>& payloads,
                           const ModelParams& mp);

/// Full pass with live retrieval from the bank.
StepTrace forward_step(const Observation& obs, const MemoryBank& bank,
                       const ModelParams& mp);

/// Full pass with belief pinned to zero (the no-belief ablation).
StepTrace forward_nobelief(const Observation& obs, const ModelParams& mp);

/// Reverse pass: routes head-output gradients through the backbone, the
/// belief attention (query side only), the normalization, and the encoders,
/// accumulating into mp.params. block_policy_into_backbone stops the policy
/// logit gradient at the policy head, leaving encoders and backbone to the
/// other heads.
void backward_step(const StepTrace& trace, const Vec& d_ce_logits,
                   const Vec& d_policy_logits, double d_value,
                   ModelParams& mp, bool block_policy_into_backbone = false);

/// Inverse-CDF draw from a probability vector on the given stream.
std::size_t sample_action(const Vec& probs, Rng& rng);

/// Argmax with lowest-index tie-break.
std::size_t greedy_action(const Vec& probs);

/// Checkpoint: config, optimizer state, every matrix with its moments, and
/// the context projection seed. Returns the byte count.
std::uint64_t save_checkpoint(const ModelParams& mp, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace beliefqa
