#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "beliefqa/model.hpp"

using namespace beliefqa;

static std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

static Observation random_obs(Rng& r, const ModelConfig& cfg) {
  Observation o;
  o.visual_raw.resize(cfg.d_v);
  o.language_raw.resize(cfg.d_l);
  for (auto& v : o.visual_raw) v = r.normal();
  for (auto& v : o.language_raw) v = r.normal();
  o.candidate_count = cfg.k_ans;
  return o;
}

static ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d_v = 10;
  cfg.d_l = 6;
  cfg.d_zv = 5;
  cfg.d_zl = 4;
  cfg.d_c = 3;
  cfg.d_h = 7;
  cfg.k_ans = 4;
  cfg.retrieval_k = 3;
  return cfg;
}

TEST_CASE("init registers the expected matrices and zeroes the heads") {
  ModelParams mp = ModelParams::init(ModelConfig{}, 7);
  std::vector<std::string> expected = {
      "enc_vis.W",   "enc_vis.b",   "enc_lang.W",    "enc_lang.b",
      "backbone1.W", "backbone1.b", "backbone2.W",   "backbone2.b",
      "ce_head.W",   "ce_head.b",   "policy_head.W", "policy_head.b",
      "value_head.W", "value_head.b"};
  CHECK(mp.params.names() == expected);
  CHECK(mp.params.param("enc_vis.W").rows == 16);
  CHECK(mp.params.param("enc_vis.W").cols == 48);
  CHECK(mp.params.param("backbone1.W").cols == 32 + 16);
  for (double v : mp.params.param("ce_head.W").data) CHECK(v == 0.0);
  for (double v : mp.params.param("value_head.W").data) CHECK(v == 0.0);
  CHECK_FALSE(mp.params.has("context_projection"));
  CHECK(mp.context_projection.rows == 16);
  CHECK(mp.context_projection.cols == 48 + 24);

  ModelConfig shared;
  shared.share_heads = true;
  ModelParams mps = ModelParams::init(shared, 7);
  CHECK_FALSE(mps.params.has("policy_head.W"));
}

TEST_CASE("fresh model answers uniformly with zero value") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 3);
  Rng r(1);
  StepTrace t = forward_nobelief(random_obs(r, cfg), mp);
  for (double p : t.policy_probs) CHECK(std::fabs(p - 0.25) < 1e-12);
  CHECK(t.value == 0.0);
  for (double v : t.ce_logits) CHECK(v == 0.0);
}

TEST_CASE("embed output is unit norm") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 11);
  Rng r(2);
  for (int i = 0; i < 100; ++i) {
    JointEmbedding z = embed(random_obs(r, cfg), mp);
    double n = 0.0;
    for (double v : z.values) n += v * v;
    CHECK(std::fabs(std::sqrt(n) - 1.0) < 1e-9);
    CHECK(z.normalized);
  }
}

TEST_CASE("embed is deterministic and validates shapes") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 11);
  Rng r(3);
  Observation o = random_obs(r, cfg);
  CHECK(embed(o, mp).values == embed(o, mp).values);

  Observation bad = o;
  bad.visual_raw.pop_back();
  CHECK_THROWS_AS(embed(bad, mp), ShapeError);
}

TEST_CASE("zero observation through zero-bias encoders is degenerate") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 11);
  Observation o;
  o.visual_raw.assign(cfg.d_v, 0.0);
  o.language_raw.assign(cfg.d_l, 0.0);
  o.candidate_count = cfg.k_ans;
  CHECK_THROWS_AS(embed(o, mp), NumericError);
}

TEST_CASE("identity visual encoder points the embedding at the input axis") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 11);
  auto& W = mp.params.param("enc_vis.W");
  W.fill(0.0);
  for (std::size_t i = 0; i < cfg.d_zv; ++i) W.at(i, i) = 1.0;
  mp.params.param("enc_vis.b").fill(0.0);

  Observation o;
  o.visual_raw.assign(cfg.d_v, 0.0);
  o.visual_raw[0] = 1.0;
  o.language_raw.assign(cfg.d_l, 0.0);
  o.candidate_count = cfg.k_ans;

  JointEmbedding z = embed(o, mp);
  CHECK(std::fabs(z.values[0] - 1.0) < 1e-12);
  for (std::size_t i = 1; i < z.values.size(); ++i)
    CHECK(std::fabs(z.values[i]) < 1e-12);
}

TEST_CASE("context payload is the fixed projection of the raw features") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 11);
  Rng r(4);
  Observation o = random_obs(r, cfg);

  Vec x = o.visual_raw;
  x.insert(x.end(), o.language_raw.begin(), o.language_raw.end());
  Vec expect(cfg.d_c, 0.0);
  for (std::size_t i = 0; i < cfg.d_c; ++i)
    for (std::size_t j = 0; j < x.size(); ++j)
      expect[i] += mp.context_projection.at(i, j) * x[j];
  CHECK(context_payload(o, mp) == expect);

  // Zero input maps to zero; a different master seed changes the projection.
  Observation zero;
  zero.visual_raw.assign(cfg.d_v, 0.0);
  zero.language_raw.assign(cfg.d_l, 0.0);
  zero.candidate_count = cfg.k_ans;
  for (double v : context_payload(zero, mp)) CHECK(v == 0.0);

  ModelParams other = ModelParams::init(cfg, 12);
  CHECK(context_payload(o, other) != context_payload(o, mp));
  CHECK(other.context_seed != mp.context_seed);
}

TEST_CASE("fuse handles a zero belief and reacts to belief changes") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 19);
  Rng r(5);
  JointEmbedding z = embed(random_obs(r, cfg), mp);

  Vec zero_belief(cfg.d_c, 0.0);
  FuseResult cold = fuse(z.values, zero_belief, mp);
  for (double v : cold.h) CHECK(std::isfinite(v));

  Vec b1(cfg.d_c), b2(cfg.d_c);
  for (auto& v : b1) v = r.normal();
  for (auto& v : b2) v = r.normal();
  FuseResult f1 = fuse(z.values, b1, mp);
  FuseResult f2 = fuse(z.values, b2, mp);
  double diff = 0.0;
  for (std::size_t i = 0; i < cfg.d_h; ++i) diff += std::fabs(f1.h[i] - f2.h[i]);
  CHECK(diff > 1e-6);

  CHECK_THROWS_AS(fuse(z.values, Vec(cfg.d_c + 1, 0.0), mp), ShapeError);
}

TEST_CASE("a linear backbone is affine in the belief") {
  ModelConfig cfg = small_config();
  cfg.linear_backbone = true;
  ModelParams mp = ModelParams::init(cfg, 19);
  Rng r(6);
  JointEmbedding z = embed(random_obs(r, cfg), mp);

  Vec b0(cfg.d_c), dir(cfg.d_c);
  for (auto& v : b0) v = r.normal();
  for (auto& v : dir) v = r.normal();
  auto at = [&](double alpha) {
    Vec b(cfg.d_c);
    for (std::size_t i = 0; i < cfg.d_c; ++i) b[i] = b0[i] + alpha * dir[i];
    return fuse(z.values, b, mp).h;
  };
  Vec h0 = at(0.0), h1 = at(1.0), h2 = at(2.0);
  for (std::size_t i = 0; i < cfg.d_h; ++i)
    CHECK(std::fabs((h2[i] - h1[i]) - (h1[i] - h0[i])) < 1e-9);
}

TEST_CASE("policy softmax matches the closed form on a one-hot logit") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 19);
  mp.params.param("policy_head.W").fill(0.0);
  auto& b = mp.params.param("policy_head.b");
  b.fill(0.0);
  b.at(0, 0) = 1.0;

  Rng r(7);
  JointEmbedding z = embed(random_obs(r, cfg), mp);
  FuseResult f = fuse(z.values, Vec(cfg.d_c, 0.0), mp);
  HeadsOut heads = heads_forward(f.h, mp);

  const double e = std::exp(1.0);
  CHECK(std::fabs(heads.policy_probs[0] - e / (e + 3.0)) < 1e-15);
  CHECK(std::fabs(heads.policy_probs[0] - 0.4754) < 1e-4);
  CHECK(std::fabs(heads.policy_probs[1] - 0.1749) < 1e-4);
  CHECK(std::fabs(heads.policy_probs[2] - 0.1749) < 1e-4);
}

TEST_CASE("shifting all answer logits never changes the decision") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 21);
  Rng r(8);
  for (auto& v : mp.params.param("ce_head.W").data) v = r.normal();
  Observation o = random_obs(r, cfg);
  StepTrace t = forward_nobelief(o, mp);
  std::size_t before = greedy_action(softmax(t.ce_logits));

  mp.params.param("ce_head.b").fill(17.5);
  StepTrace shifted = forward_nobelief(o, mp);
  CHECK(greedy_action(softmax(shifted.ce_logits)) == before);
}

TEST_CASE("shared heads alias the answer head") {
  ModelConfig cfg = small_config();
  cfg.share_heads = true;
  ModelParams mp = ModelParams::init(cfg, 23);
  Rng r(9);
  for (auto& v : mp.params.param("ce_head.W").data) v = r.normal() * 0.3;
  StepTrace t = forward_nobelief(random_obs(r, cfg), mp);
  CHECK(t.policy_logits == t.ce_logits);
}

TEST_CASE("sampling follows the distribution, greedy breaks ties low") {
  Rng r(10);
  for (int i = 0; i < 50; ++i)
    CHECK(sample_action({1.0, 0.0, 0.0, 0.0}, r) == 0);

  std::vector<int> counts(4, 0);
  for (int i = 0; i < 100000; ++i)
    counts[sample_action({0.25, 0.25, 0.25, 0.25}, r)]++;
  for (int c : counts) CHECK(std::fabs(c / 100000.0 - 0.25) < 0.01);

  CHECK(greedy_action({0.3, 0.3, 0.2, 0.2}) == 0);
  CHECK(greedy_action({0.1, 0.2, 0.5, 0.2}) == 2);
  CHECK_THROWS_AS(sample_action({0.3, 0.3}, r), ContractError);
  CHECK_THROWS_AS(sample_action({-0.5, 1.5}, r), ContractError);
}

TEST_CASE("forward over a populated bank pools retrieved payloads") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 29);
  MemoryBank bank(cfg.d_z(), cfg.d_c, 64);
  Rng r(11);
  for (int i = 0; i < 10; ++i) {
    Vec key(cfg.d_z()), val(cfg.d_c);
    for (auto& v : key) v = r.normal();
    for (auto& v : val) v = r.normal();
    bank.insert(key, val, 0, 1.0);
  }
  StepTrace t = forward_step(random_obs(r, cfg), bank, mp);
  CHECK(t.retrieved_keys.size() == cfg.retrieval_k);
  CHECK_FALSE(t.cold_start());
  double wsum = 0.0;
  for (double w : t.weights) wsum += w;
  CHECK(std::fabs(wsum - 1.0) < 1e-9);
  for (double v : t.h) CHECK(std::isfinite(v));

  MemoryBank empty_bank(cfg.d_z(), cfg.d_c, 64);
  StepTrace cold = forward_step(random_obs(r, cfg), empty_bank, mp);
  CHECK(cold.cold_start());
  CHECK(cold.belief == Vec(cfg.d_c, 0.0));
  CHECK(cold.retrieval.cold_start);
}

TEST_CASE("backward matches finite differences through the whole network") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 31);
  // Random heads so every output path carries signal.
  Rng hr(12);
  for (const char* n : {"ce_head.W", "policy_head.W", "value_head.W"})
    for (auto& v : mp.params.param(n).data) v = hr.normal() * 0.3;

  Rng r(13);
  std::vector<Observation> observations;
  std::vector<std::vector<Vec>> keys(3), payloads(3);
  for (int s = 0; s < 3; ++s) {
    observations.push_back(random_obs(r, cfg));
    const std::size_t n = (s == 0) ? 0 : 2 + s;  // include a cold-start step
    for (std::size_t k = 0; k < n; ++k) {
      Vec key(cfg.d_z()), pay(cfg.d_c);
      for (auto& v : key) v = r.normal();
      double norm = 0.0;
      for (double v : key) norm += v * v;
      norm = std::sqrt(norm);
      for (auto& v : key) v /= norm;
      for (auto& v : pay) v = r.normal();
      keys[s].push_back(key);
      payloads[s].push_back(pay);
    }
  }
  Vec c_ce(cfg.k_ans), c_pol(cfg.k_ans);
  for (auto& v : c_ce) v = r.normal();
  for (auto& v : c_pol) v = r.normal();
  const double c_val = r.normal();

  LossFn f = [&](bool with_grad) {
    double loss = 0.0;
    for (int s = 0; s < 3; ++s) {
      StepTrace t = forward_snapshot(observations[s], keys[s], payloads[s], mp);
      for (std::size_t j = 0; j < cfg.k_ans; ++j)
        loss += c_ce[j] * t.ce_logits[j] + c_pol[j] * t.policy_logits[j];
      loss += c_val * t.value;
      if (with_grad) backward_step(t, c_ce, c_pol, c_val, mp);
    }
    return loss;
  };

  Rng probe(14);
  double worst = grad_check(f, mp.params, 8, 1e-5, probe);
  CHECK(worst < 1e-6);
}

TEST_CASE("blocking the policy path keeps its gradient out of the trunk") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 37);
  Rng r(15);
  for (auto& v : mp.params.param("policy_head.W").data) v = r.normal() * 0.3;
  StepTrace t = forward_nobelief(random_obs(r, cfg), mp);

  Vec d_pol(cfg.k_ans);
  for (auto& v : d_pol) v = r.normal();
  Vec zeros(cfg.k_ans, 0.0);

  mp.params.zero_grads();
  backward_step(t, zeros, d_pol, 0.0, mp, true);
  for (const char* n : {"backbone1.W", "backbone2.W", "enc_vis.W", "enc_lang.W"})
    for (double g : mp.params.grad(n).data) CHECK(g == 0.0);
  double head_grad = 0.0;
  for (double g : mp.params.grad("policy_head.W").data)
    head_grad += std::fabs(g);
  CHECK(head_grad > 0.0);

  mp.params.zero_grads();
  backward_step(t, zeros, d_pol, 0.0, mp, false);
  double trunk_grad = 0.0;
  for (double g : mp.params.grad("backbone1.W").data)
    trunk_grad += std::fabs(g);
  CHECK(trunk_grad > 0.0);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 41);
  Rng r(16);
  for (const auto& name : mp.params.names()) {
    for (auto& v : mp.params.param(name).data) v = r.normal();
    for (auto& v : mp.params.moment1(name).data) v = r.normal();
    for (auto& v : mp.params.moment2(name).data) v = std::fabs(r.normal());
  }
  mp.adam_t = 17;

  std::string path = tmp_path("beliefqa_ckpt.bin");
  std::uint64_t bytes = save_checkpoint(mp, path);
  CHECK(bytes == std::filesystem::file_size(path));

  ModelParams loaded = load_checkpoint(path);
  CHECK(loaded.config.d_v == cfg.d_v);
  CHECK(loaded.config.k_ans == cfg.k_ans);
  CHECK(loaded.config.retrieval_k == cfg.retrieval_k);
  CHECK(loaded.config.temperature == cfg.temperature);
  CHECK(loaded.adam_t == 17);
  CHECK(loaded.context_seed == mp.context_seed);
  CHECK(loaded.context_projection.data == mp.context_projection.data);
  for (const auto& name : mp.params.names()) {
    CHECK(loaded.params.param(name).data == mp.params.param(name).data);
    CHECK(loaded.params.moment1(name).data == mp.params.moment1(name).data);
    CHECK(loaded.params.moment2(name).data == mp.params.moment2(name).data);
  }

  std::string path2 = tmp_path("beliefqa_ckpt2.bin");
  save_checkpoint(loaded, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), {});
  std::string c2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(c1 == c2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint loader rejects malformed files") {
  ModelConfig cfg = small_config();
  ModelParams mp = ModelParams::init(cfg, 43);
  std::string path = tmp_path("beliefqa_ckpt_bad.bin");

  {
    std::ofstream f(path, std::ios::binary);
    f << "WRONGMAGICDATA";
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  save_checkpoint(mp, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 9);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  save_checkpoint(mp, path);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    char v2[4] = {9, 0, 0, 0};
    f.write(v2, 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);

  save_checkpoint(mp, path);
  {
    std::ofstream f(path, std::ios::binary | std::ios::app);
    f << "zz";
  }
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  cfg.k_ans = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.d_h = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_NOTHROW(ModelConfig{}.validate());
}
