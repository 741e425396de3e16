#include <benchmark/benchmark.h>

#include "beliefqa/numerics.hpp"
#include "beliefqa/rng.hpp"
#include "beliefqa/training.hpp"

using namespace beliefqa;

namespace {

Vec random_vec(Rng& rng, std::size_t n) {
  Vec v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

Observation random_obs(Rng& rng, const ModelConfig& mc) {
  Observation obs;
  obs.visual_raw = random_vec(rng, mc.d_v);
  obs.language_raw = random_vec(rng, mc.d_l);
  obs.candidate_count = mc.k_ans;
  return obs;
}

MemoryBank filled_bank(Rng& rng, const ModelConfig& mc, std::size_t count) {
  MemoryBank bank(mc.d_z(), mc.d_c, std::max<std::size_t>(count, 8), 0);
  for (std::size_t i = 0; i < count; ++i)
    bank.insert(random_vec(rng, mc.d_z()), random_vec(rng, mc.d_c), 0, 0.0);
  return bank;
}

}  // namespace

static void BM_AffineForward(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng r(1);
  DenseMatrix W(n, n), b(n, 1);
  for (auto& v : W.data) v = r.normal();
  Vec x(n);
  for (auto& v : x) v = r.normal();
  for (auto _ : state) {
    Vec y = affine_forward(x, W, b);
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_AffineForward)->Arg(32)->Arg(128);

static void BM_RetrieveTopK(benchmark::State& state) {
  const std::size_t count = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  ModelConfig mc;
  MemoryBank bank = filled_bank(rng, mc, count);
  const Vec query = random_vec(rng, mc.d_z());
  for (auto _ : state) {
    RetrievalResult res = bank.retrieve_topk(query, mc.retrieval_k);
    benchmark::DoNotOptimize(res.indices.data());
  }
  state.SetItemsProcessed(state.iterations() * count);
}
BENCHMARK(BM_RetrieveTopK)->Arg(64)->Arg(512)->Arg(4096);

static void BM_ForwardStep(benchmark::State& state) {
  const std::size_t count = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  ModelConfig mc;
  ModelParams mp = ModelParams::init(mc, 5);
  MemoryBank bank = filled_bank(rng, mc, count);
  const Observation obs = random_obs(rng, mc);
  for (auto _ : state) {
    StepTrace trace = forward_step(obs, bank, mp);
    benchmark::DoNotOptimize(trace.policy_probs.data());
  }
}
BENCHMARK(BM_ForwardStep)->Arg(0)->Arg(512)->Arg(4096);

static void BM_TotalLossBatch(benchmark::State& state) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  ModelConfig mc;
  ModelParams mp = ModelParams::init(mc, 11);
  MemoryBank bank = filled_bank(rng, mc, 256);
  std::vector<RolloutRecord> records;
  for (std::size_t i = 0; i < batch; ++i) {
    RolloutRecord rec;
    rec.obs = random_obs(rng, mc);
    rec.label = i % mc.k_ans;
    rec.action = (i + 1) % mc.k_ans;
    StepTrace trace = forward_step(rec.obs, bank, mp);
    for (const Vec& key : trace.retrieved_keys) rec.retrieved_keys.push_back(key);
    for (const Vec& pay : trace.retrieved_payloads)
      rec.retrieved_payloads.push_back(pay);
    rec.old_log_prob = std::log(trace.policy_probs[rec.action]);
    rec.value_rollout = trace.value;
    rec.reward = rec.action == rec.label ? 1.0 : 0.0;
    records.push_back(std::move(rec));
  }
  const PPOConfig cfg;
  for (auto _ : state) {
    mp.params.zero_grads();
    LossBreakdown loss = total_loss(records, mp, cfg, true);
    benchmark::DoNotOptimize(loss.total);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_TotalLossBatch)->Arg(64)->Arg(512);

BENCHMARK_MAIN();
