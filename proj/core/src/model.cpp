#include "beliefqa/model.hpp"

#include <algorithm>
#include <cmath>

#include "beliefqa/io.hpp"

namespace beliefqa {

namespace {

constexpr char kMagic[4] = {'B', 'M', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

// Trainable matrices in registration order; the checkpoint writes them in
// exactly this order.
void register_matrices(ParamSet& ps, const ModelConfig& cfg) {
  ps.add("enc_vis.W", cfg.d_zv, cfg.d_v);
  ps.add("enc_vis.b", cfg.d_zv, 1);
  ps.add("enc_lang.W", cfg.d_zl, cfg.d_l);
  ps.add("enc_lang.b", cfg.d_zl, 1);
  ps.add("backbone1.W", cfg.d_h, cfg.d_z() + cfg.d_c);
  ps.add("backbone1.b", cfg.d_h, 1);
  ps.add("backbone2.W", cfg.d_h, cfg.d_h);
  ps.add("backbone2.b", cfg.d_h, 1);
  ps.add("ce_head.W", cfg.k_ans, cfg.d_h);
  ps.add("ce_head.b", cfg.k_ans, 1);
  if (!cfg.share_heads) {
    ps.add("policy_head.W", cfg.k_ans, cfg.d_h);
    ps.add("policy_head.b", cfg.k_ans, 1);
  }
  ps.add("value_head.W", 1, cfg.d_h);
  ps.add("value_head.b", 1, 1);
}

DenseMatrix make_context_projection(std::uint64_t seed, std::size_t d_c,
                                    std::size_t d_in) {
  Rng rng(seed);
  DenseMatrix P(d_c, d_in);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (auto& v : P.data) v = rng.normal() * scale;
  return P;
}

double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct EmbParts {
  Vec vis_act, lang_act;
  double prenorm = 0.0;
  Vec z;
};

EmbParts compute_embedding(const Observation& obs, const ModelParams& mp) {
  const auto& cfg = mp.config;
  if (obs.visual_raw.size() != cfg.d_v || obs.language_raw.size() != cfg.d_l)
    throw ShapeError("embed: observation is " +
                     std::to_string(obs.visual_raw.size()) + "/" +
                     std::to_string(obs.language_raw.size()) +
                     ", model expects " + std::to_string(cfg.d_v) + "/" +
                     std::to_string(cfg.d_l));
  EmbParts p;
  p.vis_act = tanh_forward(affine_forward(obs.visual_raw,
                                          mp.params.param("enc_vis.W"),
                                          mp.params.param("enc_vis.b")));
  p.lang_act = tanh_forward(affine_forward(obs.language_raw,
                                           mp.params.param("enc_lang.W"),
                                           mp.params.param("enc_lang.b")));
  Vec u = p.vis_act;
  u.insert(u.end(), p.lang_act.begin(), p.lang_act.end());
  p.prenorm = std::sqrt(dot(u, u));
  if (p.prenorm < 1e-12)
    throw NumericError("embed: zero-norm embedding before normalization");
  p.z.resize(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) p.z[i] = u[i] / p.prenorm;
  return p;
}

StepTrace finish_forward(const Observation& obs, EmbParts parts,
                         std::vector<Vec> keys, std::vector<Vec> payloads,
                         RetrievalResult provenance, const ModelParams& mp) {
  const auto& cfg = mp.config;
  if (obs.candidate_count != cfg.k_ans)
    throw ShapeError("forward: observation offers " +
                     std::to_string(obs.candidate_count) +
                     " candidates, model expects " +
                     std::to_string(cfg.k_ans));
  if (keys.size() != payloads.size())
    throw ShapeError("forward: key/payload snapshot lengths differ");

  StepTrace t;
  t.obs = obs;
  t.vis_act = std::move(parts.vis_act);
  t.lang_act = std::move(parts.lang_act);
  t.prenorm = parts.prenorm;
  t.z = std::move(parts.z);
  t.retrieval = std::move(provenance);
  t.retrieved_keys = std::move(keys);
  t.retrieved_payloads = std::move(payloads);

  if (!t.retrieved_keys.empty()) {
    t.sims.resize(t.retrieved_keys.size());
    for (std::size_t k = 0; k < t.retrieved_keys.size(); ++k) {
      if (t.retrieved_keys[k].size() != cfg.d_z() ||
          t.retrieved_payloads[k].size() != cfg.d_c)
        throw ShapeError("forward: snapshot entry has wrong dimensions");
      t.sims[k] = dot(t.z, t.retrieved_keys[k]);
    }
    Vec scaled = t.sims;
    for (double& s : scaled) s /= cfg.temperature;
    t.weights = softmax(scaled);
    t.belief.assign(cfg.d_c, 0.0);
    for (std::size_t k = 0; k < t.retrieved_keys.size(); ++k)
      for (std::size_t i = 0; i < cfg.d_c; ++i)
        t.belief[i] += t.weights[k] * t.retrieved_payloads[k][i];
  } else {
    t.belief.assign(cfg.d_c, 0.0);
  }

  t.fuse_in = t.z;
  t.fuse_in.insert(t.fuse_in.end(), t.belief.begin(), t.belief.end());
  Vec a1 = affine_forward(t.fuse_in, mp.params.param("backbone1.W"),
                          mp.params.param("backbone1.b"));
  t.h1 = cfg.linear_backbone ? a1 : tanh_forward(a1);
  Vec a2 = affine_forward(t.h1, mp.params.param("backbone2.W"),
                          mp.params.param("backbone2.b"));
  t.h = cfg.linear_backbone ? a2 : tanh_forward(a2);

  HeadsOut heads = heads_forward(t.h, mp);
  t.ce_logits = std::move(heads.ce_logits);
  t.policy_logits = std::move(heads.policy_logits);
  t.policy_probs = std::move(heads.policy_probs);
  t.value = heads.value;
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (d_v == 0 || d_l == 0 || d_zv == 0 || d_zl == 0 || d_c == 0 || d_h == 0)
    throw ConfigError("model config: dimensions must be positive");
  if (k_ans < 2) throw ConfigError("model config: need at least 2 candidates");
  if (retrieval_k == 0)
    throw ConfigError("model config: retrieval_k must be at least 1");
  if (!(temperature > 0.0))
    throw ConfigError("model config: temperature must be positive");
}

ModelParams ModelParams::init(const ModelConfig& cfg,
                              std::uint64_t master_seed) {
  cfg.validate();
  ModelParams mp;
  mp.config = cfg;
  register_matrices(mp.params, cfg);

  Rng rng = Rng::stream(master_seed, "model-init");
  for (const auto& name : mp.params.names()) {
    // Heads start at zero: uniform policy, zero value, uniform answer
    // distribution. Weight matrices elsewhere get 1/sqrt(fan_in) normals;
    // biases stay zero.
    if (name.find("head") != std::string::npos) continue;
    if (name.size() >= 2 && name.substr(name.size() - 2) == ".b") continue;
    auto& m = mp.params.param(name);
    const double scale = 1.0 / std::sqrt(static_cast<double>(m.cols));
    for (auto& v : m.data) v = rng.normal() * scale;
    // Encoder weight rows start on the unit sphere; the optimizer keeps
    // them there.
    if (name.rfind("enc_", 0) == 0) {
      for (std::size_t r = 0; r < m.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) s += m.at(r, c) * m.at(r, c);
        s = std::sqrt(s);
        if (s > 0.0)
          for (std::size_t c = 0; c < m.cols; ++c) m.at(r, c) /= s;
      }
    }
  }

  mp.context_seed = Rng::derive(master_seed, "context-projection");
  mp.context_projection =
      make_context_projection(mp.context_seed, cfg.d_c, cfg.d_v + cfg.d_l);
  return mp;
}

JointEmbedding embed(const Observation& obs, const ModelParams& mp) {
  EmbParts p = compute_embedding(obs, mp);
  JointEmbedding out;
  out.values = std::move(p.z);
  out.normalized = true;
  return out;
}

Vec context_payload(const Observation& obs, const ModelParams& mp) {
  const auto& cfg = mp.config;
  if (obs.visual_raw.size() != cfg.d_v || obs.language_raw.size() != cfg.d_l)
    throw ShapeError("context_payload: observation dimensions mismatch");
  Vec x = obs.visual_raw;
  x.insert(x.end(), obs.language_raw.begin(), obs.language_raw.end());
  Vec c(cfg.d_c, 0.0);
  const auto& P = mp.context_projection;
  for (std::size_t i = 0; i < P.rows; ++i)
    for (std::size_t j = 0; j < P.cols; ++j) c[i] += P.at(i, j) * x[j];
  return c;
}

FuseResult fuse(const Vec& z, const Vec& belief, const ModelParams& mp) {
  const auto& cfg = mp.config;
  if (z.size() != cfg.d_z() || belief.size() != cfg.d_c)
    throw ShapeError("fuse: input lengths " + std::to_string(z.size()) + "/" +
                     std::to_string(belief.size()) + ", model expects " +
                     std::to_string(cfg.d_z()) + "/" +
                     std::to_string(cfg.d_c));
  FuseResult r;
  r.input = z;
  r.input.insert(r.input.end(), belief.begin(), belief.end());
  Vec a1 = affine_forward(r.input, mp.params.param("backbone1.W"),
                          mp.params.param("backbone1.b"));
  r.h1 = cfg.linear_backbone ? a1 : tanh_forward(a1);
  Vec a2 = affine_forward(r.h1, mp.params.param("backbone2.W"),
                          mp.params.param("backbone2.b"));
  r.h = cfg.linear_backbone ? a2 : tanh_forward(a2);
  return r;
}

HeadsOut heads_forward(const Vec& h, const ModelParams& mp) {
  const auto& cfg = mp.config;
  if (h.size() != cfg.d_h)
    throw ShapeError("heads: latent length " + std::to_string(h.size()) +
                     ", model expects " + std::to_string(cfg.d_h));
  HeadsOut out;
  out.ce_logits = affine_forward(h, mp.params.param("ce_head.W"),
                                 mp.params.param("ce_head.b"));
  if (cfg.share_heads) {
    out.policy_logits = out.ce_logits;
  } else {
    out.policy_logits = affine_forward(h, mp.params.param("policy_head.W"),
                                       mp.params.param("policy_head.b"));
  }
  out.policy_probs = softmax(out.policy_logits);
  out.value = affine_forward(h, mp.params.param("value_head.W"),
                             mp.params.param("value_head.b"))[0];
  return out;
}

StepTrace forward_snapshot(const Observation& obs,
                           const std::vector<Vec>& keys,
                           const std::vector<Vec>& payloads,
                           const ModelParams& mp) {
  return finish_forward(obs, compute_embedding(obs, mp), keys, payloads,
                        RetrievalResult{}, mp);
}

StepTrace forward_step(const Observation& obs, const MemoryBank& bank,
                       const ModelParams& mp) {
  EmbParts parts = compute_embedding(obs, mp);
  RetrievalResult res = bank.retrieve_topk(parts.z, mp.config.retrieval_k,
                                           mp.config.temperature);
  std::vector<Vec> keys, payloads;
  keys.reserve(res.count());
  payloads.reserve(res.count());
  for (auto idx : res.indices) {
    const MemoryEntry* e = bank.find(idx);
    Vec key(e->key.begin(), e->key.end());
    Vec payload(e->value.begin(), e->value.end());
    keys.push_back(std::move(key));
    payloads.push_back(std::move(payload));
  }
  return finish_forward(obs, std::move(parts), std::move(keys),
                        std::move(payloads), std::move(res), mp);
}

StepTrace forward_nobelief(const Observation& obs, const ModelParams& mp) {
  return forward_snapshot(obs, {}, {}, mp);
}

void backward_step(const StepTrace& trace, const Vec& d_ce_logits,
                   const Vec& d_policy_logits, double d_value,
                   ModelParams& mp, bool block_policy_into_backbone) {
  const auto& cfg = mp.config;
  auto& P = mp.params;
  if (d_ce_logits.size() != cfg.k_ans || d_policy_logits.size() != cfg.k_ans)
    throw ShapeError("backward: head gradient lengths mismatch");

  Vec dh(cfg.d_h, 0.0), tmp;

  affine_backward(trace.h, P.param("ce_head.W"), d_ce_logits,
                  P.grad("ce_head.W"), P.grad("ce_head.b"), tmp);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += tmp[i];

  const std::string pw = cfg.share_heads ? "ce_head.W" : "policy_head.W";
  const std::string pb = cfg.share_heads ? "ce_head.b" : "policy_head.b";
  affine_backward(trace.h, P.param(pw), d_policy_logits, P.grad(pw),
                  P.grad(pb), tmp);
  if (!block_policy_into_backbone)
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += tmp[i];

  affine_backward(trace.h, P.param("value_head.W"), Vec{d_value},
                  P.grad("value_head.W"), P.grad("value_head.b"), tmp);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] += tmp[i];

  Vec da2 = cfg.linear_backbone ? dh : tanh_backward(trace.h, dh);
  Vec dh1;
  affine_backward(trace.h1, P.param("backbone2.W"), da2,
                  P.grad("backbone2.W"), P.grad("backbone2.b"), dh1);
  Vec da1 = cfg.linear_backbone ? dh1 : tanh_backward(trace.h1, dh1);
  Vec dx;
  affine_backward(trace.fuse_in, P.param("backbone1.W"), da1,
                  P.grad("backbone1.W"), P.grad("backbone1.b"), dx);

  Vec dz(dx.begin(), dx.begin() + cfg.d_z());
  Vec db(dx.begin() + cfg.d_z(), dx.end());

  // Belief attention, query side only: the similarity softmax couples every
  // retrieved entry, the keys themselves stay frozen.
  if (!trace.cold_start()) {
    const std::size_t n = trace.retrieved_keys.size();
    Vec g(n);
    for (std::size_t k = 0; k < n; ++k)
      g[k] = dot(db, trace.retrieved_payloads[k]);
    double mix = 0.0;
    for (std::size_t k = 0; k < n; ++k) mix += trace.weights[k] * g[k];
    for (std::size_t k = 0; k < n; ++k) {
      const double ds = trace.weights[k] * (g[k] - mix) / cfg.temperature;
      for (std::size_t j = 0; j < dz.size(); ++j)
        dz[j] += ds * trace.retrieved_keys[k][j];
    }
  }

  const double zdot = dot(trace.z, dz);
  Vec du(dz.size());
  for (std::size_t j = 0; j < dz.size(); ++j)
    du[j] = (dz[j] - trace.z[j] * zdot) / trace.prenorm;

  Vec dv_act(du.begin(), du.begin() + cfg.d_zv);
  Vec dl_act(du.begin() + cfg.d_zv, du.end());
  Vec dv_pre = tanh_backward(trace.vis_act, dv_act);
  Vec dl_pre = tanh_backward(trace.lang_act, dl_act);
  Vec unused;
  affine_backward(trace.obs.visual_raw, P.param("enc_vis.W"), dv_pre,
                  P.grad("enc_vis.W"), P.grad("enc_vis.b"), unused);
  affine_backward(trace.obs.language_raw, P.param("enc_lang.W"), dl_pre,
                  P.grad("enc_lang.W"), P.grad("enc_lang.b"), unused);
}

std::size_t sample_action(const Vec& probs, Rng& rng) {
  if (probs.empty()) throw ContractError("sample_action: empty probabilities");
  double sum = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0)
      throw ContractError("sample_action: invalid probability vector");
    sum += p;
  }
  if (std::fabs(sum - 1.0) > 1e-6)
    throw ContractError("sample_action: probabilities sum to " +
                        std::to_string(sum));
  const double u = rng.uniform();
  double cum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return probs.size() - 1;
}

std::size_t greedy_action(const Vec& probs) {
  if (probs.empty()) throw ContractError("greedy_action: empty probabilities");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i)
    if (probs[i] > probs[best]) best = i;
  return best;
}

std::uint64_t save_checkpoint(const ModelParams& mp, const std::string& path) {
  const auto& cfg = mp.config;
  BinaryWriter w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(cfg.d_v));
  w.u32(static_cast<std::uint32_t>(cfg.d_l));
  w.u32(static_cast<std::uint32_t>(cfg.d_zv));
  w.u32(static_cast<std::uint32_t>(cfg.d_zl));
  w.u32(static_cast<std::uint32_t>(cfg.d_c));
  w.u32(static_cast<std::uint32_t>(cfg.d_h));
  w.u32(static_cast<std::uint32_t>(cfg.k_ans));
  w.u32(static_cast<std::uint32_t>(cfg.retrieval_k));
  w.f64(cfg.temperature);
  std::uint32_t flags = 0;
  if (cfg.share_heads) flags |= 1u;
  if (cfg.linear_backbone) flags |= 2u;
  w.u32(flags);
  w.u64(mp.context_seed);
  w.u64(mp.adam_t);
  w.u32(static_cast<std::uint32_t>(mp.params.names().size()));
  for (const auto& name : mp.params.names()) {
    const auto& m = mp.params.param(name);
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(m.rows));
    w.u32(static_cast<std::uint32_t>(m.cols));
    for (double v : m.data) w.f64(v);
    for (double v : mp.params.moment1(name).data) w.f64(v);
    for (double v : mp.params.moment2(name).data) w.f64(v);
  }
  const std::uint64_t written = w.offset();
  w.close();
  return written;
}

ModelParams load_checkpoint(const std::string& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic))
    throw FormatError(path + ": not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));

  ModelConfig cfg;
  cfg.d_v = r.u32();
  cfg.d_l = r.u32();
  cfg.d_zv = r.u32();
  cfg.d_zl = r.u32();
  cfg.d_c = r.u32();
  cfg.d_h = r.u32();
  cfg.k_ans = r.u32();
  cfg.retrieval_k = r.u32();
  cfg.temperature = r.f64();
  const std::uint32_t flags = r.u32();
  cfg.share_heads = (flags & 1u) != 0;
  cfg.linear_backbone = (flags & 2u) != 0;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path + ": invalid checkpoint header: " + e.what());
  }

  ModelParams mp;
  mp.config = cfg;
  register_matrices(mp.params, cfg);
  mp.context_seed = r.u64();
  mp.adam_t = r.u64();
  const std::uint32_t count = r.u32();
  if (count != mp.params.names().size())
    throw FormatError(path + ": checkpoint has " + std::to_string(count) +
                      " matrices, config implies " +
                      std::to_string(mp.params.names().size()));
  for (const auto& expected : mp.params.names()) {
    const std::uint32_t len = r.u32();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    if (name != expected)
      throw FormatError(path + ": expected matrix " + expected + ", found " +
                        name);
    auto& m = mp.params.param(name);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (rows != m.rows || cols != m.cols)
      throw FormatError(path + ": matrix " + name + " is " +
                        std::to_string(rows) + "x" + std::to_string(cols) +
                        ", config implies " + std::to_string(m.rows) + "x" +
                        std::to_string(m.cols));
    for (auto& v : m.data) v = r.f64();
    for (auto& v : mp.params.moment1(name).data) v = r.f64();
    for (auto& v : mp.params.moment2(name).data) v = r.f64();
  }
  if (!r.at_eof()) throw FormatError(path + ": trailing bytes");

  mp.context_projection =
      make_context_projection(mp.context_seed, cfg.d_c, cfg.d_v + cfg.d_l);
  return mp;
}

}  // namespace beliefqa
