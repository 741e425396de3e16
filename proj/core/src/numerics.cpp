#include "beliefqa/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace beliefqa {

DenseMatrix& ParamSet::add(const std::string& name, std::size_t rows,
                           std::size_t cols) {
  if (has(name)) throw ConfigError("ParamSet: duplicate parameter " + name);
  if (rows == 0 || cols == 0)
    throw ShapeError("ParamSet: parameter " + name + " has empty shape");
  index_[name] = entries_.size();
  names_.push_back(name);
  Entry e;
  e.value = DenseMatrix(rows, cols);
  e.grad = DenseMatrix(rows, cols);
  e.m1 = DenseMatrix(rows, cols);
  e.m2 = DenseMatrix(rows, cols);
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

std::size_t ParamSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw IndexError("ParamSet: unknown parameter " + name);
  return it->second;
}

DenseMatrix& ParamSet::param(const std::string& name) {
  return entries_[index_of(name)].value;
}
const DenseMatrix& ParamSet::param(const std::string& name) const {
  return entries_[index_of(name)].value;
}
DenseMatrix& ParamSet::grad(const std::string& name) {
  return entries_[index_of(name)].grad;
}
const DenseMatrix& ParamSet::grad(const std::string& name) const {
  return entries_[index_of(name)].grad;
}
DenseMatrix& ParamSet::moment1(const std::string& name) {
  return entries_[index_of(name)].m1;
}
const DenseMatrix& ParamSet::moment1(const std::string& name) const {
  return entries_[index_of(name)].m1;
}
DenseMatrix& ParamSet::moment2(const std::string& name) {
  return entries_[index_of(name)].m2;
}
const DenseMatrix& ParamSet::moment2(const std::string& name) const {
  return entries_[index_of(name)].m2;
}

std::size_t ParamSet::total_parameters() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

Vec affine_forward(const Vec& x, const DenseMatrix& W, const DenseMatrix& bias) {
  if (x.size() != W.cols || bias.rows != W.rows || bias.cols != 1) {
    throw ShapeError("affine_forward: x has length " +
                     std::to_string(x.size()) + ", W is " +
                     std::to_string(W.rows) + "x" + std::to_string(W.cols) +
                     ", bias is " + std::to_string(bias.rows) + "x" +
                     std::to_string(bias.cols));
  }
  Vec y(W.rows);
  for (std::size_t i = 0; i < W.rows; ++i) {
    double acc = bias.data[i];
    const double* row = &W.data[i * W.cols];
    for (std::size_t j = 0; j < W.cols; ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

void affine_backward(const Vec& x, const DenseMatrix& W, const Vec& dy,
                     DenseMatrix& dW, DenseMatrix& db, Vec& dx) {
  if (x.size() != W.cols || dy.size() != W.rows || dW.rows != W.rows ||
      dW.cols != W.cols || db.rows != W.rows || db.cols != 1) {
    throw ShapeError("affine_backward: shapes do not match W " +
                     std::to_string(W.rows) + "x" + std::to_string(W.cols));
  }
  dx.assign(W.cols, 0.0);
  for (std::size_t i = 0; i < W.rows; ++i) {
    const double g = dy[i];
    db.data[i] += g;
    const double* row = &W.data[i * W.cols];
    double* grow = &dW.data[i * W.cols];
    for (std::size_t j = 0; j < W.cols; ++j) {
      grow[j] += g * x[j];
      dx[j] += row[j] * g;
    }
  }
}

Vec softmax(const Vec& v) {
  if (v.empty()) throw ContractError("softmax: empty input");
  double mx = v[0];
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("softmax: non-finite input");
    mx = std::max(mx, x);
  }
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

double log_sum_exp(const Vec& v) {
  if (v.empty()) throw ContractError("log_sum_exp: empty input");
  double mx = v[0];
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("log_sum_exp: non-finite input");
    mx = std::max(mx, x);
  }
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

CrossEntropyResult cross_entropy(const Vec& probs, std::size_t label) {
  if (label >= probs.size())
    throw IndexError("cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(probs.size()) +
                     " classes");
  CrossEntropyResult r;
  r.loss = -std::log(std::max(probs[label], 1e-12));
  r.dlogits = probs;
  r.dlogits[label] -= 1.0;
  return r;
}

Vec tanh_forward(const Vec& x) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

Vec tanh_backward(const Vec& y, const Vec& dy) {
  Vec dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = (1.0 - y[i] * y[i]) * dy[i];
  return dx;
}

void adam_step(ParamSet& params, const AdamConfig& cfg, std::uint64_t t) {
  if (cfg.lr <= 0.0)
    throw ConfigError("adam_step: learning rate must be positive");
  if (t < 1) throw ContractError("adam_step: step count starts at 1");
  for (const auto& name : params.names()) {
    for (double g : params.grad(name).data) {
      if (!std::isfinite(g))
        throw NumericError("adam_step: non-finite gradient in " + name);
    }
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (const auto& name : params.names()) {
    auto& p = params.param(name);
    const auto& g = params.grad(name);
    auto& m1 = params.moment1(name);
    auto& m2 = params.moment2(name);
    const bool encoder = name.rfind("enc_", 0) == 0;
    const double lr = cfg.lr * (encoder ? cfg.encoder_lr_scale : 1.0);
    // Moments track the gradient even for parameters whose update is scaled
    // to zero, so a later unfreeze resumes from warm statistics.
    for (std::size_t i = 0; i < p.size(); ++i) {
      m1.data[i] = cfg.beta1 * m1.data[i] + (1.0 - cfg.beta1) * g.data[i];
      m2.data[i] = cfg.beta2 * m2.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
      const double mhat = m1.data[i] / c1;
      const double vhat = m2.data[i] / c2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    // Encoder weight rows live on the unit sphere: the update may rotate a
    // row but not grow it. Without this, the visual encoder inflates to
    // saturate tanh and the joint normalization in embed() crushes the
    // other modality's share of z.
    if (encoder && lr != 0.0 && name.size() > 2 &&
        name.substr(name.size() - 2) == ".W") {
      for (std::size_t r = 0; r < p.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c) s += p.at(r, c) * p.at(r, c);
        s = std::sqrt(s);
        if (s > 0.0)
          for (std::size_t c = 0; c < p.cols; ++c) p.at(r, c) /= s;
      }
    }
  }
}

double grad_check(const LossFn& f, ParamSet& params, int probe_count,
                  double step, Rng& rng) {
  if (step <= 0.0) throw ContractError("grad_check: step must be positive");
  params.zero_grads();
  double base = f(true);
  if (!std::isfinite(base)) throw NumericError("grad_check: non-finite loss");

  // Snapshot the analytic gradients before any probing perturbs state.
  std::vector<std::vector<double>> analytic;
  for (const auto& name : params.names())
    analytic.push_back(params.grad(name).data);

  double worst = 0.0;
  for (std::size_t mi = 0; mi < params.names().size(); ++mi) {
    const auto& name = params.names()[mi];
    auto& value = params.param(name);
    const std::size_t n = value.size();
    const std::size_t probes =
        std::min<std::size_t>(static_cast<std::size_t>(probe_count), n);
    for (std::size_t k = 0; k < probes; ++k) {
      const std::size_t idx = rng.below(n);
      const double saved = value.data[idx];
      value.data[idx] = saved + step;
      const double up = f(false);
      value.data[idx] = saved - step;
      const double down = f(false);
      value.data[idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw NumericError("grad_check: non-finite loss at probe");
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[mi][idx];
      // Denominator floor keeps finite-difference noise on near-zero
      // gradients from reporting spurious relative error.
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      const double rel = std::fabs(a - numeric) / denom;
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace beliefqa
