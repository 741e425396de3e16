#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "beliefqa/errors.hpp"
#include "beliefqa/rng.hpp"

namespace beliefqa {

using Vec = std::vector<double>;

/// Row-major dense matrix of 64-bit floats. Vectors are stored as n x 1.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::size_t size() const { return data.size(); }
  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

/// Named parameter matrices with gradient buffers of identical shape, plus
/// the optimizer's first/second moment accumulators. Iteration order is
/// registration order and is deterministic.
class ParamSet {
 public:
  DenseMatrix& add(const std::string& name, std::size_t rows, std::size_t cols);

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  DenseMatrix& param(const std::string& name);
  const DenseMatrix& param(const std::string& name) const;
  DenseMatrix& grad(const std::string& name);
  const DenseMatrix& grad(const std::string& name) const;
  DenseMatrix& moment1(const std::string& name);
  const DenseMatrix& moment1(const std::string& name) const;
  DenseMatrix& moment2(const std::string& name);
  const DenseMatrix& moment2(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::size_t total_parameters() const;

  /// Zeroes every gradient buffer; parameter values are untouched.
  void zero_grads();

 private:
  std::size_t index_of(const std::string& name) const;

  struct Entry {
    DenseMatrix value, grad, m1, m2;
  };
  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// y = W x + bias. bias is stored as a rows x 1 matrix.
Vec affine_forward(const Vec& x, const DenseMatrix& W, const DenseMatrix& bias);

/// Reverse-mode step for affine_forward: accumulates dW and db, writes dx.
void affine_backward(const Vec& x, const DenseMatrix& W, const Vec& dy,
                     DenseMatrix& dW, DenseMatrix& db, Vec& dx);

/// Numerically stable softmax (max subtraction). Output sums to 1.
Vec softmax(const Vec& v);

/// log(sum(exp(v))) with max subtraction; same input validation as softmax.
double log_sum_exp(const Vec& v);

struct CrossEntropyResult {
  double loss = 0.0;
  Vec dlogits;  // probs - one_hot(label); gradient w.r.t. the logits
};

/// -log(probs[label]) with the probability floored at 1e-12 before the log.
CrossEntropyResult cross_entropy(const Vec& probs, std::size_t label);

Vec tanh_forward(const Vec& x);
/// dx from dy given y = tanh(x).
Vec tanh_backward(const Vec& y, const Vec& dy);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Multiplier on lr for parameters whose name starts with "enc_". The
  // encoders double as the retrieval keys and queries, so the training loop
  // anneals this to zero once they are aligned; zero skips their update
  // entirely and leaves the stored geometry bit-stable.
  double encoder_lr_scale = 1.0;
};

/// One adaptive-moment update with bias correction, t counts from 1.
/// Validates every gradient is finite before any parameter is written.
void adam_step(ParamSet& params, const AdamConfig& cfg, std::uint64_t t);

/// Loss callable for grad_check. f(true) must (re)compute gradients into the
/// ParamSet it closes over; f(false) must only return the loss.
using LossFn = std::function<double(bool with_grad)>;

/// Central finite differences against the analytic gradient. Probes
/// min(probe_count, size) random coordinates in every parameter matrix and
/// returns the worst relative error seen.
double grad_check(const LossFn& f, ParamSet& params, int probe_count,
                  double step, Rng& rng);

}  // namespace beliefqa
