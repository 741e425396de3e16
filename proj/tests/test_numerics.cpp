#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "beliefqa/numerics.hpp"

using namespace beliefqa;

TEST_CASE("param set keeps registration order and rejects bad names") {
  ParamSet ps;
  ps.add("w", 2, 3);
  ps.add("b", 2, 1);
  CHECK(ps.names() == std::vector<std::string>{"w", "b"});
  CHECK(ps.total_parameters() == 8);
  CHECK(ps.has("w"));
  CHECK_FALSE(ps.has("v"));
  CHECK_THROWS_AS(ps.add("w", 1, 1), ConfigError);
  CHECK_THROWS_AS(ps.param("v"), IndexError);
  CHECK_THROWS_AS(ps.add("empty", 0, 3), ShapeError);

  ps.grad("w").fill(1.5);
  ps.param("w").fill(2.0);
  ps.zero_grads();
  CHECK(ps.grad("w").at(1, 2) == 0.0);
  CHECK(ps.param("w").at(1, 2) == 2.0);
}

TEST_CASE("affine forward matches hand-computed values") {
  DenseMatrix W(2, 2), b(2, 1);
  W.at(0, 0) = 1; W.at(0, 1) = 2;
  W.at(1, 0) = 3; W.at(1, 1) = 4;
  b.at(0, 0) = 0.5; b.at(1, 0) = -0.5;
  Vec y = affine_forward({1.0, 1.0}, W, b);
  CHECK(y[0] == 3.5);
  CHECK(y[1] == 6.5);

  DenseMatrix I(3, 3), z(3, 1);
  for (int i = 0; i < 3; ++i) I.at(i, i) = 1.0;
  Vec x = {0.25, -4.0, 7.5};
  CHECK(affine_forward(x, I, z) == x);

  CHECK_THROWS_AS(affine_forward({1.0}, W, b), ShapeError);
}

TEST_CASE("affine forward is linear in its input") {
  Rng r(31);
  DenseMatrix W(4, 3), b(4, 1);
  for (auto& v : W.data) v = r.normal();
  for (auto& v : b.data) v = r.normal();
  Vec x(3), y(3);
  for (auto& v : x) v = r.normal();
  for (auto& v : y) v = r.normal();
  const double a = 0.7, c = -1.3;
  Vec mix(3);
  for (int i = 0; i < 3; ++i) mix[i] = a * x[i] + c * y[i];

  Vec lhs = affine_forward(mix, W, b);
  Vec fx = affine_forward(x, W, b);
  Vec fy = affine_forward(y, W, b);
  for (int i = 0; i < 4; ++i) {
    double rhs = a * fx[i] + c * fy[i] + (1.0 - a - c) * b.at(i, 0);
    CHECK(std::fabs(lhs[i] - rhs) < 1e-10);
  }
}

TEST_CASE("affine backward agrees with central differences") {
  Rng r(77);
  DenseMatrix W(3, 4), b(3, 1);
  for (auto& v : W.data) v = r.normal() * 0.5;
  for (auto& v : b.data) v = r.normal() * 0.5;
  Vec x(4);
  for (auto& v : x) v = r.normal();

  // Loss 0.5 * |y|^2, so dy = y.
  auto loss = [&](const Vec& xx, const DenseMatrix& WW, const DenseMatrix& bb) {
    Vec y = affine_forward(xx, WW, bb);
    double s = 0.0;
    for (double v : y) s += v * v;
    return 0.5 * s;
  };

  Vec y = affine_forward(x, W, b);
  DenseMatrix dW(3, 4), db(3, 1);
  Vec dx;
  affine_backward(x, W, y, dW, db, dx);

  const double h = 1e-6;
  for (std::size_t i = 0; i < W.size(); ++i) {
    DenseMatrix Wp = W, Wm = W;
    Wp.data[i] += h;
    Wm.data[i] -= h;
    double num = (loss(x, Wp, b) - loss(x, Wm, b)) / (2 * h);
    CHECK(std::fabs(dW.data[i] - num) < 1e-6);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    DenseMatrix bp = b, bm = b;
    bp.data[i] += h;
    bm.data[i] -= h;
    double num = (loss(x, W, bp) - loss(x, W, bm)) / (2 * h);
    CHECK(std::fabs(db.data[i] - num) < 1e-6);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    Vec xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    double num = (loss(xp, W, b) - loss(xm, W, b)) / (2 * h);
    CHECK(std::fabs(dx[i] - num) < 1e-6);
  }
}

TEST_CASE("affine backward accumulates instead of overwriting") {
  DenseMatrix W(1, 1), dW(1, 1), db(1, 1);
  W.at(0, 0) = 2.0;
  dW.at(0, 0) = 10.0;
  db.at(0, 0) = 20.0;
  Vec dx;
  affine_backward({3.0}, W, {1.0}, dW, db, dx);
  CHECK(dW.at(0, 0) == 13.0);
  CHECK(db.at(0, 0) == 21.0);
  CHECK(dx[0] == 2.0);
}

TEST_CASE("softmax of two logits matches the closed form") {
  Vec p = softmax({1.0, 0.0});
  const double e = std::exp(1.0);
  CHECK(std::fabs(p[0] - e / (e + 1.0)) < 1e-15);
  CHECK(std::fabs(p[0] - 0.7310585786300049) < 1e-15);
  CHECK(std::fabs(p[0] + p[1] - 1.0) < 1e-15);
}

TEST_CASE("softmax of a one-hot logit vector") {
  Vec p = softmax({1.0, 0.0, 0.0, 0.0});
  const double e = std::exp(1.0);
  CHECK(std::fabs(p[0] - e / (e + 3.0)) < 1e-15);
  for (int i = 1; i < 4; ++i) CHECK(std::fabs(p[i] - 1.0 / (e + 3.0)) < 1e-15);
  CHECK(std::fabs(p[0] - 0.4754) < 1e-4);
  CHECK(std::fabs(p[1] - 0.1749) < 1e-4);
}

TEST_CASE("softmax is invariant to shifting all logits") {
  Rng r(5);
  Vec v(8);
  for (auto& x : v) x = r.normal() * 3.0;
  Vec shifted = v;
  for (auto& x : shifted) x += 100.0;
  Vec a = softmax(v), b = softmax(shifted);
  for (int i = 0; i < 8; ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("softmax survives extreme logits") {
  Vec p = softmax({1000.0, 0.0});
  CHECK(std::isfinite(p[0]));
  CHECK(p[0] == doctest::Approx(1.0));
  CHECK(p[1] == doctest::Approx(0.0));

  Vec q = softmax({-1000.0, -1000.0});
  CHECK(q[0] == doctest::Approx(0.5));
}

TEST_CASE("softmax rejects empty and non-finite input") {
  CHECK_THROWS_AS(softmax({}), ContractError);
  CHECK_THROWS_AS(softmax({std::nan(""), 0.0}), NumericError);
  CHECK_THROWS_AS(softmax({0.0, std::numeric_limits<double>::infinity()}),
                  NumericError);
}

TEST_CASE("cross entropy of the uniform distribution is log k") {
  auto r = cross_entropy({0.25, 0.25, 0.25, 0.25}, 0);
  CHECK(std::fabs(r.loss - std::log(4.0)) < 1e-15);
  CHECK(std::fabs(r.loss - 1.3862943611198906) < 1e-15);
  CHECK(r.dlogits[0] == -0.75);
  CHECK(r.dlogits[1] == 0.25);
  CHECK(r.dlogits[2] == 0.25);
  CHECK(r.dlogits[3] == 0.25);
}

TEST_CASE("cross entropy floors the probability before the log") {
  auto r = cross_entropy({1.0, 0.0}, 1);
  CHECK(std::isfinite(r.loss));
  CHECK(std::fabs(r.loss + std::log(1e-12)) < 1e-9);
}

TEST_CASE("cross entropy rejects an out-of-range label") {
  CHECK_THROWS_AS(cross_entropy({0.5, 0.5}, 2), IndexError);
}

TEST_CASE("tanh backward agrees with central differences") {
  Vec x = {-2.0, -0.3, 0.0, 0.7, 1.9};
  Vec y = tanh_forward(x);
  Vec dy(x.size(), 1.0);
  Vec dx = tanh_backward(y, dy);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double num = (std::tanh(x[i] + h) - std::tanh(x[i] - h)) / (2 * h);
    CHECK(std::fabs(dx[i] - num) < 1e-9);
  }
}

TEST_CASE("grad check passes on a quadratic with its true gradient") {
  ParamSet ps;
  ps.add("w", 3, 2);
  Rng init(11);
  for (auto& v : ps.param("w").data) v = init.normal();

  LossFn f = [&](bool with_grad) {
    double s = 0.0;
    const auto& w = ps.param("w");
    for (std::size_t i = 0; i < w.size(); ++i) s += 0.5 * w.data[i] * w.data[i];
    if (with_grad) {
      auto& g = ps.grad("w");
      for (std::size_t i = 0; i < w.size(); ++i) g.data[i] += w.data[i];
    }
    return s;
  };

  Rng probe(1);
  double worst = grad_check(f, ps, 6, 1e-5, probe);
  CHECK(worst < 1e-8);
}

TEST_CASE("grad check flags a wrong analytic gradient") {
  ParamSet ps;
  ps.add("w", 2, 2);
  ps.param("w").fill(1.0);

  LossFn f = [&](bool with_grad) {
    double s = 0.0;
    const auto& w = ps.param("w");
    for (std::size_t i = 0; i < w.size(); ++i) s += 0.5 * w.data[i] * w.data[i];
    if (with_grad) {
      auto& g = ps.grad("w");
      // Deliberately doubled.
      for (std::size_t i = 0; i < w.size(); ++i) g.data[i] += 2.0 * w.data[i];
    }
    return s;
  };

  Rng probe(2);
  CHECK(grad_check(f, ps, 4, 1e-5, probe) > 0.3);
}

TEST_CASE("grad check reports zero for a constant loss") {
  ParamSet ps;
  ps.add("w", 2, 1);
  LossFn f = [](bool) { return 5.0; };
  Rng probe(3);
  CHECK(grad_check(f, ps, 2, 1e-5, probe) == 0.0);
}

TEST_CASE("adam first step matches the closed form") {
  ParamSet ps;
  ps.add("w", 1, 1);
  ps.param("w").at(0, 0) = 1.0;
  ps.grad("w").at(0, 0) = 2.0;
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_step(ps, cfg, 1);
  // After bias correction the first step is lr * g / (|g| + eps).
  double expected = 1.0 - 0.1 * 2.0 / (2.0 + cfg.eps);
  CHECK(std::fabs(ps.param("w").at(0, 0) - expected) < 1e-15);
  CHECK(std::fabs(ps.moment1("w").at(0, 0) - 0.2) < 1e-15);
  CHECK(std::fabs(ps.moment2("w").at(0, 0) - 0.004) < 1e-15);
}

TEST_CASE("adam leaves parameters alone when gradients are zero") {
  ParamSet ps;
  ps.add("w", 2, 2);
  ps.param("w").fill(3.0);
  adam_step(ps, AdamConfig{}, 1);
  for (double v : ps.param("w").data) CHECK(v == 3.0);
}

TEST_CASE("adam validates all gradients before touching any parameter") {
  ParamSet ps;
  ps.add("a", 1, 1);
  ps.add("b", 1, 1);
  ps.param("a").at(0, 0) = 1.0;
  ps.grad("a").at(0, 0) = 1.0;
  ps.grad("b").at(0, 0) = std::nan("");
  CHECK_THROWS_AS(adam_step(ps, AdamConfig{}, 1), NumericError);
  CHECK(ps.param("a").at(0, 0) == 1.0);
  CHECK(ps.moment1("a").at(0, 0) == 0.0);
}

TEST_CASE("adam rejects bad hyperparameters and step counts") {
  ParamSet ps;
  ps.add("w", 1, 1);
  AdamConfig bad;
  bad.lr = 0.0;
  CHECK_THROWS_AS(adam_step(ps, bad, 1), ConfigError);
  CHECK_THROWS_AS(adam_step(ps, AdamConfig{}, 0), ContractError);
}

TEST_CASE("adam drives a quadratic to its minimum") {
  ParamSet ps;
  ps.add("x", 1, 1);
  AdamConfig cfg;
  cfg.lr = 0.05;
  for (std::uint64_t t = 1; t <= 2000; ++t) {
    double x = ps.param("x").at(0, 0);
    ps.zero_grads();
    ps.grad("x").at(0, 0) = 2.0 * (x - 3.0);
    adam_step(ps, cfg, t);
  }
  CHECK(std::fabs(ps.param("x").at(0, 0) - 3.0) < 0.05);
}
