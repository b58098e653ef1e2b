#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "diagrnn/optimizers.hpp"
#include "testutil.hpp"

using namespace diagrnn;
using testutil::random_tensor;

namespace {

struct Scalar {
  Tensor theta{1, 1};
  Tensor grad{1, 1};
  std::vector<Tensor*> params() { return {&theta}; }
  std::vector<const Tensor*> grads() { return {&grad}; }
};

}  // namespace

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Scalar s;
  s.theta.at(0, 0) = 3.5;
  AdamState st;
  for (int i = 0; i < 5; ++i) adam_step(st, s.params(), s.grads(), 0.1);
  CHECK(s.theta.at(0, 0) == 3.5);
}

TEST_CASE("adam: first step is approximately -lr*sign(g)") {
  for (double g : {1.0, -2.0, 7.5}) {
    Scalar s;
    s.theta.at(0, 0) = 0.0;
    s.grad.at(0, 0) = g;
    AdamState st;
    adam_step(st, s.params(), s.grads(), 1e-3);
    // mhat = g and sqrt(vhat) = |g|, so the update is lr*sign(g) up to eps
    CHECK(s.theta.at(0, 0) == Catch::Approx(-1e-3 * (g > 0 ? 1.0 : -1.0)).epsilon(1e-6));
  }
}

TEST_CASE("adam: two steps with constant gradient match the hand-iterated recurrence") {
  const double g = 0.7, lr = 0.05;
  Scalar s;
  s.theta.at(0, 0) = 1.0;
  s.grad.at(0, 0) = g;
  AdamState st;
  adam_step(st, s.params(), s.grads(), lr);
  adam_step(st, s.params(), s.grads(), lr);

  // hand iteration of the published recurrence
  double theta = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 2; ++t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    theta -= lr * mhat / (std::sqrt(vhat) + 1e-8);
  }
  CHECK(s.theta.at(0, 0) == Catch::Approx(theta).epsilon(1e-15));
}

TEST_CASE("rmsprop: zero gradient and zero buffer leave parameters unchanged") {
  Scalar s;
  s.theta.at(0, 0) = -2.0;
  RmsPropState st;
  for (int i = 0; i < 3; ++i) rmsprop_step(st, s.params(), s.grads(), 0.1, 0.5);
  CHECK(s.theta.at(0, 0) == -2.0);
}

TEST_CASE("rmsprop: momentum=0 matches the hand-iterated scalar recurrence") {
  const double lr = 0.01;
  const double gs[3] = {0.4, -1.1, 0.25};
  Scalar s;
  s.theta.at(0, 0) = 0.3;
  RmsPropState st;
  double theta = 0.3, acc = 0.0;
  for (double g : gs) {
    s.grad.at(0, 0) = g;
    rmsprop_step(st, s.params(), s.grads(), lr, 0.0);
    acc = 0.9 * acc + 0.1 * g * g;
    theta -= lr * g / (std::sqrt(acc) + 1e-8);
    CHECK(s.theta.at(0, 0) == Catch::Approx(theta).epsilon(1e-15));
  }
}

TEST_CASE("rmsprop: momentum=1 grows the step roughly linearly early on") {
  const double g = 1.0, lr = 0.01;
  Scalar s;
  s.theta.at(0, 0) = 0.0;
  s.grad.at(0, 0) = g;
  RmsPropState st;
  std::vector<double> step_sizes;
  double prev = 0.0;
  for (int t = 0; t < 5; ++t) {
    rmsprop_step(st, s.params(), s.grads(), lr, 1.0);
    step_sizes.push_back(prev - s.theta.at(0, 0));
    prev = s.theta.at(0, 0);
  }
  // each step adds another lr*g/(sqrt(acc)+eps) term onto the buffer
  for (std::size_t i = 1; i < step_sizes.size(); ++i) CHECK(step_sizes[i] > step_sizes[i - 1]);
  const double ratio = step_sizes[3] / step_sizes[2];
  CHECK(ratio == Catch::Approx(4.0 / 3.0).epsilon(0.15));
}

TEST_CASE("both optimizers drive a convex quadratic near zero within 300 steps") {
  struct Case {
    OptimizerKind kind;
    double momentum;
  };
  for (const Case c : {Case{OptimizerKind::Adam, 0.0}, Case{OptimizerKind::RmsProp, 0.0},
                       Case{OptimizerKind::RmsProp, 0.5}}) {
    Scalar s;
    s.theta.at(0, 0) = 1.0;
    Optimizer opt(OptimizerConfig{c.kind, 1e-2, c.momentum});
    for (int t = 0; t < 300; ++t) {
      s.grad.at(0, 0) = s.theta.at(0, 0);  // d/dtheta of 0.5*theta^2
      opt.step(s.params(), s.grads());
    }
    INFO(optimizer_name(c.kind) << " momentum=" << c.momentum);
    CHECK(std::abs(s.theta.at(0, 0)) < 0.1);
  }
}

TEST_CASE("updates are elementwise: permuting parameters permutes updates") {
  Rng rng(71);
  Tensor theta = random_tensor(rng, 3, 4);
  Tensor grad = random_tensor(rng, 3, 4);

  // flat run
  Tensor t1 = theta;
  AdamState st1;
  std::vector<Tensor*> p1 = {&t1};
  std::vector<const Tensor*> g1 = {&grad};
  adam_step(st1, p1, g1, 0.01);
  adam_step(st1, p1, g1, 0.01);

  // same values split into two tensors in swapped order
  Tensor a = slice_rows(theta, 0, 2), b = slice_rows(theta, 2, 3);
  Tensor ga = slice_rows(grad, 0, 2), gb = slice_rows(grad, 2, 3);
  AdamState st2;
  std::vector<Tensor*> p2 = {&b, &a};
  std::vector<const Tensor*> g2 = {&gb, &ga};
  adam_step(st2, p2, g2, 0.01);
  adam_step(st2, p2, g2, 0.01);

  CHECK(max_abs_diff(slice_rows(t1, 0, 2), a) == 0.0);
  CHECK(max_abs_diff(slice_rows(t1, 2, 3), b) == 0.0);
}

TEST_CASE("identical state and gradients give bit-identical updates") {
  Rng rng(72);
  Tensor theta = random_tensor(rng, 2, 5);
  Tensor grad = random_tensor(rng, 2, 5);
  auto run = [&](OptimizerKind kind) {
    Tensor t = theta;
    Optimizer opt(OptimizerConfig{kind, 3e-3, 0.4});
    std::vector<Tensor*> p = {&t};
    std::vector<const Tensor*> g = {&grad};
    for (int i = 0; i < 10; ++i) opt.step(p, g);
    return t;
  };
  CHECK(max_abs_diff(run(OptimizerKind::Adam), run(OptimizerKind::Adam)) == 0.0);
  CHECK(max_abs_diff(run(OptimizerKind::RmsProp), run(OptimizerKind::RmsProp)) == 0.0);
}

TEST_CASE("optimizer validation errors") {
  Scalar s;
  AdamState ast;
  CHECK_THROWS_AS(adam_step(ast, s.params(), s.grads(), -0.1), ConfigError);
  RmsPropState rst;
  CHECK_THROWS_AS(rmsprop_step(rst, s.params(), s.grads(), 0.01, 1.5), ConfigError);
  CHECK_THROWS_AS(Optimizer(OptimizerConfig{OptimizerKind::Adam, -1.0, 0.0}), ConfigError);
  // lr = 0 is legal and a no-op: a zero-rate trial must stay exactly flat
  s.theta.at(0, 0) = 2.0;
  s.grad.at(0, 0) = 5.0;
  adam_step(ast, s.params(), s.grads(), 0.0);
  CHECK(s.theta.at(0, 0) == 2.0);

  Tensor wrong(2, 2);
  std::vector<Tensor*> p = {&s.theta};
  std::vector<const Tensor*> g = {&wrong};
  AdamState st;
  CHECK_THROWS_AS(adam_step(st, p, g, 0.01), UsageError);
  std::vector<const Tensor*> missing;
  CHECK_THROWS_AS(adam_step(st, p, missing, 0.01), UsageError);
}
