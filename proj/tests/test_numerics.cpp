#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mmsurv/layers.hpp"
#include "mmsurv/numerics.hpp"

using namespace mmsurv;

TEST_CASE("softmax examples") {
  auto a = softmax(std::vector<double>{0, 0, 0});
  for (double x : a) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-15));

  auto b = softmax(std::vector<double>{1000, 1000});
  CHECK(b[0] == 0.5);
  CHECK(b[1] == 0.5);

  auto c = softmax(std::vector<double>{0.4, 0.1});
  const double oracle = std::exp(0.4) / (std::exp(0.4) + std::exp(0.1));
  CHECK(c[0] == doctest::Approx(oracle).epsilon(1e-14));
  CHECK(c[0] == doctest::Approx(0.574443).epsilon(1e-6));
  CHECK(c[1] == doctest::Approx(0.425557).epsilon(1e-6));

  CHECK_THROWS_WITH_AS(softmax(std::vector<double>{}), "empty vector", std::invalid_argument);
}

TEST_CASE("softmax is a probability vector for extreme inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng.uniform_int(8));
    for (double& x : v) x = rng.uniform(-1e6, 1e6);
    auto p = softmax(v);
    double sum = 0.0;
    for (double x : p) {
      CHECK(x >= 0.0);
      sum += x;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("softmax shift invariance") {
  std::vector<double> v{0.3, -1.2, 2.5};
  std::vector<double> w = v;
  for (double& x : w) x += 17.25;
  auto a = softmax(v), b = softmax(w);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-14));
}

TEST_CASE("stable_log") {
  CHECK(stable_log(1.0) == 0.0);
  CHECK(stable_log(0.0) == doctest::Approx(-27.631021).epsilon(1e-7));
  CHECK(stable_log(0.0) == std::log(1e-12));
  CHECK(stable_log(0.5) == doctest::Approx(-0.693147).epsilon(1e-6));
  CHECK_THROWS_WITH_AS(stable_log(-1e-3), "negative probability", std::invalid_argument);
}

TEST_CASE("matvec kernels against a naive oracle") {
  Rng rng(3);
  Matrix w(7, 13);
  for (double& x : w.data()) x = rng.normal();
  std::vector<double> x(13), dy(7);
  for (double& v : x) v = rng.normal();
  for (double& v : dy) v = rng.normal();

  std::vector<double> y(7);
  matvec(w, x, y);
  for (std::size_t r = 0; r < 7; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 13; ++c) acc += w(r, c) * x[c];
    CHECK(y[r] == doctest::Approx(acc).epsilon(1e-12));
  }

  std::vector<double> dx(13, 1.0);
  matvec_t_acc(w, dy, dx);
  for (std::size_t c = 0; c < 13; ++c) {
    double acc = 1.0;
    for (std::size_t r = 0; r < 7; ++r) acc += w(r, c) * dy[r];
    CHECK(dx[c] == doctest::Approx(acc).epsilon(1e-12));
  }

  Matrix g(7, 13, 0.5);
  outer_acc(g, dy, x);
  for (std::size_t r = 0; r < 7; ++r) {
    for (std::size_t c = 0; c < 13; ++c) CHECK(g(r, c) == doctest::Approx(0.5 + dy[r] * x[c]));
  }
  CHECK_THROWS_AS(matvec(w, dy, y), std::invalid_argument);
}

TEST_CASE("ParamStore") {
  ParamStore ps;
  const ParamId a = ps.add("a", Matrix(2, 3, 1.0));
  const ParamId b = ps.add("b", Matrix(1, 4));
  CHECK(ps.size() == 2);
  CHECK(ps.total_entries() == 10);
  CHECK(ps.id("b") == b);
  CHECK(ps.name(a) == "a");
  CHECK(ps.grad(a).rows() == 2);
  CHECK(ps.grad(a).cols() == 3);
  ps.grad(a)(1, 2) = 4.0;
  ps.zero_grad();
  CHECK(ps.grad(a)(1, 2) == 0.0);
  CHECK_THROWS_AS(ps.add("a", Matrix(1, 1)), std::invalid_argument);
  CHECK_THROWS_AS(ps.id("missing"), std::invalid_argument);
}

TEST_CASE("Rng reproducibility and ranges") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs |= x != c.next_u64();
  }
  CHECK(differs);
  CHECK(a == b);

  Rng r(5);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.uniform_int(7) < 7);
    const double z = r.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / n) < 0.05);
  CHECK(std::abs(sq / n - 1.0) < 0.05);

  // Substreams are distinct and do not advance the parent.
  Rng p(9);
  Rng s1 = p.substream(1), s2 = p.substream(2);
  CHECK(s1.next_u64() != s2.next_u64());
  CHECK(p.counter() == 0);

  // Restoring (seed, counter) resumes the stream.
  Rng q(77);
  for (int i = 0; i < 5; ++i) q.next_u64();
  Rng resumed(q.seed(), q.counter());
  CHECK(q.next_u64() == resumed.next_u64());
}

TEST_CASE("finite_diff_check examples") {
  ParamStore ps;
  const ParamId t = ps.add("theta", Matrix(1, 1, 3.0));
  ps.grad(t)(0, 0) = 6.0;
  auto quad = [&](const ParamStore& p) {
    const double x = p.value(t)(0, 0);
    return x * x;
  };
  auto r = finite_diff_check(quad, ps);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-9);
  CHECK(ps.value(t)(0, 0) == 3.0);

  ps.grad(t)(0, 0) = 0.0;
  auto constant = finite_diff_check([](const ParamStore&) { return 2.0; }, ps);
  CHECK(constant.passed);
  CHECK(constant.max_rel_error == 0.0);

  ps.grad(t)(0, 0) = 7.0;  // wrong on purpose
  CHECK_FALSE(finite_diff_check(quad, ps).passed);

  CHECK_THROWS_WITH_AS(
      finite_diff_check([](const ParamStore&) { return std::nan(""); }, ps),
      "objective not finite", std::runtime_error);
  FiniteDiffOptions bad;
  bad.step = 1e-2;
  CHECK_THROWS_AS(finite_diff_check(quad, ps, bad), std::invalid_argument);
}

TEST_CASE("relative_error definition") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(1.0 / 3));
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-9 / 1e-8));
}

TEST_CASE("linear layer gradients pass the finite-difference check at random points") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    ParamStore ps;
    const Linear l = make_linear(ps, "l", 5, 3, rng);
    for (double& b : ps.value(l.bias).data()) b = rng.normal();
    std::vector<double> x(5), coef(3);
    for (double& v : x) v = rng.normal();
    for (double& v : coef) v = rng.normal();
    auto f = [&](const ParamStore& p) {
      auto y = linear_forward(p, l, x);
      relu_inplace(y);
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += coef[i] * std::tanh(y[i]);
      return s;
    };
    ps.zero_grad();
    auto pre = linear_forward(ps, l, x);
    auto y = pre;
    relu_inplace(y);
    std::vector<double> dy(3);
    for (std::size_t i = 0; i < 3; ++i) dy[i] = coef[i] * (1.0 - std::tanh(y[i]) * std::tanh(y[i]));
    relu_backward_inplace(pre, dy);
    std::vector<double> dx(5, 0.0);
    linear_backward(ps, l, x, dy, dx);
    CHECK(finite_diff_check(f, ps).passed);
  }
}

TEST_CASE("sigmoid is stable at extremes") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(800.0) == 1.0);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(std::isfinite(sigmoid(-800.0)));
  CHECK(sigmoid(2.0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
}
