#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mmsurv/survival.hpp"

using namespace mmsurv;

namespace {

const std::vector<double> kHalf{0.5, 0.5, 0.5, 0.5};

std::vector<double> surv(const std::vector<double>& h) { return survival_from_hazards(h); }

std::vector<double> random_hazards(std::size_t k, Rng& rng) {
  std::vector<double> h(k);
  for (double& x : h) x = rng.uniform(0.01, 0.99);
  return h;
}

// Direct-definition oracle for the uncensored NLL.
double nll_unc_oracle(const std::vector<double>& h, int j) {
  double acc = 0.0;
  for (int k = 0; k < j; ++k) acc -= std::log(1.0 - h[k]);
  return acc - std::log(h[j]);
}

}  // namespace

TEST_CASE("survival recursion") {
  CHECK(surv(kHalf) == std::vector<double>{0.5, 0.25, 0.125, 0.0625});
  const auto s0 = surv({1e-12, 1e-12, 1e-12, 1e-12});
  for (double x : s0) CHECK(x == doctest::Approx(1.0).epsilon(1e-10));
  CHECK_THROWS_AS(surv({0.5, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(surv({0.0, 0.5}), std::invalid_argument);

  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const auto h = random_hazards(2 + rng.uniform_int(6), rng);
    const auto s = surv(h);
    double prod = 1.0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      prod *= 1.0 - h[j];
      CHECK(s[j] == doctest::Approx(prod).epsilon(1e-15));
      if (j > 0) CHECK(s[j] < s[j - 1]);
    }
  }
}

TEST_CASE("uncensored and censored NLL examples") {
  const auto s = surv(kHalf);
  CHECK(nll_uncensored(kHalf, s, 1) == doctest::Approx(1.386294).epsilon(1e-6));
  CHECK(nll_uncensored(kHalf, s, 0) == doctest::Approx(-std::log(0.5)).epsilon(1e-15));
  const std::vector<double> sure{1.0 - 1e-12, 0.5, 0.5, 0.5};
  CHECK(nll_uncensored(sure, surv(sure), 0) < 1e-11);
  CHECK(nll_censored(kHalf, s, 1) == doctest::Approx(1.386294).epsilon(1e-6));
  const std::vector<double> tiny{1e-12, 1e-12, 1e-12, 1e-12};
  CHECK(nll_censored(tiny, surv(tiny), 3) < 1e-10);
  const std::vector<double> big{1 - 1e-12, 1 - 1e-12, 1 - 1e-12, 1 - 1e-12};
  CHECK(nll_censored(big, surv(big), 3) == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(nll_uncensored(kHalf, s, 4), std::invalid_argument);
  CHECK_THROWS_AS(nll_censored(kHalf, s, -1), std::invalid_argument);
}

TEST_CASE("pseudo soft labels") {
  const std::vector<double> h{0.2, 0.3, 0.4, 0.1};
  const auto q = pseudo_soft_label(h, 1);
  CHECK(q[0] == 0.0);
  CHECK(q[1] == 0.0);
  CHECK(q[2] == doctest::Approx(0.574443).epsilon(1e-6));
  CHECK(q[3] == doctest::Approx(0.425557).epsilon(1e-6));
  CHECK(pseudo_soft_label(h, 2) == std::vector<double>{0, 0, 0, 1});
  const auto u = pseudo_soft_label(kHalf, 0);
  for (int j = 1; j < 4; ++j) CHECK(u[j] == doctest::Approx(1.0 / 3));
  CHECK_THROWS_AS(pseudo_soft_label(h, 3), std::invalid_argument);
}

TEST_CASE("pseudo NLL") {
  const auto s = surv(kHalf);
  const auto q = pseudo_soft_label(std::vector<double>{0.2, 0.3, 0.4, 0.1}, 1);
  const double expect = q[2] * nll_uncensored(kHalf, s, 2) + q[3] * nll_uncensored(kHalf, s, 3);
  CHECK(nll_pseudo(kHalf, s, q) == doctest::Approx(expect).epsilon(1e-14));
  // L(j) = -(j+1) ln 0.5 when every hazard is 0.5
  CHECK(nll_pseudo(kHalf, s, q) ==
        doctest::Approx(-(q[2] * 3 + q[3] * 4) * std::log(0.5)).epsilon(1e-14));

  const std::vector<double> two{0, 0, 0.5, 0.5};
  CHECK(nll_pseudo(kHalf, s, two) ==
        doctest::Approx(0.5 * (nll_uncensored(kHalf, s, 2) + nll_uncensored(kHalf, s, 3))));
  CHECK_THROWS_WITH_AS(nll_pseudo(kHalf, s, std::vector<double>{0, 0, 0.5, 0.4}), "q not normalized",
                       std::invalid_argument);

  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 2 + rng.uniform_int(6);
    const auto h = random_hazards(k, rng);
    const auto sv = surv(h);
    const int j = static_cast<int>(rng.uniform_int(k));
    std::vector<double> onehot(k, 0.0);
    onehot[j] = 1.0;
    CHECK(nll_pseudo(h, sv, onehot) == nll_uncensored(h, sv, j));
    CHECK(nll_uncensored(h, sv, j) == doctest::Approx(nll_unc_oracle(h, j)).epsilon(1e-12));
    CHECK(nll_uncensored(h, sv, j) >= 0.0);
    CHECK(nll_censored(h, sv, j) >= 0.0);
  }
}

TEST_CASE("warmup weight") {
  const WarmupSchedule w{100.0};
  CHECK(warmup_weight(100.0, w) == 0.1);
  CHECK(warmup_weight(0.0, w) == doctest::Approx(6.73795e-4).epsilon(1e-5));
  CHECK(warmup_weight(0.0, w) == doctest::Approx(0.1 * std::exp(-5.0)).epsilon(1e-15));
  CHECK(warmup_weight(50.0, w) == doctest::Approx(0.0286505).epsilon(1e-6));
  CHECK(warmup_weight(50.0, w) == doctest::Approx(0.1 * std::exp(-1.25)).epsilon(1e-15));
  CHECK(warmup_weight(250.0, w) == 0.1);
  CHECK_THROWS_AS(warmup_weight(-1.0, w), std::invalid_argument);

  double prev = 0.0;
  for (int i = 0; i <= 10000; ++i) {
    const double v = warmup_weight(i / 100.0, w);
    CHECK(v >= 0.1 * std::exp(-5.0) - 1e-18);
    CHECK(v <= 0.1);
    CHECK(v >= prev);
    prev = v;
  }
}

TEST_CASE("risk score") {
  CHECK(risk_score(std::vector<double>{1, 1, 1, 1}) == -4.0);
  CHECK(risk_score(std::vector<double>{0, 0, 0, 0}) == 0.0);
  CHECK(risk_score(std::vector<double>{0.5, 0.25, 0.125, 0.0625}) == -0.9375);
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    auto h = random_hazards(4, rng);
    const double r0 = risk_score(surv(h));
    h[rng.uniform_int(4)] *= 1.01;
    CHECK(risk_score(surv(h)) > r0);
  }
}

TEST_CASE("survival loss composition") {
  const auto s = surv(kHalf);
  const WarmupSchedule w{10.0};

  SUBCASE("all uncensored equals the uncensored mean") {
    std::vector<SurvivalSample> b{{kHalf, s, true, 1}, {kHalf, s, true, 3}};
    const auto r = survival_loss(b, 3.0, w, {});
    CHECK(r.total == r.uncensored);
    CHECK(r.uncensored == doctest::Approx(0.5 * (nll_uncensored(kHalf, s, 1) + nll_uncensored(kHalf, s, 3))));
  }
  SUBCASE("all censored at t=0 uses the initial warm-up weight") {
    std::vector<SurvivalSample> b{{kHalf, s, false, 0}, {kHalf, s, false, 3}};
    const auto r = survival_loss(b, 0.0, w, {2.0, true});
    CHECK(r.lambda_pro == doctest::Approx(6.73795e-4).epsilon(1e-5));
    CHECK(r.n_pseudo == 1);  // c = K-1 has no later interval
    const double cen = 0.5 * (nll_censored(kHalf, s, 0) + nll_censored(kHalf, s, 3));
    const double pse = nll_pseudo(kHalf, s, pseudo_soft_label(kHalf, 0));
    CHECK(r.censored == doctest::Approx(cen));
    CHECK(r.pseudo == doctest::Approx(pse));
    CHECK(r.total == doctest::Approx(2.0 * (cen + r.lambda_pro * pse)));
  }
  SUBCASE("mixed two-patient case matches the four-op oracle") {
    const std::vector<double> h1{0.1, 0.2, 0.3, 0.4}, h2{0.3, 0.1, 0.6, 0.2};
    const auto s1 = surv(h1), s2 = surv(h2);
    std::vector<SurvivalSample> b{{h1, s1, true, 2}, {h2, s2, false, 1}};
    const double lp = warmup_weight(5.0, w);
    const auto r = survival_loss(b, 5.0, w, {1.5, true});
    const double expect = nll_uncensored(h1, s1, 2) +
                          1.5 * (nll_censored(h2, s2, 1) + lp * nll_pseudo(h2, s2, pseudo_soft_label(h2, 1)));
    CHECK(r.total == doctest::Approx(expect).epsilon(1e-14));
    const auto off = survival_loss(b, 5.0, w, {1.5, false});
    CHECK(off.total == doctest::Approx(nll_uncensored(h1, s1, 2) + 1.5 * nll_censored(h2, s2, 1)));
  }
}

TEST_CASE("survival loss gradient through the hazard head") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    ParamStore ps;
    const HazardHead head = make_hazard_head(ps, "head", 6, 5, 4, rng);
    for (double& b : ps.value(head.fc1.bias).data()) b = 0.2 * rng.normal();
    std::vector<std::vector<double>> zs(3, std::vector<double>(6));
    for (auto& z : zs) for (double& x : z) x = rng.normal();
    const bool events[3] = {true, false, false};
    const int intervals[3] = {static_cast<int>(rng.uniform_int(4)), static_cast<int>(rng.uniform_int(3)), 3};
    const WarmupSchedule w{10.0};
    const double t = rng.uniform(0.0, 10.0);

    // Soft labels are stop-gradient targets: frozen at the unperturbed point.
    std::vector<std::vector<double>> labels(3);
    auto loss = [&](const ParamStore& p, std::vector<HeadCache>* caches, SurvivalLossResult* out) {
      std::vector<std::vector<double>> hs, ss;
      for (std::size_t i = 0; i < 3; ++i) {
        HeadCache c;
        hs.push_back(hazard_forward(p, head, zs[i], &c));
        ss.push_back(survival_from_hazards(hs.back()));
        if (caches) caches->push_back(std::move(c));
      }
      std::vector<SurvivalSample> b;
      for (std::size_t i = 0; i < 3; ++i) {
        if (caches && !events[i] && intervals[i] < 3) labels[i] = pseudo_soft_label(hs[i], intervals[i]);
        b.push_back({hs[i], ss[i], events[i], intervals[i], labels[i]});
      }
      auto r = survival_loss(b, t, w, {1.3, true});
      if (out) *out = r;
      return r.total;
    };
    ps.zero_grad();
    std::vector<HeadCache> caches;
    SurvivalLossResult r;
    loss(ps, &caches, &r);
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> dz(6, 0.0);
      hazard_backward(ps, head, zs[i], caches[i], r.d_hazards[i], dz);
    }
    auto f = [&](const ParamStore& p) { return loss(p, nullptr, nullptr); };
    CHECK(finite_diff_check(f, ps).passed);
  }
}

TEST_CASE("hazard head output range") {
  Rng rng(1);
  ParamStore ps;
  const HazardHead head = make_hazard_head(ps, "head", 256, 128, 4, rng);
  std::vector<double> z(256);
  for (double& x : z) x = 1e4 * rng.normal();
  const auto h = hazard_forward(ps, head, z);
  CHECK(h.size() == 4);
  for (double x : h) {
    CHECK(x > 0.0);
    CHECK(x < 1.0);
  }
  const auto s = survival_from_hazards(h);
  CHECK(std::isfinite(nll_censored(h, s, 3)));
}

TEST_CASE("prediction CSV round trip") {
  std::vector<PredictionRow> rows{{"P1", -1.5, {0.1, 0.2}, {0.9, 0.72}}, {"P2", -0.25, {0.5, 0.5}, {0.5, 0.25}}};
  std::stringstream ss;
  write_predictions_csv(rows, ss);
  CHECK(ss.str().rfind("patient_id,risk,h_0,h_1,S_0,S_1\n", 0) == 0);
  const auto back = read_predictions_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].patient_id == "P1");
  CHECK(back[1].survival == rows[1].survival);
  CHECK(back[0].risk == rows[0].risk);
  std::stringstream bad("patient_id,risk,h_0,S_0\nP1,x,0.1,0.9\n");
  CHECK_THROWS_AS(read_predictions_csv(bad), std::invalid_argument);
}
