#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmsurv/training.hpp"
#include "test_util.hpp"

using namespace mmsurv;

namespace {

TrainConfig small_config() {
  TrainConfig c;
  c.attention_hidden = 8;
  c.embed = 16;
  c.adapter_hidden = 8;
  c.head_hidden = 8;
  c.queue_size = 4;
  c.epochs = 2;
  c.seed = 7;
  c.learning_rate = 1e-3;
  return c;
}

Cohort small_cohort(std::size_t n, std::uint64_t seed, double signal = 1.0) {
  GenConfig g;
  g.n_patients = n;
  g.seed = seed;
  g.signal = signal;
  return bin_intervals(generate_synthetic(g), 4);
}

std::string bytes(const Checkpoint& c) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(c, out);
  return out.str();
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (ParamId i = 0; i < a.size(); ++i) {
    if (a.name(i) != b.name(i) || a.value(i).data().size() != b.value(i).data().size()) return false;
    if (!std::equal(a.value(i).data().begin(), a.value(i).data().end(), b.value(i).data().begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config JSON") {
  TrainConfig c = small_config();
  c.lambda_con = 0.25;
  c.use_pseudo_labels = false;
  CHECK(config_from_json(nlohmann::json::parse(config_to_json(c).dump())) == c);
  CHECK(config_from_json(nlohmann::json::parse(R"({"tau": 0.5})")).tau == 0.5);
  CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json::parse(R"({"taux": 0.5})")),
                       "config field 'taux': unknown field", std::invalid_argument);
  CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json::parse(R"({"epochs": "3"})")),
                       "config field 'epochs': wrong type", std::invalid_argument);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"epochs": -1})")), std::invalid_argument);

  TrainConfig bad = small_config();
  bad.tau = 0.0;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = small_config();
  bad.intervals = 1;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
  bad = small_config();
  bad.beta2 = 1.0;
  CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
}

TEST_CASE("published config schema matches the defaults") {
  std::ifstream in(std::string(MMSURV_SOURCE_DIR) + "/schema/config.schema.json");
  REQUIRE(in);
  const auto schema = nlohmann::json::parse(in);
  CHECK(schema["additionalProperties"] == false);
  const auto& props = schema["properties"];
  const auto defaults = nlohmann::json::parse(config_to_json(TrainConfig{}).dump());
  CHECK(props.size() == defaults.size());
  for (const auto& [key, value] : defaults.items()) {
    INFO(key);
    REQUIRE(props.contains(key));
    CHECK(props[key]["default"] == value);
  }
  nlohmann::json all;
  for (const auto& [key, p] : props.items()) all[key] = p["default"];
  CHECK(config_from_json(all) == TrainConfig{});
}

TEST_CASE("Adam") {
  ParamStore ps;
  const ParamId a = ps.add("a", Matrix(1, 2, std::vector<double>{1.0, -1.0}));
  ps.grad(a) = Matrix(1, 2, std::vector<double>{0.5, -2.0});
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  Adam opt(ps);
  const double norm = opt.step(ps, cfg);
  CHECK(norm == doctest::Approx(std::sqrt(0.25 + 4.0)));
  // first bias-corrected step moves each entry by lr against the gradient sign
  CHECK(ps.value(a)(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(ps.value(a)(0, 1) == doctest::Approx(-0.9).epsilon(1e-6));
  CHECK(opt.steps() == 1);

  // clipping rescales to the global norm before the moments see it
  ParamStore big;
  const ParamId b = big.add("b", Matrix(1, 1, std::vector<double>{0.0}));
  big.grad(b)(0, 0) = 100.0;
  Adam ob(big);
  CHECK(ob.step(big, cfg) == 100.0);
  CHECK(ob.first_moment()[0](0, 0) == doctest::Approx(0.1 * 5.0));

  ps.grad(a)(0, 1) = std::nan("");
  CHECK_THROWS_WITH_AS(opt.step(ps, cfg), "non-finite gradient in parameter a", std::runtime_error);
}

TEST_CASE("determinism: 1 epoch, 1 patient") {
  const Cohort big = small_cohort(20, 3);
  Cohort c;
  c.patients = {big.patients[0]};
  c.interval_edges = big.interval_edges;
  TrainConfig cfg = small_config();
  cfg.epochs = 1;
  const auto r1 = train(c, cfg);
  const auto r2 = train(c, cfg);
  CHECK(bytes(r1.checkpoint) == bytes(r2.checkpoint));
  CHECK(r1.log == r2.log);
}

TEST_CASE("checkpoint round trip and bit-identical resume") {
  const Cohort c = small_cohort(30, 5);
  TrainConfig cfg = small_config();
  cfg.epochs = 3;
  const auto full = train(c, cfg);

  Trainer t(c, cfg);
  t.run_epoch();
  const auto path = std::filesystem::temp_directory_path() / "mmsurv_test_resume.ckpt";
  save_checkpoint(t.checkpoint(), path);
  const Checkpoint mid = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(bytes(mid) == bytes(t.checkpoint()));
  CHECK(mid.queue_image == t.queue_image());

  Trainer resumed = Trainer::resume(c, mid);
  resumed.run();
  CHECK(bytes(resumed.checkpoint()) == bytes(full.checkpoint));
  CHECK(same_params(resumed.model().params(), full.checkpoint.model.params()));

  std::string raw = bytes(full.checkpoint);
  std::istringstream bad_magic("XXXXXXXX" + raw.substr(8));
  CHECK_THROWS_WITH_AS(read_checkpoint(bad_magic), "checkpoint: bad magic", std::invalid_argument);
  std::istringstream truncated(raw.substr(0, raw.size() - 3));
  CHECK_THROWS_AS(read_checkpoint(truncated), std::invalid_argument);

  Cohort other = c;
  other.interval_edges[0] += 0.5;
  CHECK_THROWS_AS(Trainer::resume(other, mid), std::invalid_argument);
}

TEST_CASE("lambda = 0 equals a survival-only run") {
  const Cohort c = small_cohort(25, 9);
  TrainConfig zero = small_config();
  zero.lambda = 0.0;
  TrainConfig off = small_config();
  off.use_contrastive = false;
  const auto a = train(c, zero);
  const auto b = train(c, off);
  CHECK(same_params(a.checkpoint.model.params(), b.checkpoint.model.params()));
  // L_con is still computed and logged
  CHECK(a.log[0].con > 0.0);
  CHECK(b.log[0].con == 0.0);
}

TEST_CASE("total gradient is lambda * grad(L_con) + grad(L_surv)") {
  Rng rng(3);
  const ModelDims dims{8, 16, 8, 8, 4};
  Model model(dims, 11);
  auto queue = [&](const char* tag) {
    MemoryQueue q(4);
    for (int i = 0; i < 4; ++i) {
      QueuePair p{tag + std::to_string(i), std::vector<double>(512), std::vector<double>(512)};
      for (double& x : p.hub) x = rng.normal();
      for (double& x : p.other) x = rng.normal();
      q.push(std::move(p));
    }
    return q;
  };
  const MemoryQueue qi = queue("i"), qt = queue("t");
  for (int trial = 0; trial < 4; ++trial) {
    PatientRecord p = testutil::full_patient("P", 5.0, trial % 2 == 0, rng, 2);
    p.interval = trial % 3;

    LossSettings s;
    s.lambda = 0.7;
    s.lambda_con = 0.4;
    s.warmup.t_total = 10.0;
    s.t = 3.0;
    auto grads = [&](const LossSettings& ls) {
      model.params().zero_grad();
      patient_loss_and_grad(model, p, {&qi, &qt}, ls);
      std::vector<double> g;
      for (ParamId i = 0; i < model.params().size(); ++i) {
        const auto& d = model.params().grad(i).data();
        g.insert(g.end(), d.begin(), d.end());
      }
      return g;
    };
    const auto total = grads(s);
    LossSettings con = s;
    con.use_survival = false;
    con.lambda = 1.0;
    LossSettings surv = s;
    surv.use_contrastive = false;
    const auto gc = grads(con);
    const auto gs = grads(surv);
    double worst = 0.0;
    for (std::size_t i = 0; i < total.size(); ++i) {
      worst = std::max(worst, std::abs(total[i] - (s.lambda * gc[i] + gs[i])));
    }
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("non-finite loss aborts with the iteration index and parameter") {
  const Cohort c = small_cohort(6, 2);
  TrainConfig cfg = small_config();
  Trainer t(c, cfg);
  Checkpoint ck = t.checkpoint();
  ParamStore& ps = ck.model.params();
  const ParamId id = ps.id("head.fc2.bias");
  ps.value(id)(0, 1) = std::nan("");
  Trainer bad = Trainer::resume(c, ck);
  try {
    bad.run_epoch();
    FAIL("expected an abort");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss at iteration 0") == 0);
    CHECK(msg.find("first non-finite value in parameter head.fc2.bias") != std::string::npos);
  }
}

TEST_CASE("a zero hub vector disables its contrastive side") {
  Rng rng(5);
  Model model(ModelDims{8, 16, 8, 8, 4}, 3);
  ParamStore& ps = model.params();
  const Adapter& ad = model.adapter(ModalityKind::Radiology);
  ps.value(ad.fc1.weight).fill(0.0);
  ps.value(ad.fc1.bias).fill(-1.0);
  MemoryQueue q(3);
  for (int i = 0; i < 3; ++i) {
    QueuePair pair{"Q" + std::to_string(i), std::vector<double>(512), std::vector<double>(512)};
    for (double& x : pair.hub) x = rng.normal();
    for (double& x : pair.other) x = rng.normal();
    q.push(std::move(pair));
  }
  PatientRecord p = testutil::full_patient("P", 5.0, true, rng);
  p.interval = 1;
  LossSettings s;
  ps.zero_grad();
  const auto loss = patient_loss_and_grad(model, p, {&q, &q}, s);
  CHECK_FALSE(loss.has_wr);
  CHECK(loss.has_pb);
  CHECK(std::isfinite(loss.total));
}

TEST_CASE("folds") {
  const auto f = assign_folds(10, 5, 1);
  std::vector<int> count(5, 0);
  for (auto x : f) ++count[x];
  for (int n : count) CHECK(n == 2);
  CHECK(assign_folds(10, 5, 1) == f);
  CHECK(assign_folds(10, 5, 2) != f);
  const auto g = assign_folds(11, 3, 1);
  CHECK(std::count(g.begin(), g.end(), 0u) == 4);
  CHECK_THROWS_AS(assign_folds(3, 5, 1), std::invalid_argument);
  CHECK_THROWS_AS(assign_folds(10, 1, 1), std::invalid_argument);
}

TEST_CASE("cross-validation has no test-fold leakage") {
  // Test folds get far-off event times: leaking them would move the edges.
  Cohort c = small_cohort(20, 4);
  c.interval_edges.clear();
  for (auto& p : c.patients) p.interval = -1;
  TrainConfig cfg = small_config();
  cfg.epochs = 1;
  const auto fold_of = assign_folds(c.patients.size(), 4, cfg.seed);
  for (std::size_t i = 0; i < c.patients.size(); ++i) {
    c.patients[i].time = 10.0 * static_cast<double>(fold_of[i] + 1) + static_cast<double>(i % 5);
    c.patients[i].event = true;
  }
  const auto cv = cross_validate(c, cfg, 4);
  REQUIRE(cv.folds.size() == 4);
  std::set<std::vector<double>> distinct;
  for (const auto& f : cv.folds) {
    std::vector<PatientRecord> train_only;
    for (std::size_t i = 0; i < c.patients.size(); ++i) {
      if (fold_of[i] != f.fold) train_only.push_back(c.patients[i]);
    }
    CHECK(f.interval_edges == fit_interval_edges(train_only, 4));
    distinct.insert(f.interval_edges);
    CHECK(f.test_ids.size() == 5);
    for (const auto& id : f.test_ids) {
      CHECK(std::find(f.trained_ids.begin(), f.trained_ids.end(), id) == f.trained_ids.end());
    }
    CHECK(f.trained_ids.size() == 15);
  }
  CHECK(distinct.size() == 4);
  const auto j = nlohmann::json::parse(cv_to_json(cv));
  CHECK(j["folds"].size() == 4);
  CHECK(j["mean"].contains("ci_std"));
}

TEST_CASE("evaluation is pure and checks edges") {
  const Cohort c = small_cohort(20, 8);
  const auto r = train(c, small_config());
  const auto before = bytes(r.checkpoint);
  const auto e1 = evaluate(r.checkpoint, c);
  const auto e2 = evaluate(r.checkpoint, c);
  CHECK(bytes(r.checkpoint) == before);
  REQUIRE(e1.predictions.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(e1.predictions[i].hazards == e2.predictions[i].hazards);
    CHECK(e1.predictions[i].risk == e2.predictions[i].risk);
  }
  CHECK(e1.metrics.ci == e2.metrics.ci);
  Cohort shifted = c;
  shifted.interval_edges[1] += 1.0;
  CHECK_THROWS_AS(evaluate(r.checkpoint, shifted), std::invalid_argument);
}

TEST_CASE("inference with only the mandatory modalities") {
  Cohort c = small_cohort(20, 12);
  const auto r = train(c, small_config());
  for (auto& p : c.patients) {
    p.feature_sets.erase(ModalityKind::Radiology);
    p.feature_sets.erase(ModalityKind::ClinicalNotes);
  }
  const auto ev = evaluate(r.checkpoint, c);
  for (const auto& p : ev.predictions) {
    for (double h : p.hazards) CHECK(std::isfinite(h));
    CHECK(std::isfinite(p.risk));
    CHECK(p.modality_attention.size() == 2);
  }
  // and training on such a cohort disables both queue sides
  Trainer t(c, small_config());
  CHECK(t.queue_image().size() == 0);
  t.run();
}

TEST_CASE("untrained model on a signal-0 cohort is at chance") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Cohort c = small_cohort(200, 100 + seed, 0.0);
    Model m(ModelDims{}, seed);
    const auto ev = evaluate(m, c);
    REQUIRE(ev.metrics.ci);
    CHECK(std::abs(*ev.metrics.ci - 0.5) <= 0.07);
  }
}

TEST_CASE("training lowers the survival loss over 30 epochs") {
  const Cohort c = small_cohort(200, 21);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 21;
  Trainer t(c, cfg);
  const auto log = t.run();
  REQUIRE(log.size() == 30);
  CHECK(log.back().surv < log.front().surv);
  for (const auto& e : log) CHECK(std::isfinite(e.total));
  std::ostringstream csv;
  write_loss_log_csv(log, csv);
  CHECK(csv.str().rfind("epoch,L,L_con,L_WR,L_PB,L_uncen,L_cen,L_cen_p,lambda_pro\n", 0) == 0);
}
