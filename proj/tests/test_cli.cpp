#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mmsurv/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = mmsurv::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("mmsurv_cli_" + std::to_string(std::rand()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

const std::vector<std::string> kSmall = {"--attention-hidden", "8", "--embed",     "16",
                                         "--adapter-hidden",   "8", "--head-hidden", "8",
                                         "--queue-size",       "4", "--epochs",     "2"};

std::vector<std::string> with_small(std::vector<std::string> args) {
  args.insert(args.end(), kSmall.begin(), kSmall.end());
  return args;
}

}  // namespace

TEST_CASE("gen is deterministic") {
  TempDir d;
  REQUIRE(run({"gen", "--patients", "12", "--seed", "4", "--out", d / "a.jsonl"}).code == 0);
  REQUIRE(run({"gen", "--patients", "12", "--seed", "4", "--out", d / "b.jsonl"}).code == 0);
  REQUIRE(run({"gen", "--patients", "12", "--seed", "5", "--out", d / "c.jsonl"}).code == 0);
  CHECK(slurp(d / "a.jsonl") == slurp(d / "b.jsonl"));
  CHECK(slurp(d / "a.jsonl") != slurp(d / "c.jsonl"));
}

TEST_CASE("train, eval, km and cv end to end") {
  TempDir d;
  REQUIRE(run({"gen", "--patients", "40", "--seed", "1", "--out", d / "c.jsonl"}).code == 0);
  {
    std::ofstream cfg(d / "cfg.json");
    cfg << R"({"seed": 3, "learning_rate": 0.001})";
  }
  const auto tr = run(with_small({"train", "--cohort", d / "c.jsonl", "--config", d / "cfg.json", "--out",
                                  d / "m.ckpt"}));
  REQUIRE_MESSAGE(tr.code == 0, tr.err);
  CHECK(fs::exists(d / "m.ckpt.loss.csv"));
  CHECK(slurp(d / "m.ckpt").rfind("MMSVCKPT", 0) == 0);

  const auto ev = run({"eval", "--model", d / "m.ckpt", "--cohort", d / "c.jsonl", "--out", d / "metrics.json"});
  REQUIRE_MESSAGE(ev.code == 0, ev.err);
  const auto m = nlohmann::json::parse(slurp(d / "metrics.json"));
  REQUIRE(m["ci"].is_number());
  REQUIRE(m["brier"].is_number());
  CHECK(std::isfinite(m["ci"].get<double>()));
  CHECK(std::isfinite(m["brier"].get<double>()));
  CHECK(m["n"] == 40);
  CHECK(fs::exists(d / "metrics.predictions.csv"));
  CHECK(slurp(d / "metrics.intra_attention.csv").rfind("patient_id,modality,instance_index,score\n", 0) == 0);
  CHECK(slurp(d / "metrics.inter_attention.csv").rfind("patient_id,modality,score\n", 0) == 0);

  const auto km = run({"km", "--cohort", d / "c.jsonl", "--predictions", d / "metrics.predictions.csv", "--out",
                       d / "km.csv"});
  REQUIRE_MESSAGE(km.code == 0, km.err);
  CHECK(slurp(d / "km.csv").rfind("group,time,survival,at_risk,events\n", 0) == 0);
  CHECK(km.out.find("logrank") != std::string::npos);

  const auto cv = run(with_small({"cv", "--cohort", d / "c.jsonl", "--folds", "2", "--out", d / "cv.json"}));
  REQUIRE_MESSAGE(cv.code == 0, cv.err);
  const auto j = nlohmann::json::parse(slurp(d / "cv.json"));
  CHECK(j["folds"].size() == 2);
  CHECK(j["mean"]["ci"].is_number());
}

TEST_CASE("flags override the config file") {
  TempDir d;
  REQUIRE(run({"gen", "--patients", "20", "--seed", "2", "--out", d / "c.jsonl"}).code == 0);
  {
    std::ofstream cfg(d / "cfg.json");
    cfg << R"({"epochs": 7})";
  }
  auto args = with_small({"train", "--cohort", d / "c.jsonl", "--config", d / "cfg.json", "--out", d / "m.ckpt"});
  REQUIRE(run(args).code == 0);
  std::ifstream log(d / "m.ckpt.loss.csv");
  std::string line;
  int rows = -1;
  while (std::getline(log, line)) ++rows;
  CHECK(rows == 2);  // --epochs 2 wins over the file's 7
}

TEST_CASE("validation errors exit with 1") {
  TempDir d;
  CHECK(run({"gen", "--patients", "5", "--bogus", "--out", d / "x.jsonl"}).code == 1);
  CHECK(run({"train", "--cohort", d / "missing.jsonl", "--out", d / "m.ckpt"}).code == 1);
  CHECK(run({}).code == 1);
  CHECK(run({"gen", "--patients", "0", "--out", d / "x.jsonl"}).code == 1);
  {
    std::ofstream cfg(d / "cfg.json");
    cfg << R"({"tau": -1})";
  }
  REQUIRE(run({"gen", "--patients", "20", "--out", d / "c.jsonl"}).code == 0);
  const auto r = run({"train", "--cohort", d / "c.jsonl", "--config", d / "cfg.json", "--out", d / "m.ckpt"});
  CHECK(r.code == 1);
  CHECK(r.err.find("tau") != std::string::npos);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("gradcheck subcommand") {
  const auto r = run({"gradcheck", "--points", "1", "--seed", "3"});
  CHECK_MESSAGE(r.code == 0, r.err);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["passed"] == true);
}

TEST_CASE("installed binary") {
  const char* bin = std::getenv("MMSURV_CLI");
  if (!bin) return;
  TempDir d;
  const std::string cmd = std::string(bin) + " gen --patients 5 --out " + (d / "c.jsonl") + " > /dev/null";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(d / "c.jsonl"));
  const std::string bad = std::string(bin) + " frobnicate 2> /dev/null";
  CHECK(WEXITSTATUS(std::system(bad.c_str())) == 1);
}
