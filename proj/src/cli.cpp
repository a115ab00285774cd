#include "mmsurv/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <stdexcept>

#include "mmsurv/training.hpp"

namespace mmsurv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Flag overrides for TrainConfig; applied on top of the config file.
class ConfigFlags {
 public:
  void attach(CLI::App* app) {
    num(app, "--lambda", &TrainConfig::lambda, "weight of the contrastive loss");
    num(app, "--lambda-cen", &TrainConfig::lambda_cen, "weight of the censored terms");
    num(app, "--tau", &TrainConfig::tau, "InfoNCE temperature");
    num(app, "--queue-size", &TrainConfig::queue_size, "memory queue capacity");
    num(app, "--intervals", &TrainConfig::intervals, "number of discrete time intervals");
    num(app, "--learning-rate", &TrainConfig::learning_rate, "Adam step size");
    num(app, "--beta1", &TrainConfig::beta1, "Adam first-moment decay");
    num(app, "--beta2", &TrainConfig::beta2, "Adam second-moment decay");
    num(app, "--adam-eps", &TrainConfig::adam_eps, "Adam epsilon");
    num(app, "--grad-clip", &TrainConfig::grad_clip, "global gradient-norm clip");
    num(app, "--epochs", &TrainConfig::epochs, "training epochs");
    num(app, "--seed", &TrainConfig::seed, "seed for init, shuffling and folds");
    num(app, "--warmup-total", &TrainConfig::warmup_total, "warm-up horizon in steps (0: whole run)");
    num(app, "--use-contrastive", &TrainConfig::use_contrastive, "enable the contrastive loss");
    num(app, "--use-pseudo-labels", &TrainConfig::use_pseudo_labels, "enable censored pseudo labels");
    num(app, "--attention-hidden", &TrainConfig::attention_hidden, "attention hidden width");
    num(app, "--embed", &TrainConfig::embed, "patient embedding width");
    num(app, "--adapter-hidden", &TrainConfig::adapter_hidden, "adapter hidden width");
    num(app, "--head-hidden", &TrainConfig::head_hidden, "hazard head hidden width");
    auto* opt = app->add_option("--lambda-con", lambda_con_, "fixed ratio between the two contrastive sides");
    setters_.push_back([opt, this](TrainConfig& c) {
      if (opt->count()) c.lambda_con = lambda_con_;
    });
    app->add_option("--config", config_path_, "JSON config file")->check(CLI::ExistingFile);
  }

  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw std::invalid_argument("cannot open " + config_path_);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::exception& e) {
        throw std::invalid_argument("config " + config_path_ + ": " + e.what());
      }
      cfg = config_from_json(j, cfg);
    }
    for (const auto& set : setters_) set(cfg);
    validate_config(cfg);
    return cfg;
  }

 private:
  template <typename T>
  void num(CLI::App* app, const std::string& flag, T TrainConfig::*field, const std::string& help) {
    auto slot = std::make_shared<T>();
    auto* opt = app->add_option(flag, *slot, help);
    setters_.push_back([opt, slot, field](TrainConfig& c) {
      if (opt->count()) c.*field = *slot;
    });
  }

  std::vector<std::function<void(TrainConfig&)>> setters_;
  double lambda_con_ = 1.0;
  std::string config_path_;
};

fs::path sibling(const fs::path& out, const std::string& suffix) {
  fs::path p = out;
  p.replace_extension();
  p += suffix;
  return p;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(path, mode);
  if (!f) throw std::invalid_argument("cannot open " + path.string() + " for writing");
  return f;
}

void write_text(const fs::path& path, const std::string& text) {
  auto f = open_out(path);
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Cohort binned_for(Cohort cohort, std::size_t intervals) {
  if (!cohort.binned()) return bin_intervals(std::move(cohort), intervals);
  if (cohort.num_intervals() != intervals) {
    throw std::invalid_argument("cohort is binned into " + std::to_string(cohort.num_intervals()) +
                                " intervals but the config asks for " + std::to_string(intervals));
  }
  return cohort;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-modal discrete-time survival modelling"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "write a synthetic cohort as JSON Lines");
  GenConfig gc;
  std::string gen_out;
  gen->add_option("--patients", gc.n_patients, "number of patients");
  gen->add_option("--seed", gc.seed, "generator seed");
  gen->add_option("--signal", gc.signal, "log-time shift per unit latent risk");
  gen->add_option("--censor-rate", gc.censor_rate, "target censoring fraction");
  gen->add_option("--feature-signal", gc.feature_signal, "feature loading norm on the latent risk");
  gen->add_option("--weibull-shape", gc.weibull_shape, "Weibull shape of event times");
  gen->add_option("--out", gen_out, "output JSONL path")->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  ConfigFlags tr_flags;
  tr_flags.attach(tr);
  std::string tr_cohort, tr_out, tr_log;
  tr->add_option("--cohort", tr_cohort, "cohort JSONL")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "checkpoint path")->required();
  tr->add_option("--log", tr_log, "loss log CSV (default: <out>.loss.csv)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a cohort");
  std::string ev_model, ev_cohort, ev_out, ev_pred;
  ev->add_option("--model", ev_model, "checkpoint path")->required()->check(CLI::ExistingFile);
  ev->add_option("--cohort", ev_cohort, "cohort JSONL")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "metrics JSON path")->required();
  ev->add_option("--predictions", ev_pred, "predictions CSV (default: <out>.predictions.csv)");

  // cv
  auto* cv = app.add_subcommand("cv", "k-fold cross-validation");
  ConfigFlags cv_flags;
  cv_flags.attach(cv);
  std::string cv_cohort, cv_out, cv_pred;
  std::size_t folds = 5;
  cv->add_option("--cohort", cv_cohort, "cohort JSONL")->required()->check(CLI::ExistingFile);
  cv->add_option("--folds", folds, "number of folds");
  cv->add_option("--out", cv_out, "metrics JSON path (default: stdout)");
  cv->add_option("--predictions", cv_pred, "pooled test predictions CSV");

  // gradcheck
  auto* gck = app.add_subcommand("gradcheck", "finite-difference check of the composed loss");
  std::uint64_t gck_seed = 1;
  std::size_t gck_points = 20;
  FiniteDiffOptions fd;
  fd.max_entries_per_param = 6;
  std::string gck_out;
  gck->add_option("--seed", gck_seed, "seed for cohort and parameter points");
  gck->add_option("--points", gck_points, "number of parameter points");
  gck->add_option("--step", fd.step, "central-difference step");
  gck->add_option("--tol", fd.tol, "relative error tolerance");
  gck->add_option("--entries", fd.max_entries_per_param,
                  "sampled entries per parameter tensor (0: all)");
  gck->add_option("--out", gck_out, "report JSON path (default: stdout)");

  // km
  auto* km = app.add_subcommand("km", "Kaplan-Meier curves of a median risk split");
  std::string km_cohort, km_pred, km_out;
  km->add_option("--cohort", km_cohort, "cohort JSONL with times and events")
      ->required()
      ->check(CLI::ExistingFile);
  km->add_option("--predictions", km_pred, "predictions CSV")->required()->check(CLI::ExistingFile);
  km->add_option("--out", km_out, "KM CSV path")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  try {
    if (gen->parsed()) {
      save_cohort(generate_synthetic(gc), gen_out);
      out << "wrote " << gc.n_patients << " patients to " << gen_out << '\n';
    } else if (tr->parsed()) {
      const TrainConfig cfg = tr_flags.resolve();
      Cohort cohort = binned_for(load_cohort(tr_cohort), cfg.intervals);
      Trainer trainer(std::move(cohort), cfg);
      const auto log = trainer.run();
      save_checkpoint(trainer.checkpoint(), tr_out);
      const fs::path log_path = tr_log.empty() ? fs::path(tr_out + ".loss.csv") : fs::path(tr_log);
      auto f = open_out(log_path);
      write_loss_log_csv(log, f);
      out << "trained " << log.size() << " epochs; checkpoint " << tr_out << ", loss log "
          << log_path.string() << '\n';
    } else if (ev->parsed()) {
      const Checkpoint ckpt = load_checkpoint(ev_model);
      Cohort cohort = load_cohort(ev_cohort);
      if (!cohort.binned()) apply_interval_edges(cohort, ckpt.interval_edges);
      const Evaluation e = evaluate(ckpt, cohort);
      write_text(ev_out, metrics_to_json(e.metrics) + "\n");
      const fs::path pred = ev_pred.empty() ? sibling(ev_out, ".predictions.csv") : fs::path(ev_pred);
      {
        auto f = open_out(pred);
        write_predictions_csv(to_prediction_rows(e.predictions), f);
      }
      {
        auto f = open_out(sibling(ev_out, ".intra_attention.csv"));
        write_intra_attention_csv(e.intra_attention, f);
      }
      {
        auto f = open_out(sibling(ev_out, ".inter_attention.csv"));
        write_inter_attention_csv(e.inter_attention, f);
      }
      out << metrics_to_json(e.metrics) << '\n';
    } else if (cv->parsed()) {
      const TrainConfig cfg = cv_flags.resolve();
      const CvResult res = cross_validate(load_cohort(cv_cohort), cfg, folds);
      const std::string text = cv_to_json(res) + "\n";
      if (cv_out.empty()) {
        out << text;
      } else {
        write_text(cv_out, text);
        out << "mean CI " << res.ci_mean << ", mean Brier " << res.brier_mean << '\n';
      }
      if (!cv_pred.empty()) {
        std::vector<PatientPrediction> pooled;
        for (const auto& f : res.folds) pooled.insert(pooled.end(), f.predictions.begin(), f.predictions.end());
        auto f = open_out(cv_pred);
        write_predictions_csv(to_prediction_rows(pooled), f);
      }
    } else if (gck->parsed()) {
      fd.seed = gck_seed;
      const PipelineGradcheck r = run_pipeline_gradcheck(gck_seed, gck_points, fd);
      nlohmann::ordered_json j;
      j["passed"] = r.passed;
      j["points"] = r.points;
      j["tol"] = fd.tol;
      j["step"] = fd.step;
      j["max_rel_error"] = r.max_rel_error;
      nlohmann::ordered_json per = nlohmann::ordered_json::object();
      for (const auto& rep : r.reports) {
        for (const auto& pc : rep.params) {
          auto& slot = per[pc.name];
          const double prev = slot.is_null() ? 0.0 : slot["max_rel_error"].get<double>();
          const std::size_t checked = slot.is_null() ? 0 : slot["checked"].get<std::size_t>();
          const std::size_t failed = slot.is_null() ? 0 : slot["failed"].get<std::size_t>();
          slot["checked"] = checked + pc.checked;
          slot["failed"] = failed + pc.failed;
          slot["max_rel_error"] = std::max(prev, pc.max_rel_error);
        }
      }
      j["params"] = std::move(per);
      const std::string text = j.dump(2) + "\n";
      if (gck_out.empty()) {
        out << text;
      } else {
        write_text(gck_out, text);
        out << (r.passed ? "PASS" : "FAIL") << " max relative error " << r.max_rel_error << '\n';
      }
      if (!r.passed) {
        err << "gradient check failed\n";
        return kExitRuntime;
      }
    } else if (km->parsed()) {
      const Cohort cohort = load_cohort(km_cohort);
      std::ifstream in(km_pred);
      if (!in) throw std::invalid_argument("cannot open " + km_pred);
      const auto rows = read_predictions_csv(in);
      std::map<std::string, const PatientRecord*> by_id;
      for (const auto& p : cohort.patients) by_id[p.id] = &p;
      std::vector<SurvivalOutcome> outcomes;
      for (const auto& r : rows) {
        auto it = by_id.find(r.patient_id);
        if (it == by_id.end()) {
          throw std::invalid_argument("predictions: patient " + r.patient_id + " not in cohort");
        }
        outcomes.push_back({it->second->time, it->second->event, r.risk, r.survival,
                            it->second->interval});
      }
      const MedianSplit split = median_split(outcomes);
      const auto high = gather(outcomes, split.high);
      const auto low = gather(outcomes, split.low);
      auto f = open_out(km_out);
      write_km_csv(kaplan_meier(high), kaplan_meier(low), f);
      const LogrankResult lr = logrank_test(high, low);
      out << "high " << high.size() << ", low " << low.size() << ", logrank chi2 " << lr.chi2
          << ", p " << lr.p << '\n';
    }
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace mmsurv::cli
