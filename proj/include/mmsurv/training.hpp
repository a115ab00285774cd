#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmsurv/aggregation.hpp"
#include "mmsurv/alignment.hpp"
#include "mmsurv/cohort.hpp"
#include "mmsurv/metrics.hpp"
#include "mmsurv/model.hpp"
#include "mmsurv/survival.hpp"

#include <json.hpp>

namespace mmsurv {

struct TrainConfig {
  /// Weight of L_con in L = lambda * L_con + L_surv.
  double lambda = 1.0;
  double lambda_cen = 1.0;
  double tau = 0.07;
  std::size_t queue_size = 64;
  std::size_t intervals = 4;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  /// Warm-up horizon in patient steps; 0 means epochs * n_train.
  std::size_t warmup_total = 0;
  /// Overrides the pair-count ratio when set.
  std::optional<double> lambda_con;
  bool use_contrastive = true;
  bool use_pseudo_labels = true;
  std::size_t attention_hidden = 128;
  std::size_t embed = 256;
  std::size_t adapter_hidden = 256;
  std::size_t head_hidden = 128;

  ModelDims dims() const {
    return {attention_hidden, embed, adapter_hidden, head_hidden, intervals};
  }

  bool operator==(const TrainConfig&) const = default;
};

void validate_config(const TrainConfig& cfg);
nlohmann::ordered_json config_to_json(const TrainConfig& cfg);
/// Starts from `base` and overrides the keys present. Unknown keys or wrong
/// types throw std::invalid_argument naming the field.
TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {});

/// Adaptive-moment optimizer with global-norm gradient clipping.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const ParamStore& params);

  /// Returns the pre-clipping global gradient norm.
  double step(ParamStore& params, const TrainConfig& cfg);

  std::uint64_t steps() const { return steps_; }
  const std::vector<Matrix>& first_moment() const { return m_; }
  const std::vector<Matrix>& second_moment() const { return v_; }

  static Adam restore(std::vector<Matrix> m, std::vector<Matrix> v, std::uint64_t steps);

  bool operator==(const Adam&) const = default;

 private:
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::uint64_t steps_ = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  double total = 0.0;
  double con = 0.0;
  double wr = 0.0;
  double pb = 0.0;
  double uncen = 0.0;
  double cen = 0.0;
  double cen_p = 0.0;
  double surv = 0.0;
  double lambda_pro = 0.0;

  bool operator==(const EpochLog&) const = default;
};

void write_loss_log_csv(std::span<const EpochLog> log, std::ostream& out);

struct Checkpoint {
  TrainConfig config;
  Model model{ModelDims{}, 0};
  Adam optimizer;
  std::uint64_t iteration = 0;
  std::size_t epoch = 0;
  std::size_t n_train = 0;
  double lambda_con = 1.0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::vector<double> interval_edges;
  MemoryQueue queue_image;
  MemoryQueue queue_text;
};

/// Binary container: 8-byte magic "MMSVCKPT", u32 version, u64 header length,
/// a JSON header (config, counters, edges, tensor table), then every tensor as
/// little-endian float64 in table order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const Checkpoint& ckpt, std::ostream& out);
Checkpoint read_checkpoint(std::istream& in);

/// Batch-size-one training loop. The cohort must already be binned with
/// cfg.intervals intervals.
class Trainer {
 public:
  Trainer(Cohort cohort, TrainConfig cfg);
  static Trainer resume(Cohort cohort, const Checkpoint& ckpt);

  EpochLog run_epoch();
  std::vector<EpochLog> run();
  bool done() const { return epoch_ >= cfg_.epochs; }

  Checkpoint checkpoint() const;
  const Model& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  double lambda_con() const { return lambda_con_; }
  std::uint64_t iteration() const { return iteration_; }
  const MemoryQueue& queue_image() const { return queue_image_; }
  const MemoryQueue& queue_text() const { return queue_text_; }

  /// Ids of every patient that fed a queue or a parameter update.
  const std::set<std::string>& touched_ids() const { return touched_; }

 private:
  Trainer(Cohort cohort, TrainConfig cfg, Model model);
  std::vector<std::size_t> epoch_order(std::size_t epoch) const;
  void init_queues();

  Cohort cohort_;
  TrainConfig cfg_;
  Model model_;
  Adam adam_;
  Rng rng_;
  double lambda_con_ = 1.0;
  double t_total_ = 1.0;
  std::uint64_t iteration_ = 0;
  std::size_t epoch_ = 0;
  MemoryQueue queue_image_;
  MemoryQueue queue_text_;
  std::set<std::string> touched_;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

TrainResult train(const Cohort& cohort, const TrainConfig& cfg);

struct PatientPrediction {
  std::string id;
  double time = 0.0;
  bool event = false;
  int interval = -1;
  std::vector<double> hazards;
  std::vector<double> survival;
  double risk = 0.0;
  std::map<ModalityKind, double> modality_attention;
};

struct Evaluation {
  std::vector<PatientPrediction> predictions;
  std::vector<InstanceAttention> intra_attention;
  std::vector<ModalityAttention> inter_attention;
  MetricsBundle metrics;
};

/// Pure inference over a cohort binned on the model's grid.
Evaluation evaluate(const Model& model, const Cohort& cohort);
/// Throws std::invalid_argument when the cohort's edges differ from the checkpoint's.
Evaluation evaluate(const Checkpoint& ckpt, const Cohort& cohort);

std::vector<SurvivalOutcome> to_outcomes(std::span<const PatientPrediction> preds);
std::vector<PredictionRow> to_prediction_rows(std::span<const PatientPrediction> preds);

/// Patient index -> fold, seeded; fold sizes differ by at most one.
std::vector<std::size_t> assign_folds(std::size_t n, std::size_t folds, std::uint64_t seed);

struct FoldResult {
  std::size_t fold = 0;
  std::vector<std::string> test_ids;
  std::vector<std::string> trained_ids;
  std::vector<double> interval_edges;
  MetricsBundle metrics;
  std::vector<PatientPrediction> predictions;
  std::vector<EpochLog> log;
};

struct CvResult {
  std::vector<FoldResult> folds;
  double ci_mean = 0.0;
  double ci_std = 0.0;
  double brier_mean = 0.0;
  double brier_std = 0.0;
  /// Metrics over the pooled test predictions of every fold.
  MetricsBundle pooled;
};

/// Patient-disjoint k-fold cross-validation. Interval edges are refit on each
/// training fold and applied unchanged to its test fold.
CvResult cross_validate(const Cohort& cohort, const TrainConfig& cfg, std::size_t folds);
std::string cv_to_json(const CvResult& cv, int indent = 2);

struct PipelineGradcheck {
  std::size_t points = 0;
  double max_rel_error = 0.0;
  bool passed = true;
  std::vector<GradCheckReport> reports;
};

/// Finite-difference check of the composed loss (aggregation, alignment and
/// survival terms) summed over a 3-patient synthetic cohort, at `points`
/// independently seeded parameter draws.
PipelineGradcheck run_pipeline_gradcheck(std::uint64_t seed, std::size_t points,
                                         const FiniteDiffOptions& opts,
                                         const ModelDims& dims = {});

}  // namespace mmsurv
