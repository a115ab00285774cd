#pragma once

// Discrete-time hazard model and its losses. Hazards h_j are per-interval
// conditional event probabilities; S_j = prod_{k<=j} (1 - h_k).

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mmsurv/layers.hpp"
#include "mmsurv/numerics.hpp"

namespace mmsurv {

/// Hazards are kept inside [kHazardFloor, 1 - kHazardFloor].
inline constexpr double kHazardFloor = 1e-12;

/// affine -> ReLU -> affine -> sigmoid
struct HazardHead {
  Linear fc1;
  Linear fc2;
};

HazardHead make_hazard_head(ParamStore& store, const std::string& prefix, std::size_t in,
                            std::size_t hidden, std::size_t intervals, Rng& rng);

struct HeadCache {
  std::vector<double> pre;
  std::vector<double> hidden;
  std::vector<double> hazards;
};

std::vector<double> hazard_forward(const ParamStore& store, const HazardHead& head,
                                   std::span<const double> z, HeadCache* cache = nullptr);

/// Takes dL/dh, backpropagates through the clamped sigmoid and both layers.
void hazard_backward(ParamStore& store, const HazardHead& head, std::span<const double> z,
                     const HeadCache& cache, std::span<const double> d_hazards,
                     std::span<double> dz);

/// Throws std::invalid_argument unless every h_j lies in (0, 1).
std::vector<double> survival_from_hazards(std::span<const double> h);

/// Loss value and its gradient with respect to the hazards.
struct HazardLoss {
  double loss = 0.0;
  std::vector<double> d_hazards;
};

/// -[log S_{j-1} + log h_j], S_{-1} = 1.
HazardLoss nll_uncensored_grad(std::span<const double> h, std::span<const double> s, int j);
double nll_uncensored(std::span<const double> h, std::span<const double> s, int j);

/// -log S_c
HazardLoss nll_censored_grad(std::span<const double> h, std::span<const double> s, int c);
double nll_censored(std::span<const double> h, std::span<const double> s, int c);

/// Softmax of the hazards strictly after interval c, zero elsewhere. Treated as
/// a constant by the caller. Throws std::invalid_argument when c >= K-1.
std::vector<double> pseudo_soft_label(std::span<const double> h, int c);

/// sum_j q_j * nll_uncensored(h, S, j). Throws std::invalid_argument("q not
/// normalized") unless q sums to 1.
HazardLoss nll_pseudo_grad(std::span<const double> h, std::span<const double> s,
                           std::span<const double> q);
double nll_pseudo(std::span<const double> h, std::span<const double> s,
                  std::span<const double> q);

struct WarmupSchedule {
  double t_total = 1.0;
};

/// 0.1 * exp(-5 (1 - t/t_total)^2), with t clamped to t_total.
double warmup_weight(double t, const WarmupSchedule& sched);

/// Negative expected discrete survival, -sum_j S_j.
double risk_score(std::span<const double> s);

struct SurvivalSample {
  std::span<const double> hazards;
  std::span<const double> survival;
  bool event = false;
  int interval = 0;
  /// Pseudo soft label to use instead of recomputing it from `hazards`.
  /// Finite-difference checks pass the label from the unperturbed point here.
  std::span<const double> soft_label = {};
};

struct SurvivalLossOptions {
  double lambda_cen = 1.0;
  bool use_pseudo_labels = true;
};

struct SurvivalLossResult {
  double total = 0.0;
  double uncensored = 0.0;
  double censored = 0.0;
  double pseudo = 0.0;
  double lambda_pro = 0.0;
  std::size_t n_uncensored = 0;
  std::size_t n_censored = 0;
  std::size_t n_pseudo = 0;
  /// dL_surv/dh per sample.
  std::vector<std::vector<double>> d_hazards;
};

/// L_uncen + lambda_cen (L_cen + lambda_pro(t) L_cen_p). Each term is a mean
/// over its own subset; an empty subset contributes 0.
SurvivalLossResult survival_loss(std::span<const SurvivalSample> batch, double t,
                                 const WarmupSchedule& sched, const SurvivalLossOptions& opts);

struct PredictionRow {
  std::string patient_id;
  double risk = 0.0;
  std::vector<double> hazards;
  std::vector<double> survival;
};

void write_predictions_csv(std::span<const PredictionRow> rows, std::ostream& out);
std::vector<PredictionRow> read_predictions_csv(std::istream& in);

}  // namespace mmsurv
