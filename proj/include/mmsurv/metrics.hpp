#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mmsurv {

struct SurvivalOutcome {
  double time = 0.0;
  bool event = false;
  double risk = 0.0;
  /// Predicted S_j per interval; only needed for the Brier score.
  std::vector<double> survival;
  /// Interval of `time`; only needed for the Brier score.
  int interval = -1;
};

/// Harrell's C: pair (a,b) is comparable when t_a < t_b and a had the event;
/// concordant when risk_a > risk_b, half credit on risk ties.
/// Throws std::invalid_argument("no comparable pairs").
double concordance_index(std::span<const SurvivalOutcome> outcomes);

/// Mean of (y - S_j)^2 over patients whose status past interval j is known;
/// patients censored at or before j are excluded.
/// Throws std::invalid_argument when no patient is determinable.
double brier_score_at(std::span<const SurvivalOutcome> outcomes, int j);

/// Brier score averaged over every interval with at least one determinable patient.
double brier_score(std::span<const SurvivalOutcome> outcomes);

struct KMPoint {
  double time = 0.0;
  double survival = 1.0;
  std::size_t at_risk = 0;
  std::size_t events = 0;
};

/// One point per distinct observed time (events and censorings).
struct KMCurve {
  std::vector<KMPoint> points;

  /// Step-function value at t (1 before the first point).
  double at(double t) const;
};

KMCurve kaplan_meier(std::span<const SurvivalOutcome> outcomes);

struct LogrankResult {
  double chi2 = 0.0;
  double p = 1.0;
};

/// Upper tail of chi-square with one degree of freedom: erfc(sqrt(x/2)).
double chi2_sf_1df(double chi2);

/// One-degree-of-freedom logrank test over the pooled distinct event times.
LogrankResult logrank_test(std::span<const SurvivalOutcome> group_a,
                           std::span<const SurvivalOutcome> group_b);

struct MedianSplit {
  double threshold = 0.0;
  std::vector<std::size_t> high;  // risk > median
  std::vector<std::size_t> low;   // risk <= median
};

MedianSplit median_split(std::span<const SurvivalOutcome> outcomes);

std::vector<SurvivalOutcome> gather(std::span<const SurvivalOutcome> outcomes,
                                    std::span<const std::size_t> idx);

struct MetricsBundle {
  std::optional<double> ci;
  std::optional<double> brier;
  std::optional<double> logrank_chi2;
  std::optional<double> logrank_p;
  std::size_t n = 0;
  std::size_t n_events = 0;
};

/// Metrics that are undefined on the given outcomes are left empty.
MetricsBundle compute_metrics(std::span<const SurvivalOutcome> outcomes);

std::string metrics_to_json(const MetricsBundle& m, int indent = 2);

void write_km_csv(const KMCurve& high, const KMCurve& low, std::ostream& out);

}  // namespace mmsurv
