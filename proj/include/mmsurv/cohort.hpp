#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmsurv/numerics.hpp"

namespace mmsurv {

enum class ModalityKind { WSI = 0, PathReport = 1, Radiology = 2, ClinicalNotes = 3 };

inline constexpr std::size_t kNumModalities = 4;
inline constexpr std::array<ModalityKind, kNumModalities> kAllModalities = {
    ModalityKind::WSI, ModalityKind::PathReport, ModalityKind::Radiology,
    ModalityKind::ClinicalNotes};

/// Embedding width produced by the upstream encoder of each modality.
std::size_t modality_dim(ModalityKind kind);
/// WSI and PathReport are present for every patient.
bool is_mandatory(ModalityKind kind);
std::string_view to_string(ModalityKind kind);
ModalityKind parse_modality(std::string_view name);
inline std::size_t index_of(ModalityKind kind) { return static_cast<std::size_t>(kind); }

/// Variable-length instance embeddings (N x D) of one modality for one patient.
struct FeatureSet {
  ModalityKind modality = ModalityKind::WSI;
  Matrix features;

  bool operator==(const FeatureSet&) const = default;
};

struct PatientRecord {
  std::string id;
  std::map<ModalityKind, FeatureSet> feature_sets;
  /// Months; event time when `event`, otherwise censoring time.
  double time = 0.0;
  bool event = false;
  /// Discrete interval label; -1 until binned.
  int interval = -1;

  bool has(ModalityKind kind) const { return feature_sets.contains(kind); }
  const Matrix& features(ModalityKind kind) const { return feature_sets.at(kind).features; }

  bool operator==(const PatientRecord&) const = default;
};

struct Cohort {
  std::vector<PatientRecord> patients;
  /// K-1 strictly increasing cut points; empty when unbinned.
  std::vector<double> interval_edges;

  std::size_t num_intervals() const { return interval_edges.size() + 1; }
  bool binned() const { return !interval_edges.empty(); }

  bool operator==(const Cohort&) const = default;
};

/// Throws std::invalid_argument naming the patient on any broken invariant.
void validate_patient(const PatientRecord& p);
void validate_cohort(const Cohort& c);

/// Cut points at the lower nearest-rank (j/k)-quantiles of event times.
/// Throws std::invalid_argument("insufficient events") when fewer than k events
/// exist or two cut points coincide.
std::vector<double> fit_interval_edges(std::span<const PatientRecord> patients, std::size_t k);

/// Number of edges strictly below t; a time equal to an edge falls in the lower interval.
int assign_interval(double t, std::span<const double> edges);

/// Labels every patient against `edges` and stores them on the cohort.
void apply_interval_edges(Cohort& cohort, std::vector<double> edges);

Cohort bin_intervals(Cohort cohort, std::size_t k);

struct InstanceRange {
  std::size_t min = 1;
  std::size_t max = 1;
};

struct GenConfig {
  std::size_t n_patients = 367;
  /// Indexed by ModalityKind; mandatory modalities must stay at 0.
  std::array<double, kNumModalities> missing_prob = {0.0, 0.0, 1.0 - 180.0 / 367.0,
                                                     1.0 - 303.0 / 367.0};
  double censor_rate = 0.5;
  std::array<InstanceRange, kNumModalities> instances = {
      InstanceRange{4, 12}, InstanceRange{2, 6}, InstanceRange{2, 6}, InstanceRange{2, 6}};
  /// Weibull scale in months for a patient at zero latent risk.
  double baseline_scale = 24.0;
  double weibull_shape = 3.0;
  /// Log-time shift per unit of latent risk.
  double signal = 1.0;
  /// Norm of each modality's loading vector on the latent risk.
  double feature_signal = 3.0;
  std::uint64_t seed = 0;
};

void validate_gen_config(const GenConfig& cfg);

struct SyntheticCohort {
  Cohort cohort;
  /// Latent risk u_i per patient, aligned with cohort.patients.
  std::vector<double> latent_risk;
};

SyntheticCohort generate_synthetic_with_latent(const GenConfig& cfg);
Cohort generate_synthetic(const GenConfig& cfg);

/// Exponential censoring rate giving P(C < T) = target under the generator's
/// event-time model; exposed for tests.
double calibrate_censor_rate(const GenConfig& cfg);

// JSON Lines: a header record followed by one record per patient.
void write_cohort(const Cohort& cohort, std::ostream& out);
Cohort read_cohort(std::istream& in);
void save_cohort(const Cohort& cohort, const std::filesystem::path& path);
Cohort load_cohort(const std::filesystem::path& path);

}  // namespace mmsurv
