#pragma once

// The full network for one patient:
//
//   per modality   instances --attention pool--> Z  (--adapter--> hub space)
//   per modality   hub-space vector --projection--> embed
//   patient        projected set --attention pool--> Z^M --hazard head--> h
//
// Radiology and ClinicalNotes pass through adapters into the 512-d hub space
// shared with WSI and PathReport; those hub-space vectors are what the
// contrastive losses compare.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "mmsurv/aggregation.hpp"
#include "mmsurv/alignment.hpp"
#include "mmsurv/cohort.hpp"
#include "mmsurv/numerics.hpp"
#include "mmsurv/survival.hpp"

namespace mmsurv {

struct ModelDims {
  std::size_t attention_hidden = 128;
  std::size_t embed = 256;
  std::size_t adapter_hidden = 256;
  std::size_t head_hidden = 128;
  std::size_t intervals = 4;

  bool operator==(const ModelDims&) const = default;
};

bool has_adapter(ModalityKind kind);

class Model {
 public:
  Model(const ModelDims& dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  const AttentionNet& intra(ModalityKind k) const { return intra_[index_of(k)]; }
  /// Only Radiology and ClinicalNotes carry adapters.
  const Adapter& adapter(ModalityKind k) const;
  const Linear& projection(ModalityKind k) const { return proj_[index_of(k)]; }
  const AttentionNet& inter() const { return inter_; }
  const HazardHead& head() const { return head_; }

 private:
  ModelDims dims_;
  ParamStore params_;
  std::array<AttentionNet, kNumModalities> intra_;
  std::array<std::optional<Adapter>, kNumModalities> adapters_;
  std::array<Linear, kNumModalities> proj_;
  AttentionNet inter_;
  HazardHead head_;
};

struct ModalityTrace {
  bool present = false;
  AttentionCache attention;
  Matrix pooled;     // attention-pooled instances, 1 x modality_dim
  AdapterCache adapter;
  Matrix hub;        // W_i, P_i (pooled) or R_i, B_i (adapter output), 1 x 512
  Matrix projected;  // 1 x embed
};

struct ForwardTrace {
  std::array<ModalityTrace, kNumModalities> modality;
  ModalitySet stacked;
  AttentionCache inter_attention;
  Matrix patient;  // Z^M, 1 x embed
  HeadCache head;
  std::vector<double> hazards;
  std::vector<double> survival;
  double risk = 0.0;
  std::map<ModalityKind, double> modality_attention;
};

/// Pure inference; absent optional modalities are left out of the patient-level set.
ForwardTrace forward(const Model& model, const PatientRecord& patient);

struct LossSettings {
  double lambda = 1.0;
  double lambda_con = 1.0;
  double lambda_cen = 1.0;
  double tau = 0.07;
  bool use_contrastive = true;
  bool use_survival = true;
  bool use_pseudo_labels = true;
  WarmupSchedule warmup;
  double t = 0.0;
  /// Frozen pseudo soft label for this patient; empty means compute it.
  std::span<const double> soft_label = {};
};

struct LossBreakdown {
  double total = 0.0;
  double con = 0.0;
  double wr = 0.0;
  double pb = 0.0;
  double surv = 0.0;
  double uncen = 0.0;
  double cen = 0.0;
  double cen_p = 0.0;
  double lambda_pro = 0.0;
  bool has_wr = false;
  bool has_pb = false;
  bool pseudo_active = false;
  /// The pseudo soft label used, when active.
  std::vector<double> soft_label;
};

/// Both modalities present with nonzero hub vectors. A zero vector (every
/// adapter unit inactive) has no direction, so the pair is treated as missing.
bool contrast_pair_usable(const ModalityTrace& hub, const ModalityTrace& other);

/// Queues hold detached pairs; a null queue, an empty queue, or a patient
/// without the pair disables that side.
struct ContrastQueues {
  const MemoryQueue* image = nullptr;
  const MemoryQueue* text = nullptr;
};

/// L = lambda * L_con + L_surv for one patient; forward only.
LossBreakdown patient_loss(const Model& model, const PatientRecord& patient, ContrastQueues queues,
                           const LossSettings& settings, ForwardTrace* trace = nullptr);

/// Same value; accumulates dL/dtheta into model.params() gradient slots.
LossBreakdown patient_loss_and_grad(Model& model, const PatientRecord& patient,
                                    ContrastQueues queues, const LossSettings& settings,
                                    ForwardTrace* trace = nullptr);

}  // namespace mmsurv
