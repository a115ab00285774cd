#pragma once

// Patient-wise contrastive alignment against the pathology hub: adapters that
// bring radiology and clinical-note embeddings into the 512-d hub space, FIFO
// memory queues of detached pairs, and symmetric InfoNCE over cosine scores.

#include <deque>
#include <span>
#include <string>
#include <vector>

#include "mmsurv/cohort.hpp"
#include "mmsurv/layers.hpp"
#include "mmsurv/numerics.hpp"

namespace mmsurv {

inline constexpr std::size_t kHubDim = 512;

/// affine -> ReLU -> affine
struct Adapter {
  Linear fc1;
  Linear fc2;
};

Adapter make_adapter(ParamStore& store, const std::string& prefix, std::size_t in,
                     std::size_t hidden, std::size_t out, Rng& rng);

struct AdapterCache {
  std::vector<double> pre;     // fc1 output before ReLU
  std::vector<double> hidden;  // after ReLU
};

Matrix adapter_forward(const ParamStore& store, const Adapter& a, std::span<const double> x,
                       AdapterCache* cache = nullptr);

/// Accumulates parameter gradients; adds dL/dx into dx unless it is empty.
void adapter_backward(ParamStore& store, const Adapter& a, std::span<const double> x,
                      const AdapterCache& cache, std::span<const double> dy, std::span<double> dx);

struct QueuePair {
  std::string patient_id;
  std::vector<double> hub;
  std::vector<double> other;

  bool operator==(const QueuePair&) const = default;
};

/// Fixed-capacity FIFO of detached (hub, other) embedding pairs. No
/// deduplication by patient id.
class MemoryQueue {
 public:
  MemoryQueue() = default;
  explicit MemoryQueue(std::size_t capacity);

  /// Appends and, once over capacity, drops the oldest entry.
  void push(QueuePair pair);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool full() const { return entries_.size() == capacity_; }
  const std::deque<QueuePair>& entries() const { return entries_; }

  bool operator==(const MemoryQueue&) const = default;

 private:
  std::size_t capacity_ = 0;
  std::deque<QueuePair> entries_;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct InfoNceResult {
  double loss = 0.0;
  std::vector<double> d_anchor;
  std::vector<double> d_positive;
};

/// -log( e^{s(a,p)/tau} / (e^{s(a,p)/tau} + sum_k e^{s(a,n_k)/tau}) ), s = cosine.
/// Negatives are constants. Throws std::invalid_argument("degenerate embedding")
/// on a zero-norm vector.
InfoNceResult info_nce_with_grad(std::span<const double> anchor, std::span<const double> positive,
                                 std::span<const std::span<const double>> negatives, double tau);
double info_nce(std::span<const double> anchor, std::span<const double> positive,
                std::span<const std::span<const double>> negatives, double tau);

struct SideLoss {
  double loss = 0.0;
  std::vector<double> d_hub;
  std::vector<double> d_other;
};

/// Symmetric InfoNCE of the current pair against the queue as it stands after
/// the pair has been pushed, with the fresh entry itself excluded from the
/// negatives. `q` is not modified; the caller pushes the detached pair.
SideLoss contrastive_side_loss(const MemoryQueue& q, std::span<const double> hub,
                               std::span<const double> other, double tau);

struct PairCounts {
  std::size_t image_pairs = 0;  // (WSI, Radiology) complete
  std::size_t text_pairs = 0;   // (PathReport, ClinicalNotes) complete
};

PairCounts count_complete_pairs(std::span<const PatientRecord> patients);

/// n_text_pairs / n_image_pairs, or 1 when no patient has an image pair.
double compute_lambda_con(std::span<const PatientRecord> patients);
double compute_lambda_con(const Cohort& cohort);

inline double contrastive_loss(double image_side, double text_side, double lambda_con) {
  return image_side + lambda_con * text_side;
}

}  // namespace mmsurv
