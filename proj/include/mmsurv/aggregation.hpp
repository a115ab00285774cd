#pragma once

// Attention-based multi-instance pooling. The same network form pools the
// instances of one modality and, one level up, the projected modality vectors
// of a patient:
//
//   a_j = softmax_j( w^T tanh(V f_j) ),   z = sum_j a_j f_j
//
// V is (hidden x D) and w is (hidden x 1); neither carries a bias.

#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmsurv/cohort.hpp"
#include "mmsurv/layers.hpp"
#include "mmsurv/numerics.hpp"

namespace mmsurv {

struct AttentionNet {
  ParamId v = 0;
  ParamId w = 0;
  std::size_t input_dim = 0;
  std::size_t hidden = 0;
};

AttentionNet make_attention_net(ParamStore& store, const std::string& prefix,
                                std::size_t input_dim, std::size_t hidden, Rng& rng);

/// Forward intermediates needed by attention_pool_backward.
struct AttentionCache {
  Matrix activations;  // N x hidden, tanh(V f_j)
  std::vector<double> scores;
};

std::vector<double> attention_scores(const ParamStore& store, const AttentionNet& net,
                                     const Matrix& instances, AttentionCache* cache = nullptr);

/// Returns the 1 x D weighted sum; fills `cache` when given.
Matrix attention_pool(const ParamStore& store, const AttentionNet& net, const Matrix& instances,
                      AttentionCache* cache = nullptr);

/// Backpropagates dL/dz into V, w and, when `d_instances` is non-null, into the
/// instance rows (accumulated).
void attention_pool_backward(ParamStore& store, const AttentionNet& net, const Matrix& instances,
                             const AttentionCache& cache, std::span<const double> dz,
                             Matrix* d_instances);

struct ModalityEmbedding {
  ModalityKind modality = ModalityKind::WSI;
  Matrix vector;                   // 1 x D
  std::vector<double> attention;   // one score per instance
};

ModalityEmbedding intra_aggregate(const ParamStore& store, const AttentionNet& net,
                                  const FeatureSet& fs, AttentionCache* cache = nullptr);

/// Affine map of a modality vector into the shared patient space.
Matrix project_modality(const ParamStore& store, const Linear& proj, std::span<const double> x);

struct PatientEmbedding {
  Matrix vector;  // 1 x embed_dim
  std::map<ModalityKind, double> modality_attention;
};

/// Stacked projected vectors, one row per present modality, in the given order.
struct ModalitySet {
  std::vector<ModalityKind> kinds;
  Matrix rows;
};

ModalitySet stack_modalities(std::span<const std::pair<ModalityKind, Matrix>> present);

/// Throws std::invalid_argument("no modalities") when `present` is empty.
PatientEmbedding inter_aggregate(const ParamStore& store, const AttentionNet& net,
                                 std::span<const std::pair<ModalityKind, Matrix>> present,
                                 AttentionCache* cache = nullptr);

struct InstanceAttention {
  std::string patient_id;
  ModalityKind modality;
  std::size_t instance_index;
  double score;
};

struct ModalityAttention {
  std::string patient_id;
  ModalityKind modality;
  double score;
};

void write_intra_attention_csv(std::span<const InstanceAttention> rows, std::ostream& out);
void write_inter_attention_csv(std::span<const ModalityAttention> rows, std::ostream& out);

}  // namespace mmsurv
