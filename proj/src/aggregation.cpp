#include "mmsurv/aggregation.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "mmsurv/format.hpp"

namespace mmsurv {

AttentionNet make_attention_net(ParamStore& store, const std::string& prefix,
                                std::size_t input_dim, std::size_t hidden, Rng& rng) {
  AttentionNet net;
  net.input_dim = input_dim;
  net.hidden = hidden;
  net.v = store.add(prefix + ".V", init_uniform(hidden, input_dim, input_dim, rng));
  net.w = store.add(prefix + ".w", init_uniform(hidden, 1, hidden, rng));
  return net;
}

std::vector<double> attention_scores(const ParamStore& store, const AttentionNet& net,
                                     const Matrix& instances, AttentionCache* cache) {
  if (instances.rows() == 0) throw std::invalid_argument("attention over an empty set");
  if (instances.cols() != net.input_dim) {
    throw std::invalid_argument("attention: dim mismatch (got " +
                                std::to_string(instances.cols()) + ", expected " +
                                std::to_string(net.input_dim) + ")");
  }
  const Matrix& v = store.value(net.v);
  const auto w = store.value(net.w).data();
  const std::size_t n = instances.rows();

  Matrix act(n, net.hidden);
  std::vector<double> logits(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto a = act.row(j);
    matvec(v, instances.row(j), a);
    for (double& x : a) x = std::tanh(x);
    logits[j] = dot(w, a);
  }
  auto scores = softmax(logits);
  if (cache) {
    cache->activations = std::move(act);
    cache->scores = scores;
  }
  return scores;
}

Matrix attention_pool(const ParamStore& store, const AttentionNet& net, const Matrix& instances,
                      AttentionCache* cache) {
  const auto scores = attention_scores(store, net, instances, cache);
  Matrix z(1, instances.cols());
  for (std::size_t j = 0; j < instances.rows(); ++j) axpy(scores[j], instances.row(j), z.data());
  return z;
}

void attention_pool_backward(ParamStore& store, const AttentionNet& net, const Matrix& instances,
                             const AttentionCache& cache, std::span<const double> dz,
                             Matrix* d_instances) {
  const std::size_t n = instances.rows();
  const auto& a = cache.scores;
  const auto w = store.value(net.w).data();

  // z = sum_j a_j f_j  =>  da_j = dz . f_j
  std::vector<double> da(n);
  double mean = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    da[j] = dot(dz, instances.row(j));
    mean += a[j] * da[j];
  }
  Matrix& gv = store.grad(net.v);
  auto gw = store.grad(net.w).data();
  const Matrix& v = store.value(net.v);
  std::vector<double> du(net.hidden);
  for (std::size_t j = 0; j < n; ++j) {
    const double ds = a[j] * (da[j] - mean);
    const auto t = cache.activations.row(j);
    axpy(ds, t, gw);
    for (std::size_t k = 0; k < net.hidden; ++k) du[k] = ds * w[k] * (1.0 - t[k] * t[k]);
    outer_acc(gv, du, instances.row(j));
    if (d_instances) {
      auto drow = d_instances->row(j);
      axpy(a[j], dz, drow);
      matvec_t_acc(v, du, drow);
    }
  }
}

ModalityEmbedding intra_aggregate(const ParamStore& store, const AttentionNet& net,
                                  const FeatureSet& fs, AttentionCache* cache) {
  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  ModalityEmbedding e;
  e.modality = fs.modality;
  e.vector = attention_pool(store, net, fs.features, &c);
  e.attention = c.scores;
  return e;
}

Matrix project_modality(const ParamStore& store, const Linear& proj, std::span<const double> x) {
  Matrix out(1, proj.out);
  linear_forward(store, proj, x, out.data());
  return out;
}

ModalitySet stack_modalities(std::span<const std::pair<ModalityKind, Matrix>> present) {
  if (present.empty()) throw std::invalid_argument("no modalities");
  const std::size_t d = present.front().second.size();
  ModalitySet set{{}, Matrix(present.size(), d)};
  for (std::size_t i = 0; i < present.size(); ++i) {
    const auto& [kind, vec] = present[i];
    if (vec.size() != d) throw std::invalid_argument("inter_aggregate: dim mismatch");
    set.kinds.push_back(kind);
    std::copy(vec.data().begin(), vec.data().end(), set.rows.row(i).begin());
  }
  return set;
}

PatientEmbedding inter_aggregate(const ParamStore& store, const AttentionNet& net,
                                 std::span<const std::pair<ModalityKind, Matrix>> present,
                                 AttentionCache* cache) {
  const ModalitySet set = stack_modalities(present);
  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  PatientEmbedding out;
  out.vector = attention_pool(store, net, set.rows, &c);
  for (std::size_t i = 0; i < set.kinds.size(); ++i) {
    out.modality_attention[set.kinds[i]] += c.scores[i];
  }
  return out;
}

void write_intra_attention_csv(std::span<const InstanceAttention> rows, std::ostream& out) {
  out << "patient_id,modality,instance_index,score\n";
  for (const auto& r : rows) {
    out << r.patient_id << ',' << to_string(r.modality) << ',' << r.instance_index << ','
        << format_double(r.score) << '\n';
  }
}

void write_inter_attention_csv(std::span<const ModalityAttention> rows, std::ostream& out) {
  out << "patient_id,modality,score\n";
  for (const auto& r : rows) {
    out << r.patient_id << ',' << to_string(r.modality) << ',' << format_double(r.score) << '\n';
  }
}

}  // namespace mmsurv
