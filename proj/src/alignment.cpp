#include "mmsurv/alignment.hpp"

#include <cmath>
#include <stdexcept>

namespace mmsurv {

Adapter make_adapter(ParamStore& store, const std::string& prefix, std::size_t in,
                     std::size_t hidden, std::size_t out, Rng& rng) {
  return {make_linear(store, prefix + ".fc1", in, hidden, rng),
          make_linear(store, prefix + ".fc2", hidden, out, rng)};
}

Matrix adapter_forward(const ParamStore& store, const Adapter& a, std::span<const double> x,
                       AdapterCache* cache) {
  std::vector<double> pre = linear_forward(store, a.fc1, x);
  std::vector<double> hidden = pre;
  relu_inplace(hidden);
  Matrix y(1, a.fc2.out);
  linear_forward(store, a.fc2, hidden, y.data());
  if (cache) {
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
  }
  return y;
}

void adapter_backward(ParamStore& store, const Adapter& a, std::span<const double> x,
                      const AdapterCache& cache, std::span<const double> dy, std::span<double> dx) {
  std::vector<double> dh(a.fc1.out, 0.0);
  linear_backward(store, a.fc2, cache.hidden, dy, dh);
  relu_backward_inplace(cache.pre, dh);
  linear_backward(store, a.fc1, x, dh, dx);
}

MemoryQueue::MemoryQueue(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("queue capacity must be positive");
}

void MemoryQueue::push(QueuePair pair) {
  entries_.push_back(std::move(pair));
  while (entries_.size() > capacity_) entries_.pop_front();
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a);
  const double nb = norm(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw std::invalid_argument("degenerate embedding");
  return dot(a, b) / (na * nb);
}

namespace {

// d cos(a,b) / da = b/(|a||b|) - cos * a/|a|^2, scaled by `scale` and added to `out`.
void add_cosine_grad(std::span<const double> a, std::span<const double> b, double na, double nb,
                     double cos, double scale, std::span<double> out) {
  const double inv = 1.0 / (na * nb);
  const double self = cos / (na * na);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += scale * (b[i] * inv - self * a[i]);
}

}  // namespace

InfoNceResult info_nce_with_grad(std::span<const double> anchor, std::span<const double> positive,
                                 std::span<const std::span<const double>> negatives, double tau) {
  if (negatives.empty()) throw std::invalid_argument("info_nce: no negatives");
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be positive");
  if (positive.size() != anchor.size()) throw std::invalid_argument("info_nce: dim mismatch");

  const double na = norm(anchor);
  const double np = norm(positive);
  if (!(na > 0.0) || !(np > 0.0)) throw std::invalid_argument("degenerate embedding");

  const std::size_t k = negatives.size();
  std::vector<double> cos(k + 1), norms(k + 1), logits(k + 1);
  cos[0] = dot(anchor, positive) / (na * np);
  norms[0] = np;
  for (std::size_t i = 0; i < k; ++i) {
    const auto n = negatives[i];
    if (n.size() != anchor.size()) throw std::invalid_argument("info_nce: dim mismatch");
    norms[i + 1] = norm(n);
    if (!(norms[i + 1] > 0.0)) throw std::invalid_argument("degenerate embedding");
    cos[i + 1] = dot(anchor, n) / (na * norms[i + 1]);
  }
  for (std::size_t i = 0; i <= k; ++i) logits[i] = cos[i] / tau;

  // loss = logsumexp(logits) - logits[0]
  const std::vector<double> p = softmax(logits);
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);

  InfoNceResult r;
  r.loss = mx + std::log(sum) - logits[0];
  r.d_anchor.assign(anchor.size(), 0.0);
  r.d_positive.assign(anchor.size(), 0.0);

  const double g0 = (p[0] - 1.0) / tau;
  add_cosine_grad(anchor, positive, na, np, cos[0], g0, r.d_anchor);
  add_cosine_grad(positive, anchor, np, na, cos[0], g0, r.d_positive);
  for (std::size_t i = 0; i < k; ++i) {
    add_cosine_grad(anchor, negatives[i], na, norms[i + 1], cos[i + 1], p[i + 1] / tau,
                    r.d_anchor);
  }
  return r;
}

double info_nce(std::span<const double> anchor, std::span<const double> positive,
                std::span<const std::span<const double>> negatives, double tau) {
  return info_nce_with_grad(anchor, positive, negatives, tau).loss;
}

SideLoss contrastive_side_loss(const MemoryQueue& q, std::span<const double> hub,
                               std::span<const double> other, double tau) {
  // After the push the oldest entry is evicted when the queue was full; the
  // pushed pair itself is excluded, leaving the remaining prior entries.
  const auto& entries = q.entries();
  const std::size_t skip = q.full() ? 1 : 0;
  std::vector<std::span<const double>> other_negs, hub_negs;
  for (std::size_t i = skip; i < entries.size(); ++i) {
    other_negs.emplace_back(entries[i].other);
    hub_negs.emplace_back(entries[i].hub);
  }
  const auto hub_anchored = info_nce_with_grad(hub, other, other_negs, tau);
  const auto other_anchored = info_nce_with_grad(other, hub, hub_negs, tau);

  SideLoss s;
  s.loss = 0.5 * (hub_anchored.loss + other_anchored.loss);
  s.d_hub.resize(hub.size());
  s.d_other.resize(other.size());
  for (std::size_t i = 0; i < hub.size(); ++i) {
    s.d_hub[i] = 0.5 * (hub_anchored.d_anchor[i] + other_anchored.d_positive[i]);
    s.d_other[i] = 0.5 * (hub_anchored.d_positive[i] + other_anchored.d_anchor[i]);
  }
  return s;
}

PairCounts count_complete_pairs(std::span<const PatientRecord> patients) {
  PairCounts c;
  for (const auto& p : patients) {
    if (p.has(ModalityKind::WSI) && p.has(ModalityKind::Radiology)) ++c.image_pairs;
    if (p.has(ModalityKind::PathReport) && p.has(ModalityKind::ClinicalNotes)) ++c.text_pairs;
  }
  return c;
}

double compute_lambda_con(std::span<const PatientRecord> patients) {
  if (patients.empty()) throw std::invalid_argument("compute_lambda_con: empty cohort");
  const PairCounts c = count_complete_pairs(patients);
  if (c.image_pairs == 0) return 1.0;
  return static_cast<double>(c.text_pairs) / static_cast<double>(c.image_pairs);
}

double compute_lambda_con(const Cohort& cohort) { return compute_lambda_con(cohort.patients); }

}  // namespace mmsurv
