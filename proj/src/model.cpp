#include "mmsurv/model.hpp"

#include <stdexcept>

namespace mmsurv {

namespace {

// Substream for parameter initialisation under the model seed.
constexpr std::uint64_t kInitStream = 0x1A17;

std::string prefix(const char* part, ModalityKind k) {
  return std::string(part) + "." + std::string(to_string(k));
}

}  // namespace

bool has_adapter(ModalityKind kind) {
  return kind == ModalityKind::Radiology || kind == ModalityKind::ClinicalNotes;
}

Model::Model(const ModelDims& dims, std::uint64_t seed) : dims_(dims) {
  if (dims.attention_hidden == 0 || dims.embed == 0 || dims.adapter_hidden == 0 ||
      dims.head_hidden == 0) {
    throw std::invalid_argument("model dims must be positive");
  }
  if (dims.intervals < 2) throw std::invalid_argument("model needs at least 2 intervals");

  Rng rng = Rng(seed).substream(kInitStream);
  for (ModalityKind k : kAllModalities) {
    intra_[index_of(k)] =
        make_attention_net(params_, prefix("intra", k), modality_dim(k), dims.attention_hidden, rng);
  }
  for (ModalityKind k : kAllModalities) {
    if (has_adapter(k)) {
      adapters_[index_of(k)] = make_adapter(params_, prefix("adapter", k), modality_dim(k),
                                            dims.adapter_hidden, kHubDim, rng);
    }
  }
  for (ModalityKind k : kAllModalities) {
    proj_[index_of(k)] = make_linear(params_, prefix("proj", k), kHubDim, dims.embed, rng);
  }
  inter_ = make_attention_net(params_, "inter", dims.embed, dims.attention_hidden, rng);
  head_ = make_hazard_head(params_, "head", dims.embed, dims.head_hidden, dims.intervals, rng);
}

const Adapter& Model::adapter(ModalityKind k) const {
  const auto& a = adapters_[index_of(k)];
  if (!a) throw std::invalid_argument(std::string(to_string(k)) + " has no adapter");
  return *a;
}

ForwardTrace forward(const Model& model, const PatientRecord& patient) {
  const ParamStore& store = model.params();
  ForwardTrace tr;
  std::vector<std::pair<ModalityKind, Matrix>> projected;
  for (ModalityKind k : kAllModalities) {
    if (!patient.has(k)) {
      if (is_mandatory(k)) {
        throw std::invalid_argument("patient " + patient.id + " lacks " +
                                    std::string(to_string(k)));
      }
      continue;
    }
    ModalityTrace& m = tr.modality[index_of(k)];
    m.present = true;
    m.pooled = attention_pool(store, model.intra(k), patient.features(k), &m.attention);
    m.hub = has_adapter(k) ? adapter_forward(store, model.adapter(k), m.pooled.data(), &m.adapter)
                           : m.pooled;
    m.projected = project_modality(store, model.projection(k), m.hub.data());
    projected.emplace_back(k, m.projected);
  }
  tr.stacked = stack_modalities(projected);
  tr.patient = attention_pool(store, model.inter(), tr.stacked.rows, &tr.inter_attention);
  for (std::size_t i = 0; i < tr.stacked.kinds.size(); ++i) {
    tr.modality_attention[tr.stacked.kinds[i]] = tr.inter_attention.scores[i];
  }
  tr.hazards = hazard_forward(store, model.head(), tr.patient.data(), &tr.head);
  tr.survival = survival_from_hazards(tr.hazards);
  tr.risk = risk_score(tr.survival);
  return tr;
}

namespace {

}  // namespace

bool contrast_pair_usable(const ModalityTrace& hub, const ModalityTrace& other) {
  return hub.present && other.present && norm(hub.hub.data()) > 0.0 &&
         norm(other.hub.data()) > 0.0;
}

namespace {

bool side_usable(const MemoryQueue* q) {
  if (!q) return false;
  const std::size_t negatives = q->full() ? q->size() - 1 : q->size();
  return negatives >= 1;
}

LossBreakdown loss_impl(const Model& model, Model* grad_model, const PatientRecord& patient,
                        ContrastQueues queues, const LossSettings& s, ForwardTrace* trace_out) {
  ForwardTrace local;
  ForwardTrace& tr = trace_out ? *trace_out : local;
  tr = forward(model, patient);
  const bool backward = grad_model != nullptr;

  LossBreakdown out;
  std::array<std::vector<double>, kNumModalities> d_hub;
  if (backward) {
    for (ModalityKind k : kAllModalities) {
      if (tr.modality[index_of(k)].present) d_hub[index_of(k)].assign(kHubDim, 0.0);
    }
  }

  if (s.use_contrastive) {
    auto side = [&](const MemoryQueue* q, ModalityKind hub_kind, ModalityKind other_kind,
                    double weight, double& loss_slot, bool& flag) {
      const auto& hub = tr.modality[index_of(hub_kind)];
      const auto& other = tr.modality[index_of(other_kind)];
      if (!contrast_pair_usable(hub, other) || !side_usable(q)) return;
      const SideLoss sl = contrastive_side_loss(*q, hub.hub.data(), other.hub.data(), s.tau);
      loss_slot = sl.loss;
      flag = true;
      if (backward && weight != 0.0) {
        axpy(weight, sl.d_hub, d_hub[index_of(hub_kind)]);
        axpy(weight, sl.d_other, d_hub[index_of(other_kind)]);
      }
    };
    side(queues.image, ModalityKind::WSI, ModalityKind::Radiology, s.lambda, out.wr, out.has_wr);
    side(queues.text, ModalityKind::PathReport, ModalityKind::ClinicalNotes,
         s.lambda * s.lambda_con, out.pb, out.has_pb);
    out.con = contrastive_loss(out.wr, out.pb, s.lambda_con);
  }

  SurvivalLossResult surv;
  if (s.use_survival) {
    const SurvivalSample sample{tr.hazards, tr.survival, patient.event, patient.interval,
                                s.soft_label};
    surv = survival_loss(std::span(&sample, 1), s.t, s.warmup,
                         {s.lambda_cen, s.use_pseudo_labels});
    out.surv = surv.total;
    out.uncen = surv.uncensored;
    out.cen = surv.censored;
    out.cen_p = surv.pseudo;
    out.pseudo_active = surv.n_pseudo > 0;
    if (out.pseudo_active) {
      out.soft_label = s.soft_label.empty() ? pseudo_soft_label(tr.hazards, patient.interval)
                                            : std::vector<double>(s.soft_label.begin(),
                                                                  s.soft_label.end());
    }
  }
  out.lambda_pro = warmup_weight(s.t, s.warmup);
  out.total = s.lambda * out.con + out.surv;

  if (!backward) return out;
  ParamStore& store = grad_model->params();

  if (s.use_survival) {
    std::vector<double> dz(model.dims().embed, 0.0);
    hazard_backward(store, model.head(), tr.patient.data(), tr.head, surv.d_hazards[0], dz);
    Matrix d_rows(tr.stacked.rows.rows(), tr.stacked.rows.cols());
    attention_pool_backward(store, model.inter(), tr.stacked.rows, tr.inter_attention, dz,
                            &d_rows);
    for (std::size_t i = 0; i < tr.stacked.kinds.size(); ++i) {
      const ModalityKind k = tr.stacked.kinds[i];
      linear_backward(store, model.projection(k), tr.modality[index_of(k)].hub.data(),
                      d_rows.row(i), d_hub[index_of(k)]);
    }
  }

  for (ModalityKind k : kAllModalities) {
    const ModalityTrace& m = tr.modality[index_of(k)];
    if (!m.present) continue;
    if (has_adapter(k)) {
      std::vector<double> d_pooled(m.pooled.size(), 0.0);
      adapter_backward(store, model.adapter(k), m.pooled.data(), m.adapter, d_hub[index_of(k)],
                       d_pooled);
      attention_pool_backward(store, model.intra(k), patient.features(k), m.attention, d_pooled,
                              nullptr);
    } else {
      attention_pool_backward(store, model.intra(k), patient.features(k), m.attention,
                              d_hub[index_of(k)], nullptr);
    }
  }
  return out;
}

}  // namespace

LossBreakdown patient_loss(const Model& model, const PatientRecord& patient, ContrastQueues queues,
                           const LossSettings& settings, ForwardTrace* trace) {
  return loss_impl(model, nullptr, patient, queues, settings, trace);
}

LossBreakdown patient_loss_and_grad(Model& model, const PatientRecord& patient,
                                    ContrastQueues queues, const LossSettings& settings,
                                    ForwardTrace* trace) {
  return loss_impl(model, &model, patient, queues, settings, trace);
}

}  // namespace mmsurv
