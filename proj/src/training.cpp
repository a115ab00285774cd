#include "mmsurv/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "mmsurv/format.hpp"

namespace mmsurv {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr std::uint64_t kShuffleStream = 0x5117;
constexpr std::uint64_t kFoldStream = 0xF01D;

}  // namespace

void validate_config(const TrainConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("config field '" + field + "': " + why);
  };
  if (!(c.lambda >= 0.0)) fail("lambda", "must be >= 0");
  if (!(c.lambda_cen >= 0.0)) fail("lambda_cen", "must be >= 0");
  if (!(c.tau > 0.0)) fail("tau", "must be positive");
  if (c.queue_size < 2) fail("queue_size", "must be at least 2");
  if (c.intervals < 2) fail("intervals", "must be at least 2");
  if (!(c.learning_rate > 0.0)) fail("learning_rate", "must be positive");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) fail("beta1", "must lie in [0,1)");
  if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) fail("beta2", "must lie in [0,1)");
  if (!(c.adam_eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(c.grad_clip > 0.0)) fail("grad_clip", "must be positive");
  if (c.lambda_con && !(*c.lambda_con >= 0.0)) fail("lambda_con", "must be >= 0");
  if (c.attention_hidden == 0) fail("attention_hidden", "must be positive");
  if (c.embed == 0) fail("embed", "must be positive");
  if (c.adapter_hidden == 0) fail("adapter_hidden", "must be positive");
  if (c.head_hidden == 0) fail("head_hidden", "must be positive");
}

ordered_json config_to_json(const TrainConfig& c) {
  ordered_json j;
  j["lambda"] = c.lambda;
  j["lambda_cen"] = c.lambda_cen;
  j["tau"] = c.tau;
  j["queue_size"] = c.queue_size;
  j["intervals"] = c.intervals;
  j["learning_rate"] = c.learning_rate;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["grad_clip"] = c.grad_clip;
  j["epochs"] = c.epochs;
  j["seed"] = c.seed;
  j["warmup_total"] = c.warmup_total;
  j["lambda_con"] = c.lambda_con ? ordered_json(*c.lambda_con) : ordered_json(nullptr);
  j["use_contrastive"] = c.use_contrastive;
  j["use_pseudo_labels"] = c.use_pseudo_labels;
  j["attention_hidden"] = c.attention_hidden;
  j["embed"] = c.embed;
  j["adapter_hidden"] = c.adapter_hidden;
  j["head_hidden"] = c.head_hidden;
  return j;
}

namespace {

template <typename T>
void read_field(const json& j, const std::string& key, T& out) {
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!j.is_number()) throw std::invalid_argument("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw std::invalid_argument("");
    } else {
      if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
        throw std::invalid_argument("");
      }
    }
    out = j.get<T>();
  } catch (const std::exception&) {
    throw std::invalid_argument("config field '" + key + "': wrong type");
  }
}

}  // namespace

TrainConfig config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "lambda") read_field(v, key, c.lambda);
    else if (key == "lambda_cen") read_field(v, key, c.lambda_cen);
    else if (key == "tau") read_field(v, key, c.tau);
    else if (key == "queue_size") read_field(v, key, c.queue_size);
    else if (key == "intervals") read_field(v, key, c.intervals);
    else if (key == "learning_rate") read_field(v, key, c.learning_rate);
    else if (key == "beta1") read_field(v, key, c.beta1);
    else if (key == "beta2") read_field(v, key, c.beta2);
    else if (key == "adam_eps") read_field(v, key, c.adam_eps);
    else if (key == "grad_clip") read_field(v, key, c.grad_clip);
    else if (key == "epochs") read_field(v, key, c.epochs);
    else if (key == "seed") read_field(v, key, c.seed);
    else if (key == "warmup_total") read_field(v, key, c.warmup_total);
    else if (key == "lambda_con") {
      if (v.is_null()) {
        c.lambda_con.reset();
      } else {
        double x = 0.0;
        read_field(v, key, x);
        c.lambda_con = x;
      }
    }
    else if (key == "use_contrastive") read_field(v, key, c.use_contrastive);
    else if (key == "use_pseudo_labels") read_field(v, key, c.use_pseudo_labels);
    else if (key == "attention_hidden") read_field(v, key, c.attention_hidden);
    else if (key == "embed") read_field(v, key, c.embed);
    else if (key == "adapter_hidden") read_field(v, key, c.adapter_hidden);
    else if (key == "head_hidden") read_field(v, key, c.head_hidden);
    else throw std::invalid_argument("config field '" + key + "': unknown field");
  }
  validate_config(c);
  return c;
}

namespace {

// Restrict-qualified so the loop vectorizes.
void adam_update(double* __restrict p, const double* __restrict g, double* __restrict m,
                 double* __restrict v, std::size_t n, double scale, double b1, double b2,
                 double step, double inv_sqrt_bc2, double eps) {
  for (std::size_t i = 0; i < n; ++i) {
    const double gi = g[i] * scale;
    m[i] = b1 * m[i] + (1.0 - b1) * gi;
    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
    p[i] -= step * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
  }
}

}  // namespace

Adam::Adam(const ParamStore& params) {
  for (ParamId id = 0; id < params.size(); ++id) {
    const Matrix& p = params.value(id);
    m_.emplace_back(p.rows(), p.cols());
    v_.emplace_back(p.rows(), p.cols());
  }
}

Adam Adam::restore(std::vector<Matrix> m, std::vector<Matrix> v, std::uint64_t steps) {
  Adam a;
  a.m_ = std::move(m);
  a.v_ = std::move(v);
  a.steps_ = steps;
  return a;
}

double Adam::step(ParamStore& params, const TrainConfig& cfg) {
  double sq = 0.0;
  for (ParamId id = 0; id < params.size(); ++id) {
    for (double g : params.grad(id).data()) sq += g * g;
  }
  const double gnorm = std::sqrt(sq);
  if (!std::isfinite(gnorm)) {
    for (ParamId id = 0; id < params.size(); ++id) {
      if (!params.grad(id).all_finite()) {
        throw std::runtime_error("non-finite gradient in parameter " + params.name(id));
      }
    }
    throw std::runtime_error("gradient norm overflow");
  }
  const double scale = gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (ParamId id = 0; id < params.size(); ++id) {
    adam_update(params.value(id).data().data(), params.grad(id).data().data(),
                m_[id].data().data(), v_[id].data().data(), params.value(id).size(), scale,
                cfg.beta1, cfg.beta2, cfg.learning_rate / bc1, 1.0 / std::sqrt(bc2), cfg.adam_eps);
  }
  return gnorm;
}

void write_loss_log_csv(std::span<const EpochLog> log, std::ostream& out) {
  out << "epoch,L,L_con,L_WR,L_PB,L_uncen,L_cen,L_cen_p,lambda_pro\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << format_double(e.total) << ',' << format_double(e.con) << ','
        << format_double(e.wr) << ',' << format_double(e.pb) << ',' << format_double(e.uncen)
        << ',' << format_double(e.cen) << ',' << format_double(e.cen_p) << ','
        << format_double(e.lambda_pro) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(Cohort cohort, TrainConfig cfg, Model model)
    : cohort_(std::move(cohort)),
      cfg_(std::move(cfg)),
      model_(std::move(model)),
      rng_(cfg_.seed) {
  validate_config(cfg_);
  validate_cohort(cohort_);
  if (cohort_.patients.empty()) throw std::invalid_argument("training cohort is empty");
  if (!cohort_.binned() || cohort_.num_intervals() != cfg_.intervals) {
    throw std::invalid_argument("training cohort must be binned into " +
                                std::to_string(cfg_.intervals) + " intervals");
  }
  lambda_con_ = cfg_.lambda_con ? *cfg_.lambda_con : compute_lambda_con(cohort_);
  const std::size_t horizon =
      cfg_.warmup_total ? cfg_.warmup_total : cfg_.epochs * cohort_.patients.size();
  t_total_ = static_cast<double>(std::max<std::size_t>(1, horizon));
  queue_image_ = MemoryQueue(cfg_.queue_size);
  queue_text_ = MemoryQueue(cfg_.queue_size);
}

Trainer::Trainer(Cohort cohort, TrainConfig cfg)
    : Trainer(std::move(cohort), cfg, Model(cfg.dims(), cfg.seed)) {
  adam_ = Adam(model_.params());
  init_queues();
}

Trainer Trainer::resume(Cohort cohort, const Checkpoint& ckpt) {
  if (cohort.interval_edges != ckpt.interval_edges) {
    throw std::invalid_argument("cohort interval edges differ from the checkpoint");
  }
  if (cohort.patients.size() != ckpt.n_train) {
    throw std::invalid_argument("cohort size differs from the checkpoint's training set");
  }
  Trainer t(std::move(cohort), ckpt.config, ckpt.model);
  t.adam_ = ckpt.optimizer;
  t.iteration_ = ckpt.iteration;
  t.epoch_ = ckpt.epoch;
  t.lambda_con_ = ckpt.lambda_con;
  t.rng_ = Rng(ckpt.rng_seed, ckpt.rng_counter);
  t.queue_image_ = ckpt.queue_image;
  t.queue_text_ = ckpt.queue_text;
  return t;
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t epoch) const {
  std::vector<std::size_t> order(cohort_.patients.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = rng_.substream(kShuffleStream).substream(epoch);
  rng.shuffle(order);
  return order;
}

void Trainer::init_queues() {
  if (!cfg_.use_contrastive) return;
  const auto order = epoch_order(0);
  auto fill = [&](MemoryQueue& q, ModalityKind hub, ModalityKind other) {
    std::vector<std::size_t> eligible;
    for (std::size_t i : order) {
      const auto& p = cohort_.patients[i];
      if (p.has(hub) && p.has(other)) eligible.push_back(i);
    }
    // Too few complete pairs: the side stays empty and contributes nothing.
    if (eligible.size() < q.capacity()) return;
    std::vector<QueuePair> pairs;
    for (std::size_t i : eligible) {
      if (pairs.size() == q.capacity()) break;
      const auto& p = cohort_.patients[i];
      const ForwardTrace tr = forward(model_, p);
      const auto& h = tr.modality[index_of(hub)];
      const auto& o = tr.modality[index_of(other)];
      if (contrast_pair_usable(h, o)) pairs.push_back({p.id, h.hub.storage(), o.hub.storage()});
    }
    if (pairs.size() < q.capacity()) return;
    for (auto& pair : pairs) {
      touched_.insert(pair.patient_id);
      q.push(std::move(pair));
    }
  };
  fill(queue_image_, ModalityKind::WSI, ModalityKind::Radiology);
  fill(queue_text_, ModalityKind::PathReport, ModalityKind::ClinicalNotes);
}

namespace {

std::string first_non_finite(const ParamStore& ps) {
  auto finite = [](const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double x) { return std::isfinite(x); });
  };
  for (ParamId id = 0; id < ps.size(); ++id) {
    if (!finite(ps.value(id))) return ", first non-finite value in parameter " + ps.name(id);
  }
  for (ParamId id = 0; id < ps.size(); ++id) {
    if (!finite(ps.grad(id))) return ", first non-finite gradient in parameter " + ps.name(id);
  }
  return "";
}

}  // namespace

EpochLog Trainer::run_epoch() {
  if (done()) throw std::logic_error("training already finished");
  const auto order = epoch_order(epoch_);

  LossSettings s;
  s.lambda = cfg_.lambda;
  s.lambda_con = lambda_con_;
  s.lambda_cen = cfg_.lambda_cen;
  s.tau = cfg_.tau;
  s.use_contrastive = cfg_.use_contrastive;
  s.use_pseudo_labels = cfg_.use_pseudo_labels;
  s.warmup.t_total = t_total_;

  EpochLog log;
  log.epoch = epoch_;
  std::size_t n_wr = 0, n_pb = 0, n_unc = 0, n_cen = 0, n_pse = 0;
  for (std::size_t idx : order) {
    const PatientRecord& p = cohort_.patients[idx];
    s.t = static_cast<double>(iteration_);
    model_.params().zero_grad();
    ForwardTrace tr;
    auto abort = [&](const std::string& why) {
      throw std::runtime_error("non-finite loss at iteration " + std::to_string(iteration_) +
                               " (patient " + p.id + first_non_finite(model_.params()) + why +
                               ")");
    };
    LossBreakdown loss;
    try {
      loss = patient_loss_and_grad(model_, p, {&queue_image_, &queue_text_}, s, &tr);
    } catch (const std::invalid_argument& e) {
      // A NaN weight surfaces as an out-of-range hazard in the forward pass.
      if (first_non_finite(model_.params()).empty()) throw;
      abort(std::string(": ") + e.what());
    }
    if (!std::isfinite(loss.total)) abort("");
    try {
      adam_.step(model_.params(), cfg_);
    } catch (const std::runtime_error& e) {
      throw std::runtime_error(std::string(e.what()) + " at iteration " +
                               std::to_string(iteration_));
    }
    touched_.insert(p.id);

    if (cfg_.use_contrastive) {
      auto push = [&](MemoryQueue& q, ModalityKind hub, ModalityKind other) {
        const auto& h = tr.modality[index_of(hub)];
        const auto& o = tr.modality[index_of(other)];
        if (q.full() && contrast_pair_usable(h, o)) {
          q.push({p.id, h.hub.storage(), o.hub.storage()});
        }
      };
      push(queue_image_, ModalityKind::WSI, ModalityKind::Radiology);
      push(queue_text_, ModalityKind::PathReport, ModalityKind::ClinicalNotes);
    }

    log.total += loss.total;
    log.con += loss.con;
    log.surv += loss.surv;
    if (loss.has_wr) log.wr += loss.wr, ++n_wr;
    if (loss.has_pb) log.pb += loss.pb, ++n_pb;
    if (p.event) {
      log.uncen += loss.uncen, ++n_unc;
    } else {
      log.cen += loss.cen, ++n_cen;
    }
    if (loss.pseudo_active) log.cen_p += loss.cen_p, ++n_pse;
    log.lambda_pro = loss.lambda_pro;
    ++iteration_;
  }
  auto mean = [](double sum, std::size_t n) { return n ? sum / static_cast<double>(n) : 0.0; };
  const std::size_t n = order.size();
  log.total = mean(log.total, n);
  log.con = mean(log.con, n);
  log.surv = mean(log.surv, n);
  log.wr = mean(log.wr, n_wr);
  log.pb = mean(log.pb, n_pb);
  log.uncen = mean(log.uncen, n_unc);
  log.cen = mean(log.cen, n_cen);
  log.cen_p = mean(log.cen_p, n_pse);
  ++epoch_;
  return log;
}

std::vector<EpochLog> Trainer::run() {
  std::vector<EpochLog> log;
  while (!done()) log.push_back(run_epoch());
  return log;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = cfg_;
  c.model = model_;
  c.optimizer = adam_;
  c.iteration = iteration_;
  c.epoch = epoch_;
  c.n_train = cohort_.patients.size();
  c.lambda_con = lambda_con_;
  c.rng_seed = rng_.seed();
  c.rng_counter = rng_.counter();
  c.interval_edges = cohort_.interval_edges;
  c.queue_image = queue_image_;
  c.queue_text = queue_text_;
  return c;
}

TrainResult train(const Cohort& cohort, const TrainConfig& cfg) {
  Trainer t(cohort, cfg);
  auto log = t.run();
  return {t.checkpoint(), std::move(log)};
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

constexpr char kMagic[8] = {'M', 'M', 'S', 'V', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw std::invalid_argument("checkpoint: truncated file");
  }
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

void write_doubles(std::ostream& out, std::span<const double> xs) {
  for (double x : xs) write_le(out, std::bit_cast<std::uint64_t>(x));
}

std::vector<double> read_doubles(std::istream& in, std::size_t n) {
  std::vector<double> xs(n);
  for (double& x : xs) x = std::bit_cast<double>(read_le<std::uint64_t>(in));
  return xs;
}

struct TensorRef {
  std::string name;
  std::size_t rows, cols;
  std::span<const double> data;
};

ordered_json queue_header(const MemoryQueue& q) {
  ordered_json ids = ordered_json::array();
  for (const auto& e : q.entries()) ids.push_back(e.patient_id);
  return {{"capacity", q.capacity()}, {"ids", ids}};
}

}  // namespace

void write_checkpoint(const Checkpoint& c, std::ostream& out) {
  std::vector<TensorRef> tensors;
  const ParamStore& ps = c.model.params();
  for (ParamId id = 0; id < ps.size(); ++id) {
    const Matrix& m = ps.value(id);
    tensors.push_back({"param/" + ps.name(id), m.rows(), m.cols(), m.data()});
  }
  const auto& am = c.optimizer.first_moment();
  const auto& av = c.optimizer.second_moment();
  for (ParamId id = 0; id < am.size(); ++id) {
    tensors.push_back({"adam_m/" + ps.name(id), am[id].rows(), am[id].cols(), am[id].data()});
  }
  for (ParamId id = 0; id < av.size(); ++id) {
    tensors.push_back({"adam_v/" + ps.name(id), av[id].rows(), av[id].cols(), av[id].data()});
  }
  auto add_queue = [&](const char* side, const MemoryQueue& q) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      const auto& e = q.entries()[i];
      const std::string base = std::string("queue/") + side + "/" + std::to_string(i);
      tensors.push_back({base + "/hub", 1, e.hub.size(), e.hub});
      tensors.push_back({base + "/other", 1, e.other.size(), e.other});
    }
  };
  add_queue("image", c.queue_image);
  add_queue("text", c.queue_text);

  ordered_json header;
  header["config"] = config_to_json(c.config);
  header["iteration"] = c.iteration;
  header["epoch"] = c.epoch;
  header["n_train"] = c.n_train;
  header["lambda_con"] = c.lambda_con;
  header["rng"] = {{"seed", c.rng_seed}, {"counter", c.rng_counter}};
  header["interval_edges"] = c.interval_edges;
  header["adam_steps"] = c.optimizer.steps();
  header["queues"] = {{"image", queue_header(c.queue_image)},
                      {"text", queue_header(c.queue_text)}};
  ordered_json table = ordered_json::array();
  for (const auto& t : tensors) table.push_back({t.name, t.rows, t.cols});
  header["tensors"] = std::move(table);

  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) write_doubles(out, t.data);
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::invalid_argument("checkpoint: bad magic");
  }
  if (read_le<std::uint32_t>(in) != kCheckpointVersion) {
    throw std::invalid_argument("checkpoint: unsupported version");
  }
  const auto len = read_le<std::uint64_t>(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw std::invalid_argument("checkpoint: truncated header");
  }
  json h;
  try {
    h = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("checkpoint: bad header: ") + e.what());
  }

  try {
    Checkpoint c;
    c.config = config_from_json(h.at("config"));
    c.model = Model(c.config.dims(), c.config.seed);
    c.iteration = h.at("iteration").get<std::uint64_t>();
    c.epoch = h.at("epoch").get<std::size_t>();
    c.n_train = h.at("n_train").get<std::size_t>();
    c.lambda_con = h.at("lambda_con").get<double>();
    c.rng_seed = h.at("rng").at("seed").get<std::uint64_t>();
    c.rng_counter = h.at("rng").at("counter").get<std::uint64_t>();
    c.interval_edges = h.at("interval_edges").get<std::vector<double>>();

    ParamStore& ps = c.model.params();
    std::vector<Matrix> am(ps.size()), av(ps.size());
    std::vector<std::vector<double>> image_hub, image_other, text_hub, text_other;
    std::size_t params_seen = 0;
    for (const auto& t : h.at("tensors")) {
      const auto name = t.at(0).get<std::string>();
      const auto rows = t.at(1).get<std::size_t>();
      const auto cols = t.at(2).get<std::size_t>();
      auto data = read_doubles(in, rows * cols);
      auto slash = name.find('/');
      const std::string kind = name.substr(0, slash);
      const std::string rest = name.substr(slash + 1);
      if (kind == "param" || kind == "adam_m" || kind == "adam_v") {
        const ParamId id = ps.id(rest);
        if (ps.value(id).rows() != rows || ps.value(id).cols() != cols) {
          throw std::invalid_argument("checkpoint: shape mismatch for " + name);
        }
        Matrix m(rows, cols, std::move(data));
        if (kind == "param") {
          ps.value(id) = std::move(m);
          ++params_seen;
        } else {
          (kind == "adam_m" ? am : av)[id] = std::move(m);
        }
      } else if (kind == "queue") {
        const bool image = rest.rfind("image/", 0) == 0;
        const bool hub = rest.ends_with("/hub");
        auto& dst = image ? (hub ? image_hub : image_other) : (hub ? text_hub : text_other);
        dst.push_back(std::move(data));
      } else {
        throw std::invalid_argument("checkpoint: unknown tensor " + name);
      }
    }
    if (params_seen != ps.size()) throw std::invalid_argument("checkpoint: missing parameters");
    for (ParamId id = 0; id < ps.size(); ++id) {
      if (am[id].size() != ps.value(id).size() || av[id].size() != ps.value(id).size()) {
        throw std::invalid_argument("checkpoint: missing optimizer state for " + ps.name(id));
      }
    }
    c.optimizer = Adam::restore(std::move(am), std::move(av), h.at("adam_steps").get<std::uint64_t>());

    auto rebuild = [&](const json& q, std::vector<std::vector<double>>& hubs,
                       std::vector<std::vector<double>>& others) {
      MemoryQueue mq(q.at("capacity").get<std::size_t>());
      const auto ids = q.at("ids").get<std::vector<std::string>>();
      if (ids.size() != hubs.size() || ids.size() != others.size()) {
        throw std::invalid_argument("checkpoint: queue table mismatch");
      }
      for (std::size_t i = 0; i < ids.size(); ++i) {
        mq.push({ids[i], std::move(hubs[i]), std::move(others[i])});
      }
      return mq;
    };
    c.queue_image = rebuild(h.at("queues").at("image"), image_hub, image_other);
    c.queue_text = rebuild(h.at("queues").at("text"), text_hub, text_other);
    return c;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("checkpoint: bad header: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("cannot open " + path.string() + " for writing");
  write_checkpoint(ckpt, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open " + path.string());
  return read_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Evaluation

Evaluation evaluate(const Model& model, const Cohort& cohort) {
  if (!cohort.binned() || cohort.num_intervals() != model.dims().intervals) {
    throw std::invalid_argument("evaluation cohort must be binned into " +
                                std::to_string(model.dims().intervals) + " intervals");
  }
  Evaluation ev;
  ev.predictions.reserve(cohort.patients.size());
  for (const auto& p : cohort.patients) {
    const ForwardTrace tr = forward(model, p);
    PatientPrediction pred{p.id,        p.time,      p.event, p.interval,
                           tr.hazards, tr.survival, tr.risk, tr.modality_attention};
    for (ModalityKind k : kAllModalities) {
      const auto& m = tr.modality[index_of(k)];
      if (!m.present) continue;
      for (std::size_t j = 0; j < m.attention.scores.size(); ++j) {
        ev.intra_attention.push_back({p.id, k, j, m.attention.scores[j]});
      }
    }
    for (std::size_t i = 0; i < tr.stacked.kinds.size(); ++i) {
      ev.inter_attention.push_back({p.id, tr.stacked.kinds[i], tr.inter_attention.scores[i]});
    }
    ev.predictions.push_back(std::move(pred));
  }
  const auto outcomes = to_outcomes(ev.predictions);
  ev.metrics = compute_metrics(outcomes);
  return ev;
}

Evaluation evaluate(const Checkpoint& ckpt, const Cohort& cohort) {
  if (cohort.interval_edges != ckpt.interval_edges) {
    throw std::invalid_argument("interval edge mismatch between cohort and checkpoint");
  }
  return evaluate(ckpt.model, cohort);
}

std::vector<SurvivalOutcome> to_outcomes(std::span<const PatientPrediction> preds) {
  std::vector<SurvivalOutcome> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back({p.time, p.event, p.risk, p.survival, p.interval});
  return out;
}

std::vector<PredictionRow> to_prediction_rows(std::span<const PatientPrediction> preds) {
  std::vector<PredictionRow> rows;
  rows.reserve(preds.size());
  for (const auto& p : preds) rows.push_back({p.id, p.risk, p.hazards, p.survival});
  return rows;
}

// ---------------------------------------------------------------------------
// Cross-validation

std::vector<std::size_t> assign_folds(std::size_t n, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("need at least 2 folds");
  if (folds > n) throw std::invalid_argument("fold count larger than cohort");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng(seed).substream(kFoldStream).shuffle(order);
  std::vector<std::size_t> fold(n);
  for (std::size_t i = 0; i < n; ++i) fold[order[i]] = i % folds;
  return fold;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {std::nan(""), std::nan("")};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

}  // namespace

CvResult cross_validate(const Cohort& cohort, const TrainConfig& cfg, std::size_t folds) {
  validate_config(cfg);
  const auto fold_of = assign_folds(cohort.patients.size(), folds, cfg.seed);

  CvResult cv;
  std::vector<PatientPrediction> pooled;
  std::vector<double> cis, briers;
  for (std::size_t f = 0; f < folds; ++f) {
    Cohort train_set, test_set;
    for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
      (fold_of[i] == f ? test_set : train_set).patients.push_back(cohort.patients[i]);
    }
    auto edges = fit_interval_edges(train_set.patients, cfg.intervals);
    apply_interval_edges(train_set, edges);
    apply_interval_edges(test_set, edges);

    Trainer trainer(train_set, cfg);
    FoldResult fr;
    fr.fold = f;
    fr.log = trainer.run();
    fr.trained_ids.assign(trainer.touched_ids().begin(), trainer.touched_ids().end());
    fr.interval_edges = edges;
    for (const auto& p : test_set.patients) fr.test_ids.push_back(p.id);

    Evaluation ev = evaluate(trainer.model(), test_set);
    fr.metrics = ev.metrics;
    fr.predictions = std::move(ev.predictions);
    if (fr.metrics.ci) cis.push_back(*fr.metrics.ci);
    if (fr.metrics.brier) briers.push_back(*fr.metrics.brier);
    pooled.insert(pooled.end(), fr.predictions.begin(), fr.predictions.end());
    cv.folds.push_back(std::move(fr));
  }
  std::tie(cv.ci_mean, cv.ci_std) = mean_std(cis);
  std::tie(cv.brier_mean, cv.brier_std) = mean_std(briers);
  cv.pooled = compute_metrics(to_outcomes(pooled));
  return cv;
}

std::string cv_to_json(const CvResult& cv, int indent) {
  auto metrics = [](const MetricsBundle& m) { return ordered_json::parse(metrics_to_json(m)); };
  ordered_json j;
  ordered_json folds = ordered_json::array();
  for (const auto& f : cv.folds) {
    ordered_json fj;
    fj["fold"] = f.fold;
    fj["n_test"] = f.test_ids.size();
    fj["interval_edges"] = f.interval_edges;
    fj["metrics"] = metrics(f.metrics);
    folds.push_back(std::move(fj));
  }
  j["folds"] = std::move(folds);
  j["mean"] = {{"ci", cv.ci_mean},
               {"ci_std", cv.ci_std},
               {"brier", cv.brier_mean},
               {"brier_std", cv.brier_std}};
  j["pooled"] = metrics(cv.pooled);
  return j.dump(indent);
}

// ---------------------------------------------------------------------------
// Gradient check of the composed objective

PipelineGradcheck run_pipeline_gradcheck(std::uint64_t seed, std::size_t points,
                                         const FiniteDiffOptions& opts, const ModelDims& dims) {
  GenConfig gen;
  gen.n_patients = 3;
  gen.missing_prob = {0.0, 0.0, 0.0, 0.0};
  gen.instances = {InstanceRange{2, 3}, InstanceRange{1, 2}, InstanceRange{1, 2},
                   InstanceRange{1, 2}};
  gen.seed = seed;
  Cohort cohort = generate_synthetic(gen);
  // Labels chosen to exercise every survival term: an event, a censored
  // patient with later intervals (pseudo label active), and an early event.
  const int last = static_cast<int>(dims.intervals) - 1;
  cohort.patients[0].event = true;
  cohort.patients[0].interval = std::min(2, last);
  cohort.patients[1].event = false;
  cohort.patients[1].interval = 0;
  cohort.patients[2].event = true;
  cohort.patients[2].interval = 0;

  Rng rng = Rng(seed).substream(0x9C);
  auto random_queue = [&](const char* tag) {
    MemoryQueue q(5);
    for (std::size_t i = 0; i < q.capacity(); ++i) {
      QueuePair pair{std::string(tag) + std::to_string(i), std::vector<double>(kHubDim),
                     std::vector<double>(kHubDim)};
      for (double& x : pair.hub) x = rng.normal();
      for (double& x : pair.other) x = rng.normal();
      q.push(std::move(pair));
    }
    return q;
  };
  const MemoryQueue image = random_queue("img");
  const MemoryQueue text = random_queue("txt");

  LossSettings s;
  s.lambda = 0.8;
  s.lambda_con = 0.6;
  s.lambda_cen = 1.3;
  s.warmup.t_total = 100.0;
  s.t = 50.0;

  PipelineGradcheck out;
  for (std::size_t point = 0; point < points; ++point) {
    Model model(dims, mix64(seed * 1000003ULL + point));
    model.params().zero_grad();
    // The pseudo label is a stop-gradient target, so the numeric side holds it
    // at its value from the unperturbed parameters.
    std::vector<std::vector<double>> labels;
    for (const auto& p : cohort.patients) {
      labels.push_back(patient_loss_and_grad(model, p, {&image, &text}, s).soft_label);
    }
    auto objective = [&](const ParamStore&) {
      double total = 0.0;
      for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
        LossSettings frozen = s;
        frozen.soft_label = labels[i];
        total += patient_loss(model, cohort.patients[i], {&image, &text}, frozen).total;
      }
      return total;
    };
    FiniteDiffOptions o = opts;
    o.seed = mix64(opts.seed + point);
    GradCheckReport r = finite_diff_check(objective, model.params(), o);
    out.max_rel_error = std::max(out.max_rel_error, r.max_rel_error);
    out.passed = out.passed && r.passed;
    out.reports.push_back(std::move(r));
    ++out.points;
  }
  return out;
}

}  // namespace mmsurv
