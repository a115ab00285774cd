#include "mmsurv/survival.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "mmsurv/format.hpp"

namespace mmsurv {

HazardHead make_hazard_head(ParamStore& store, const std::string& prefix, std::size_t in,
                            std::size_t hidden, std::size_t intervals, Rng& rng) {
  return {make_linear(store, prefix + ".fc1", in, hidden, rng),
          make_linear(store, prefix + ".fc2", hidden, intervals, rng)};
}

std::vector<double> hazard_forward(const ParamStore& store, const HazardHead& head,
                                   std::span<const double> z, HeadCache* cache) {
  std::vector<double> pre = linear_forward(store, head.fc1, z);
  std::vector<double> hidden = pre;
  relu_inplace(hidden);
  std::vector<double> h = linear_forward(store, head.fc2, hidden);
  for (double& x : h) x = std::clamp(sigmoid(x), kHazardFloor, 1.0 - kHazardFloor);
  if (cache) {
    cache->pre = std::move(pre);
    cache->hidden = std::move(hidden);
    cache->hazards = h;
  }
  return h;
}

void hazard_backward(ParamStore& store, const HazardHead& head, std::span<const double> z,
                     const HeadCache& cache, std::span<const double> d_hazards,
                     std::span<double> dz) {
  const auto& h = cache.hazards;
  std::vector<double> dlogit(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    const bool clamped = h[j] <= kHazardFloor || h[j] >= 1.0 - kHazardFloor;
    dlogit[j] = clamped ? 0.0 : d_hazards[j] * h[j] * (1.0 - h[j]);
  }
  std::vector<double> dh(head.fc1.out, 0.0);
  linear_backward(store, head.fc2, cache.hidden, dlogit, dh);
  relu_backward_inplace(cache.pre, dh);
  linear_backward(store, head.fc1, z, dh, dz);
}

std::vector<double> survival_from_hazards(std::span<const double> h) {
  std::vector<double> s(h.size());
  double acc = 1.0;
  for (std::size_t j = 0; j < h.size(); ++j) {
    if (!(h[j] > 0.0 && h[j] < 1.0)) throw std::invalid_argument("hazard outside (0,1)");
    acc *= 1.0 - h[j];
    s[j] = acc;
  }
  return s;
}

namespace {

void check_interval(int j, std::size_t k, const char* what) {
  if (j < 0 || static_cast<std::size_t>(j) >= k) {
    throw std::invalid_argument(std::string(what) + ": interval " + std::to_string(j) +
                                " out of range");
  }
}

void check_shapes(std::span<const double> h, std::span<const double> s) {
  if (h.size() != s.size() || h.empty()) throw std::invalid_argument("hazard/survival size mismatch");
}

// Adds d(-log S_j)/dh_k = 1/(1-h_k) for k <= j, unless S_j sits under the log floor.
void add_neg_log_survival_grad(std::span<const double> h, std::span<const double> s, int j,
                               double scale, std::vector<double>& d) {
  if (j < 0 || s[j] < kLogFloor) return;
  for (int k = 0; k <= j; ++k) d[k] += scale / (1.0 - h[k]);
}

}  // namespace

HazardLoss nll_uncensored_grad(std::span<const double> h, std::span<const double> s, int j) {
  check_shapes(h, s);
  check_interval(j, h.size(), "nll_uncensored");
  HazardLoss r;
  r.d_hazards.assign(h.size(), 0.0);
  const double s_prev = j == 0 ? 1.0 : s[j - 1];
  r.loss = -(stable_log(s_prev) + stable_log(h[j]));
  add_neg_log_survival_grad(h, s, j - 1, 1.0, r.d_hazards);
  if (h[j] >= kLogFloor) r.d_hazards[j] -= 1.0 / h[j];
  return r;
}

double nll_uncensored(std::span<const double> h, std::span<const double> s, int j) {
  return nll_uncensored_grad(h, s, j).loss;
}

HazardLoss nll_censored_grad(std::span<const double> h, std::span<const double> s, int c) {
  check_shapes(h, s);
  check_interval(c, h.size(), "nll_censored");
  HazardLoss r;
  r.d_hazards.assign(h.size(), 0.0);
  r.loss = -stable_log(s[c]);
  add_neg_log_survival_grad(h, s, c, 1.0, r.d_hazards);
  return r;
}

double nll_censored(std::span<const double> h, std::span<const double> s, int c) {
  return nll_censored_grad(h, s, c).loss;
}

std::vector<double> pseudo_soft_label(std::span<const double> h, int c) {
  const int k = static_cast<int>(h.size());
  if (c < 0 || c >= k - 1) {
    throw std::invalid_argument("pseudo_soft_label: no interval after censor interval " +
                                std::to_string(c));
  }
  const auto eligible = softmax(h.subspan(static_cast<std::size_t>(c) + 1));
  std::vector<double> q(h.size(), 0.0);
  std::copy(eligible.begin(), eligible.end(), q.begin() + c + 1);
  return q;
}

HazardLoss nll_pseudo_grad(std::span<const double> h, std::span<const double> s,
                           std::span<const double> q) {
  check_shapes(h, s);
  if (q.size() != h.size()) throw std::invalid_argument("q size mismatch");
  double sum = 0.0;
  for (double x : q) {
    if (!(x >= 0.0)) throw std::invalid_argument("q not normalized");
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("q not normalized");

  HazardLoss r;
  r.d_hazards.assign(h.size(), 0.0);
  for (std::size_t j = 0; j < q.size(); ++j) {
    if (q[j] == 0.0) continue;
    const auto term = nll_uncensored_grad(h, s, static_cast<int>(j));
    r.loss += q[j] * term.loss;
    axpy(q[j], term.d_hazards, r.d_hazards);
  }
  return r;
}

double nll_pseudo(std::span<const double> h, std::span<const double> s,
                  std::span<const double> q) {
  return nll_pseudo_grad(h, s, q).loss;
}

double warmup_weight(double t, const WarmupSchedule& sched) {
  if (!(sched.t_total > 0.0)) throw std::invalid_argument("warmup: t_total must be positive");
  if (t < 0.0) throw std::invalid_argument("warmup: negative iteration");
  const double frac = std::min(t, sched.t_total) / sched.t_total;
  const double gap = 1.0 - frac;
  return 0.1 * std::exp(-5.0 * gap * gap);
}

double risk_score(std::span<const double> s) {
  double acc = 0.0;
  for (double x : s) acc += x;
  return -acc;
}

SurvivalLossResult survival_loss(std::span<const SurvivalSample> batch, double t,
                                 const WarmupSchedule& sched, const SurvivalLossOptions& opts) {
  SurvivalLossResult r;
  r.lambda_pro = warmup_weight(t, sched);
  r.d_hazards.resize(batch.size());

  // First pass: subset sizes, so each term is a mean over its own subset.
  for (const auto& s : batch) {
    if (s.event) {
      ++r.n_uncensored;
    } else {
      ++r.n_censored;
      if (opts.use_pseudo_labels && s.interval < static_cast<int>(s.hazards.size()) - 1) {
        ++r.n_pseudo;
      }
    }
  }
  const double w_unc = r.n_uncensored ? 1.0 / static_cast<double>(r.n_uncensored) : 0.0;
  const double w_cen = r.n_censored ? opts.lambda_cen / static_cast<double>(r.n_censored) : 0.0;
  const double w_pse =
      r.n_pseudo ? opts.lambda_cen * r.lambda_pro / static_cast<double>(r.n_pseudo) : 0.0;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& s = batch[i];
    auto& d = r.d_hazards[i];
    d.assign(s.hazards.size(), 0.0);
    if (s.event) {
      const auto term = nll_uncensored_grad(s.hazards, s.survival, s.interval);
      r.uncensored += term.loss;
      axpy(w_unc, term.d_hazards, d);
      continue;
    }
    const auto cen = nll_censored_grad(s.hazards, s.survival, s.interval);
    r.censored += cen.loss;
    axpy(w_cen, cen.d_hazards, d);
    if (opts.use_pseudo_labels && s.interval < static_cast<int>(s.hazards.size()) - 1) {
      const auto q = s.soft_label.empty()
                         ? pseudo_soft_label(s.hazards, s.interval)
                         : std::vector<double>(s.soft_label.begin(), s.soft_label.end());
      const auto pse = nll_pseudo_grad(s.hazards, s.survival, q);
      r.pseudo += pse.loss;
      axpy(w_pse, pse.d_hazards, d);
    }
  }
  if (r.n_uncensored) r.uncensored /= static_cast<double>(r.n_uncensored);
  if (r.n_censored) r.censored /= static_cast<double>(r.n_censored);
  if (r.n_pseudo) r.pseudo /= static_cast<double>(r.n_pseudo);
  r.total = r.uncensored + opts.lambda_cen * (r.censored + r.lambda_pro * r.pseudo);
  return r;
}

void write_predictions_csv(std::span<const PredictionRow> rows, std::ostream& out) {
  const std::size_t k = rows.empty() ? 0 : rows.front().hazards.size();
  out << "patient_id,risk";
  for (std::size_t j = 0; j < k; ++j) out << ",h_" << j;
  for (std::size_t j = 0; j < k; ++j) out << ",S_" << j;
  out << '\n';
  for (const auto& r : rows) {
    out << r.patient_id << ',' << format_double(r.risk);
    for (double x : r.hazards) out << ',' << format_double(x);
    for (double x : r.survival) out << ',' << format_double(x);
    out << '\n';
  }
}

std::vector<PredictionRow> read_predictions_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("predictions: empty file");
  std::size_t columns = 1;
  for (char ch : line) columns += ch == ',';
  if (columns < 4 || (columns - 2) % 2 != 0 || line.rfind("patient_id,risk", 0) != 0) {
    throw std::invalid_argument("predictions: bad header");
  }
  const std::size_t k = (columns - 2) / 2;

  std::vector<PredictionRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns) {
      throw std::invalid_argument("predictions line " + std::to_string(lineno) +
                                  ": expected " + std::to_string(columns) + " fields");
    }
    PredictionRow r;
    r.patient_id = cells[0];
    try {
      r.risk = std::stod(cells[1]);
      for (std::size_t j = 0; j < k; ++j) r.hazards.push_back(std::stod(cells[2 + j]));
      for (std::size_t j = 0; j < k; ++j) r.survival.push_back(std::stod(cells[2 + k + j]));
    } catch (const std::exception&) {
      throw std::invalid_argument("predictions line " + std::to_string(lineno) +
                                  ": bad number");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mmsurv
