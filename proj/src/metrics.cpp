#include "mmsurv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "mmsurv/format.hpp"

namespace mmsurv {

double concordance_index(std::span<const SurvivalOutcome> outcomes) {
  // Sort by time; for each event, every later-time patient is comparable.
  std::vector<std::size_t> order(outcomes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return outcomes[a].time < outcomes[b].time;
  });

  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& a = outcomes[order[i]];
    if (!a.event) continue;
    std::size_t j = i + 1;
    while (j < order.size() && !(outcomes[order[j]].time > a.time)) ++j;
    for (; j < order.size(); ++j) {
      const auto& b = outcomes[order[j]];
      ++comparable;
      if (a.risk > b.risk) {
        concordant += 1.0;
      } else if (a.risk == b.risk) {
        concordant += 0.5;
      }
    }
  }
  if (comparable == 0) throw std::invalid_argument("no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

double brier_score_at(std::span<const SurvivalOutcome> outcomes, int j) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& o : outcomes) {
    if (j < 0 || static_cast<std::size_t>(j) >= o.survival.size()) {
      throw std::invalid_argument("brier: interval out of range");
    }
    double y;
    if (o.interval > j) {
      y = 1.0;
    } else if (o.event) {
      y = 0.0;
    } else {
      continue;
    }
    const double diff = y - o.survival[j];
    acc += diff * diff;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("brier: no determinable patients");
  return acc / static_cast<double>(n);
}

double brier_score(std::span<const SurvivalOutcome> outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("brier: no determinable patients");
  const std::size_t k = outcomes.front().survival.size();
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t j = 0; j < k; ++j) {
    try {
      acc += brier_score_at(outcomes, static_cast<int>(j));
      ++used;
    } catch (const std::invalid_argument&) {
      // interval with no determinable patient
    }
  }
  if (used == 0) throw std::invalid_argument("brier: no determinable patients");
  return acc / static_cast<double>(used);
}

double KMCurve::at(double t) const {
  double s = 1.0;
  for (const auto& p : points) {
    if (p.time > t) break;
    s = p.survival;
  }
  return s;
}

KMCurve kaplan_meier(std::span<const SurvivalOutcome> outcomes) {
  std::vector<std::size_t> order(outcomes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return outcomes[a].time < outcomes[b].time;
  });

  KMCurve curve;
  double s = 1.0;
  std::size_t at_risk = outcomes.size();
  for (std::size_t i = 0; i < order.size();) {
    const double t = outcomes[order[i]].time;
    std::size_t d = 0, removed = 0;
    while (i < order.size() && outcomes[order[i]].time == t) {
      if (outcomes[order[i]].event) ++d;
      ++removed;
      ++i;
    }
    if (d > 0) s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
    curve.points.push_back({t, s, at_risk, d});
    at_risk -= removed;
  }
  return curve;
}

double chi2_sf_1df(double chi2) {
  if (chi2 <= 0.0) return 1.0;
  return std::erfc(std::sqrt(chi2 / 2.0));
}

LogrankResult logrank_test(std::span<const SurvivalOutcome> group_a,
                           std::span<const SurvivalOutcome> group_b) {
  if (group_a.empty() || group_b.empty()) throw std::invalid_argument("logrank: empty group");
  std::vector<double> event_times;
  for (auto grp : {group_a, group_b}) {
    for (const auto& o : grp) {
      if (o.event) event_times.push_back(o.time);
    }
  }
  if (event_times.empty()) throw std::invalid_argument("logrank: no events");
  std::sort(event_times.begin(), event_times.end());
  event_times.erase(std::unique(event_times.begin(), event_times.end()), event_times.end());

  auto counts = [](std::span<const SurvivalOutcome> g, double t, std::size_t& at_risk,
                   std::size_t& deaths) {
    at_risk = 0;
    deaths = 0;
    for (const auto& o : g) {
      if (o.time >= t) ++at_risk;
      if (o.event && o.time == t) ++deaths;
    }
  };

  double observed_minus_expected = 0.0;
  double variance = 0.0;
  for (double t : event_times) {
    std::size_t na, da, nb, db;
    counts(group_a, t, na, da);
    counts(group_b, t, nb, db);
    const double n = static_cast<double>(na + nb);
    const double d = static_cast<double>(da + db);
    const double frac_a = static_cast<double>(na) / n;
    observed_minus_expected += static_cast<double>(da) - d * frac_a;
    if (n > 1.0) variance += d * frac_a * (1.0 - frac_a) * (n - d) / (n - 1.0);
  }
  if (!(variance > 0.0)) return {0.0, 1.0};
  LogrankResult r;
  r.chi2 = observed_minus_expected * observed_minus_expected / variance;
  r.p = chi2_sf_1df(r.chi2);
  return r;
}

MedianSplit median_split(std::span<const SurvivalOutcome> outcomes) {
  if (outcomes.size() < 2) throw std::invalid_argument("median_split: need at least 2 patients");
  std::vector<double> risks;
  risks.reserve(outcomes.size());
  for (const auto& o : outcomes) risks.push_back(o.risk);
  std::sort(risks.begin(), risks.end());
  const std::size_t n = risks.size();
  MedianSplit split;
  split.threshold = n % 2 ? risks[n / 2] : 0.5 * (risks[n / 2 - 1] + risks[n / 2]);
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    (outcomes[i].risk > split.threshold ? split.high : split.low).push_back(i);
  }
  return split;
}

std::vector<SurvivalOutcome> gather(std::span<const SurvivalOutcome> outcomes,
                                    std::span<const std::size_t> idx) {
  std::vector<SurvivalOutcome> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(outcomes[i]);
  return out;
}

MetricsBundle compute_metrics(std::span<const SurvivalOutcome> outcomes) {
  MetricsBundle m;
  m.n = outcomes.size();
  for (const auto& o : outcomes) m.n_events += o.event ? 1 : 0;
  try {
    m.ci = concordance_index(outcomes);
  } catch (const std::invalid_argument&) {
  }
  try {
    m.brier = brier_score(outcomes);
  } catch (const std::invalid_argument&) {
  }
  if (outcomes.size() >= 2) {
    const auto split = median_split(outcomes);
    if (!split.high.empty() && !split.low.empty() && m.n_events > 0) {
      const auto lr = logrank_test(gather(outcomes, split.high), gather(outcomes, split.low));
      m.logrank_chi2 = lr.chi2;
      m.logrank_p = lr.p;
    }
  }
  return m;
}

std::string metrics_to_json(const MetricsBundle& m, int indent) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["ci"] = opt(m.ci);
  j["brier"] = opt(m.brier);
  j["logrank_chi2"] = opt(m.logrank_chi2);
  j["logrank_p"] = opt(m.logrank_p);
  j["n"] = m.n;
  j["n_events"] = m.n_events;
  return j.dump(indent);
}

void write_km_csv(const KMCurve& high, const KMCurve& low, std::ostream& out) {
  out << "group,time,survival,at_risk,events\n";
  auto rows = [&](const char* name, const KMCurve& c) {
    for (const auto& p : c.points) {
      out << name << ',' << format_double(p.time) << ',' << format_double(p.survival) << ','
          << p.at_risk << ',' << p.events << '\n';
    }
  };
  rows("high", high);
  rows("low", low);
}

}  // namespace mmsurv
