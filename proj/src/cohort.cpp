#include "mmsurv/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mmsurv {

using nlohmann::json;

std::size_t modality_dim(ModalityKind kind) {
  return kind == ModalityKind::ClinicalNotes ? 1024 : 512;
}

bool is_mandatory(ModalityKind kind) {
  return kind == ModalityKind::WSI || kind == ModalityKind::PathReport;
}

std::string_view to_string(ModalityKind kind) {
  switch (kind) {
    case ModalityKind::WSI:
      return "WSI";
    case ModalityKind::PathReport:
      return "PathReport";
    case ModalityKind::Radiology:
      return "Radiology";
    case ModalityKind::ClinicalNotes:
      return "ClinicalNotes";
  }
  return "?";
}

ModalityKind parse_modality(std::string_view name) {
  for (ModalityKind k : kAllModalities) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown modality " + std::string(name));
}

void validate_patient(const PatientRecord& p) {
  const std::string who = "patient " + p.id;
  if (p.id.empty()) throw std::invalid_argument("patient with empty id");
  if (!(std::isfinite(p.time) && p.time > 0.0)) {
    throw std::invalid_argument(who + ": time must be positive and finite");
  }
  for (ModalityKind k : kAllModalities) {
    if (is_mandatory(k) && !p.has(k)) {
      throw std::invalid_argument(who + ": missing mandatory modality " +
                                  std::string(to_string(k)));
    }
  }
  for (const auto& [kind, fs] : p.feature_sets) {
    if (fs.modality != kind) throw std::invalid_argument(who + ": modality key mismatch");
    if (fs.features.rows() < 1) {
      throw std::invalid_argument(who + ": empty " + std::string(to_string(kind)) + " set");
    }
    if (fs.features.cols() != modality_dim(kind)) {
      throw std::invalid_argument("dim mismatch " + who);
    }
    if (!fs.features.all_finite()) throw std::invalid_argument(who + ": non-finite features");
  }
}

void validate_cohort(const Cohort& c) {
  std::set<std::string> ids;
  for (const auto& p : c.patients) {
    validate_patient(p);
    if (!ids.insert(p.id).second) throw std::invalid_argument("duplicate patient id " + p.id);
  }
  for (std::size_t i = 1; i < c.interval_edges.size(); ++i) {
    if (!(c.interval_edges[i] > c.interval_edges[i - 1])) {
      throw std::invalid_argument("interval edges must be strictly increasing");
    }
  }
  const int k = static_cast<int>(c.num_intervals());
  for (const auto& p : c.patients) {
    if (c.binned() && (p.interval < 0 || p.interval >= k)) {
      throw std::invalid_argument("patient " + p.id + ": interval out of range");
    }
  }
}

std::vector<double> fit_interval_edges(std::span<const PatientRecord> patients, std::size_t k) {
  if (k < 2) throw std::invalid_argument("interval count must be at least 2");
  std::vector<double> times;
  for (const auto& p : patients) {
    if (p.event) times.push_back(p.time);
  }
  const std::size_t n = times.size();
  if (n < k) throw std::invalid_argument("insufficient events");
  std::sort(times.begin(), times.end());

  std::vector<double> edges;
  edges.reserve(k - 1);
  for (std::size_t j = 1; j < k; ++j) {
    const std::size_t rank = std::max<std::size_t>(1, j * n / k);
    const double cut = times[rank - 1];
    if (!edges.empty() && !(cut > edges.back())) throw std::invalid_argument("insufficient events");
    edges.push_back(cut);
  }
  return edges;
}

int assign_interval(double t, std::span<const double> edges) {
  return static_cast<int>(std::lower_bound(edges.begin(), edges.end(), t) - edges.begin());
}

void apply_interval_edges(Cohort& cohort, std::vector<double> edges) {
  for (auto& p : cohort.patients) p.interval = assign_interval(p.time, edges);
  cohort.interval_edges = std::move(edges);
}

Cohort bin_intervals(Cohort cohort, std::size_t k) {
  auto edges = fit_interval_edges(cohort.patients, k);
  apply_interval_edges(cohort, std::move(edges));
  return cohort;
}

void validate_gen_config(const GenConfig& cfg) {
  if (cfg.n_patients == 0) throw std::invalid_argument("n_patients must be positive");
  for (ModalityKind k : kAllModalities) {
    const double p = cfg.missing_prob[index_of(k)];
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("missing_prob out of [0,1]");
    if (is_mandatory(k) && p != 0.0) {
      throw std::invalid_argument(std::string(to_string(k)) + " is mandatory; missing_prob must be 0");
    }
    const auto& r = cfg.instances[index_of(k)];
    if (r.min < 1 || r.min > r.max) throw std::invalid_argument("invalid instance range");
  }
  if (!(cfg.censor_rate > 0.0 && cfg.censor_rate < 1.0)) {
    throw std::invalid_argument("censor_rate must lie in (0,1)");
  }
  if (!(cfg.baseline_scale > 0.0) || !(cfg.weibull_shape > 0.0)) {
    throw std::invalid_argument("baseline_scale and weibull_shape must be positive");
  }
  if (!std::isfinite(cfg.signal) || !(cfg.feature_signal >= 0.0)) {
    throw std::invalid_argument("invalid signal strength");
  }
}

namespace {

// Substream tags under the generator's root stream.
constexpr std::uint64_t kPatientStream = 1;
constexpr std::uint64_t kLoadingStream = 2;
constexpr std::uint64_t kCalibrationStream = 3;
constexpr std::size_t kCalibrationDraws = 20000;

double draw_event_time(const GenConfig& cfg, double u, Rng& rng) {
  const double scale = cfg.baseline_scale * std::exp(-cfg.signal * u);
  return scale * std::pow(-std::log(rng.uniform_open()), 1.0 / cfg.weibull_shape);
}

std::string patient_id(std::size_t i, std::size_t n) {
  std::ostringstream os;
  const int width = std::max(4, static_cast<int>(std::to_string(n).size()));
  os << 'P' << std::setw(width) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

double calibrate_censor_rate(const GenConfig& cfg) {
  Rng rng = Rng(cfg.seed).substream(kCalibrationStream);
  std::vector<double> times(kCalibrationDraws);
  for (double& t : times) {
    const double u = rng.normal();
    t = draw_event_time(cfg, u, rng);
  }
  // P(C < T) for C ~ Exp(rate) is E[1 - exp(-rate T)], increasing in rate.
  auto censored_fraction = [&](double rate) {
    double acc = 0.0;
    for (double t : times) acc += -std::expm1(-rate * t);
    return acc / static_cast<double>(times.size());
  };
  double lo = std::log(1e-12), hi = std::log(1e12);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (censored_fraction(std::exp(mid)) < cfg.censor_rate) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

SyntheticCohort generate_synthetic_with_latent(const GenConfig& cfg) {
  validate_gen_config(cfg);
  const Rng root(cfg.seed);
  const double censor_rate = calibrate_censor_rate(cfg);

  std::array<std::vector<double>, kNumModalities> loadings;
  for (ModalityKind k : kAllModalities) {
    Rng rng = root.substream(kLoadingStream).substream(index_of(k));
    auto& a = loadings[index_of(k)];
    a.resize(modality_dim(k));
    for (double& x : a) x = rng.normal();
    const double n = norm(a);
    for (double& x : a) x *= cfg.feature_signal / n;
  }

  SyntheticCohort out;
  out.cohort.patients.reserve(cfg.n_patients);
  out.latent_risk.reserve(cfg.n_patients);
  const Rng patients_root = root.substream(kPatientStream);
  for (std::size_t i = 0; i < cfg.n_patients; ++i) {
    Rng rng = patients_root.substream(i);
    const double u = rng.normal();
    const double event_time = draw_event_time(cfg, u, rng);
    const double censor_time = rng.exponential(censor_rate);

    PatientRecord p;
    p.id = patient_id(i, cfg.n_patients);
    p.event = event_time <= censor_time;
    p.time = std::min(event_time, censor_time);
    for (ModalityKind k : kAllModalities) {
      const bool present = rng.uniform() >= cfg.missing_prob[index_of(k)];
      const auto& range = cfg.instances[index_of(k)];
      const std::size_t n =
          range.min + static_cast<std::size_t>(rng.uniform_int(range.max - range.min + 1));
      if (!present) continue;
      const auto& a = loadings[index_of(k)];
      Matrix f(n, a.size());
      for (std::size_t r = 0; r < n; ++r) {
        auto row = f.row(r);
        for (std::size_t c = 0; c < a.size(); ++c) row[c] = a[c] * u + rng.normal();
      }
      p.feature_sets.emplace(k, FeatureSet{k, std::move(f)});
    }
    out.cohort.patients.push_back(std::move(p));
    out.latent_risk.push_back(u);
  }
  return out;
}

Cohort generate_synthetic(const GenConfig& cfg) {
  return generate_synthetic_with_latent(cfg).cohort;
}

namespace {

json patient_to_json(const PatientRecord& p) {
  json mods = json::object();
  for (const auto& [kind, fs] : p.feature_sets) {
    mods[std::string(to_string(kind))] = {
        {"n", fs.features.rows()}, {"d", fs.features.cols()}, {"data", fs.features.storage()}};
  }
  return {{"id", p.id},
          {"time", p.time},
          {"event", p.event},
          {"interval", p.interval},
          {"modalities", std::move(mods)}};
}

template <typename T>
T require(const json& j, const char* key) {
  if (!j.contains(key)) throw std::invalid_argument(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument(std::string("bad type for field '") + key + "'");
  }
}

PatientRecord patient_from_json(const json& j) {
  PatientRecord p;
  p.id = require<std::string>(j, "id");
  p.time = require<double>(j, "time");
  p.event = require<bool>(j, "event");
  p.interval = require<int>(j, "interval");
  if (!j.contains("modalities")) throw std::invalid_argument("missing field 'modalities'");
  const json& mods = j.at("modalities");
  if (!mods.is_object()) throw std::invalid_argument("bad type for field 'modalities'");
  for (const auto& [name, m] : mods.items()) {
    const ModalityKind kind = parse_modality(name);
    const auto n = require<std::size_t>(m, "n");
    const auto d = require<std::size_t>(m, "d");
    auto data = require<std::vector<double>>(m, "data");
    if (d != modality_dim(kind)) throw std::invalid_argument("dim mismatch patient " + p.id);
    if (data.size() != n * d) {
      throw std::invalid_argument("data length mismatch patient " + p.id);
    }
    p.feature_sets.emplace(kind, FeatureSet{kind, Matrix(n, d, std::move(data))});
  }
  return p;
}

}  // namespace

void write_cohort(const Cohort& cohort, std::ostream& out) {
  json header = {{"format_version", 1}, {"interval_edges", cohort.interval_edges}};
  out << header.dump() << '\n';
  for (const auto& p : cohort.patients) out << patient_to_json(p).dump() << '\n';
}

Cohort read_cohort(std::istream& in) {
  Cohort cohort;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (!j.is_object()) throw std::invalid_argument("record is not an object");
      if (!have_header) {
        if (require<int>(j, "format_version") != 1) {
          throw std::invalid_argument("unsupported format_version");
        }
        cohort.interval_edges = require<std::vector<double>>(j, "interval_edges");
        have_header = true;
      } else {
        cohort.patients.push_back(patient_from_json(j));
      }
    } catch (const json::exception& e) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw std::invalid_argument("line 1: missing header record");
  validate_cohort(cohort);
  return cohort;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::invalid_argument("cannot open " + path.string() + " for writing");
  write_cohort(cohort, out);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Cohort load_cohort(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open " + path.string());
  return read_cohort(in);
}

}  // namespace mmsurv
