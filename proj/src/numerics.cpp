#include "mmsurv/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace mmsurv {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) +
                                " does not match shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void matvec(const Matrix& w, std::span<const double> x, std::span<double> y) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  if (x.size() != in || y.size() != out) {
    throw std::invalid_argument("matvec: dim mismatch");
  }
  for (std::size_t r = 0; r < out; ++r) {
    const double* wr = w.data().data() + r * in;
    // Four fixed partial sums: vectorizable and still order-deterministic.
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t c = 0;
    for (; c + 4 <= in; c += 4) {
      a0 += wr[c] * x[c];
      a1 += wr[c + 1] * x[c + 1];
      a2 += wr[c + 2] * x[c + 2];
      a3 += wr[c + 3] * x[c + 3];
    }
    for (; c < in; ++c) a0 += wr[c] * x[c];
    y[r] = (a0 + a1) + (a2 + a3);
  }
}

void matvec_t_acc(const Matrix& w, std::span<const double> dy, std::span<double> dx) {
  const std::size_t out = w.rows();
  const std::size_t in = w.cols();
  if (dy.size() != out || dx.size() != in) {
    throw std::invalid_argument("matvec_t_acc: dim mismatch");
  }
  double* d = dx.data();
  for (std::size_t r = 0; r < out; ++r) {
    const double g = dy[r];
    if (g == 0.0) continue;
    const double* wr = w.data().data() + r * in;
    for (std::size_t c = 0; c < in; ++c) d[c] += g * wr[c];
  }
}

void outer_acc(Matrix& g, std::span<const double> dy, std::span<const double> x) {
  const std::size_t out = g.rows();
  const std::size_t in = g.cols();
  if (dy.size() != out || x.size() != in) {
    throw std::invalid_argument("outer_acc: dim mismatch");
  }
  for (std::size_t r = 0; r < out; ++r) {
    const double s = dy[r];
    if (s == 0.0) continue;
    double* gr = g.data().data() + r * in;
    for (std::size_t c = 0; c < in; ++c) gr[c] += s * x[c];
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dim mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("axpy: dim mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double stable_log(double x) {
  if (x < 0.0) throw std::invalid_argument("negative probability");
  return std::log(std::max(x, kLogFloor));
}

ParamId ParamStore::add(std::string name, Matrix init) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  const ParamId id = entries_.size();
  index_.emplace(name, id);
  Matrix grad(init.rows(), init.cols());
  entries_.push_back({std::move(name), std::move(init), std::move(grad)});
  return id;
}

ParamId ParamStore::id(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter " + name);
  return it->second;
}

std::size_t ParamStore::total_entries() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

Rng Rng::substream(std::uint64_t id) const {
  return Rng(mix64(seed_ ^ mix64(id + 0x632BE59BD9B4E019ULL)));
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform_open() {
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t Rng::uniform_int(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_int: empty range");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  const double u1 = uniform_open();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::exponential(double rate) { return -std::log(uniform_open()) / rate; }

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport finite_diff_check(const std::function<double(const ParamStore&)>& f,
                                  ParamStore& params, const FiniteDiffOptions& opts) {
  if (!(opts.step >= 1e-6 && opts.step <= 1e-3)) {
    throw std::invalid_argument("finite_diff_check: step must lie in [1e-6, 1e-3]");
  }
  auto eval = [&]() {
    const double v = f(params);
    if (!std::isfinite(v)) throw std::runtime_error("objective not finite");
    return v;
  };
  eval();

  GradCheckReport report;
  Rng rng(opts.seed);
  for (ParamId id = 0; id < params.size(); ++id) {
    Matrix& value = params.value(id);
    const Matrix& grad = params.grad(id);
    std::vector<std::size_t> entries(value.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (opts.max_entries_per_param > 0 && entries.size() > opts.max_entries_per_param) {
      rng.shuffle(entries);
      entries.resize(opts.max_entries_per_param);
      std::sort(entries.begin(), entries.end());
    }

    ParamCheck check{params.name(id), 0, 0, 0.0};
    for (std::size_t k : entries) {
      double& slot = value.data()[k];
      const double original = slot;
      slot = original + opts.step;
      const double up = eval();
      slot = original - opts.step;
      const double down = eval();
      slot = original;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double err = relative_error(grad.data()[k], numeric);
      ++check.checked;
      if (err > opts.tol) ++check.failed;
      check.max_rel_error = std::max(check.max_rel_error, err);
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    if (check.failed > 0) report.passed = false;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace mmsurv
