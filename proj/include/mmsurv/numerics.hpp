#pragma once

// Dense row-major matrices, a named parameter store with gradient slots,
// a counter-based RNG, and a central-difference gradient checker.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmsurv {

/// Floor applied inside stable_log.
inline constexpr double kLogFloor = 1e-12;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  bool all_finite() const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Kernels. Weight matrices are laid out (out x in).

/// y = W x
void matvec(const Matrix& w, std::span<const double> x, std::span<double> y);
/// dx += W^T dy
void matvec_t_acc(const Matrix& w, std::span<const double> dy, std::span<double> dx);
/// G += dy x^T
void outer_acc(Matrix& g, std::span<const double> dy, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
/// y += alpha x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// Max-subtracted softmax. Throws std::invalid_argument("empty vector").
std::vector<double> softmax(std::span<const double> v);

/// ln(max(x, kLogFloor)). Throws std::invalid_argument("negative probability") for x < 0.
double stable_log(double x);

using ParamId = std::size_t;

/// Named parameters, each paired with a gradient slot of the same shape.
/// Ids are insertion indices and stay valid for the store's lifetime.
class ParamStore {
 public:
  ParamId add(std::string name, Matrix init);

  Matrix& value(ParamId id) { return entries_[id].value; }
  const Matrix& value(ParamId id) const { return entries_[id].value; }
  Matrix& grad(ParamId id) { return entries_[id].grad; }
  const Matrix& grad(ParamId id) const { return entries_[id].grad; }
  const std::string& name(ParamId id) const { return entries_[id].name; }

  ParamId id(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return entries_.size(); }
  std::size_t total_entries() const;

  void zero_grad();

 private:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, ParamId> index_;
};

/// Counter-based generator: output k is a pure function of (seed, k), so the
/// full state is the pair and substreams are derived by hashing the seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  Rng substream(std::uint64_t id) const;

  std::uint64_t next_u64();
  /// [0, 1)
  double uniform();
  /// (0, 1)
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform on [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  double exponential(double rate);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  bool operator==(const Rng&) const = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);

struct FiniteDiffOptions {
  double step = 1e-5;
  double tol = 1e-4;
  /// 0 checks every entry; otherwise a seeded random subset per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t failed = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  bool passed = true;
};

double relative_error(double analytic, double numeric);

/// Compares the gradients already stored in `params` against central
/// differences of `f`. Entries are perturbed in place and restored exactly.
/// Throws std::runtime_error("objective not finite") on a non-finite value.
GradCheckReport finite_diff_check(const std::function<double(const ParamStore&)>& f,
                                  ParamStore& params, const FiniteDiffOptions& opts = {});

}  // namespace mmsurv
