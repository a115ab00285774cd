#include "mmsurv/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace mmsurv {

Matrix init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& x : m.data()) x = rng.uniform(-bound, bound);
  return m;
}

Linear make_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                   Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(prefix + ".weight", init_uniform(out, in, in, rng));
  l.bias = store.add(prefix + ".bias", Matrix(1, out));
  return l;
}

void linear_forward(const ParamStore& store, const Linear& layer, std::span<const double> x,
                    std::span<double> y) {
  if (x.size() != layer.in) throw std::invalid_argument("linear: dim mismatch");
  matvec(store.value(layer.weight), x, y);
  axpy(1.0, store.value(layer.bias).data(), y);
}

std::vector<double> linear_forward(const ParamStore& store, const Linear& layer,
                                   std::span<const double> x) {
  std::vector<double> y(layer.out);
  linear_forward(store, layer, x, y);
  return y;
}

void linear_backward(ParamStore& store, const Linear& layer, std::span<const double> x,
                     std::span<const double> dy, std::span<double> dx) {
  outer_acc(store.grad(layer.weight), dy, x);
  axpy(1.0, dy, store.grad(layer.bias).data());
  if (!dx.empty()) matvec_t_acc(store.value(layer.weight), dy, dx);
}

void relu_inplace(std::span<double> x) {
  for (double& v : x) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(std::span<const double> pre, std::span<double> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i) {
    if (!(pre[i] > 0.0)) dy[i] = 0.0;
  }
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace mmsurv
