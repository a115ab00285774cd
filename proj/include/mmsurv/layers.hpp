#pragma once

// Affine layers and activations shared by the adapters, projections and the
// hazard head. Forward passes read the ParamStore; backward passes accumulate
// into its gradient slots.

#include <span>
#include <string>
#include <vector>

#include "mmsurv/numerics.hpp"

namespace mmsurv {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Matrix init_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng);

struct Linear {
  ParamId weight = 0;  // out x in
  ParamId bias = 0;    // 1 x out
  std::size_t in = 0;
  std::size_t out = 0;
};

Linear make_linear(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out,
                   Rng& rng);

/// y = W x + b
void linear_forward(const ParamStore& store, const Linear& layer, std::span<const double> x,
                    std::span<double> y);
std::vector<double> linear_forward(const ParamStore& store, const Linear& layer,
                                   std::span<const double> x);

/// Accumulates dW, db; adds W^T dy into dx unless dx is empty.
void linear_backward(ParamStore& store, const Linear& layer, std::span<const double> x,
                     std::span<const double> dy, std::span<double> dx);

void relu_inplace(std::span<double> x);
/// dy *= 1[pre > 0]
void relu_backward_inplace(std::span<const double> pre, std::span<double> dy);

double sigmoid(double x);

}  // namespace mmsurv
