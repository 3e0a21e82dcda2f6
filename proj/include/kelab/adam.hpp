#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "kelab/autodiff.hpp"

namespace kelab {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// First/second moments for a fixed list of parameters.
struct AdamState {
  AdamOptions options;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t t = 0;

  AdamState() = default;
  AdamState(AdamOptions opts, std::span<Tensor* const> params);
};

/// One bias-corrected Adam update of `params` from their accumulated grads.
/// Throws NonFiniteGradient (leaving params and state untouched) if any grad
/// entry is NaN or Inf.
void adam_step(std::span<Tensor* const> params, AdamState& state);

}  // namespace kelab
