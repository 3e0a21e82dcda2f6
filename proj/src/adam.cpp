#include "kelab/adam.hpp"

#include <cmath>
#include <string>

namespace kelab {

AdamState::AdamState(AdamOptions opts, std::span<Tensor* const> params) : options(opts) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Tensor* p : params) {
    m.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
    v.push_back(Matrix::Zero(p->value().rows(), p->value().cols()));
  }
}

void adam_step(std::span<Tensor* const> params, AdamState& state) {
  if (params.size() != state.m.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params vs " +
                     std::to_string(state.m.size()) + " moment slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i]->grad();
    if (g.rows() != state.m[i].rows() || g.cols() != state.m[i].cols()) {
      throw ShapeError("adam_step: grad " + to_string({g.rows(), g.cols()}) + " vs moment " +
                       to_string({state.m[i].rows(), state.m[i].cols()}));
    }
    if (!g.allFinite()) {
      throw NonFiniteGradient("adam_step: non-finite gradient in parameter slot " + std::to_string(i) +
                              " at step " + std::to_string(state.t + 1));
    }
  }

  const AdamOptions& o = state.options;
  state.t += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i]->grad();
    state.m[i] = o.beta1 * state.m[i] + (1.0 - o.beta1) * g;
    state.v[i] = o.beta2 * state.v[i] + (1.0 - o.beta2) * g.cwiseAbs2();
    params[i]->value().array() -=
        o.lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + o.epsilon);
  }
}

}  // namespace kelab
