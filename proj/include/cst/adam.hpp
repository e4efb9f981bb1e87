#pragma once

#include <cmath>
#include <stdexcept>

#include "cst/model.hpp"

namespace cst {

struct OptimizerState {
  ParamGrads m;  // first moments, tensor layout shared with the gradients
  ParamGrads v;  // second moments
  long long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline OptimizerState init_adam(const ModelParams& params) {
  OptimizerState s;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  return s;
}

// One bias-corrected update, in place. With zero gradients the moments only
// decay; on a fresh state that makes the update an exact no-op.
inline void adam_step(ModelParams& params, const ParamGrads& grads, OptimizerState& state,
                      double lr) {
  auto p = tensor_spans(params);
  auto g = tensor_spans(grads);
  auto m = tensor_spans(state.m);
  auto v = tensor_spans(state.v);
  if (p.size() != g.size()) throw std::runtime_error("gradient layout mismatch");
  for (size_t t = 0; t < p.size(); ++t)
    if (p[t].second != g[t].second || p[t].second != m[t].second)
      throw std::runtime_error("gradient shape mismatch in optimizer step");

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t t = 0; t < p.size(); ++t) {
    double* pw = p[t].first;
    const double* gw = g[t].first;
    double* mw = m[t].first;
    double* vw = v[t].first;
    const size_t n = p[t].second;
    for (size_t k = 0; k < n; ++k) {
      mw[k] = state.beta1 * mw[k] + (1.0 - state.beta1) * gw[k];
      vw[k] = state.beta2 * vw[k] + (1.0 - state.beta2) * gw[k] * gw[k];
      const double mhat = mw[k] / c1;
      const double vhat = vw[k] / c2;
      pw[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace cst
