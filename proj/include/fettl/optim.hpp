#pragma once

// AdamW with decoupled weight decay, plus the plain gradient-descent update.
//
// Defaults follow the conventional PyTorch values (lr 1e-3, betas 0.9/0.999,
// eps 1e-8, weight decay 0.01). Those defaults are an assumption: the training
// recipe only says "default settings".

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fettl/autodiff.hpp"
#include "fettl/paramset.hpp"

namespace fettl {

struct AdamWState {
  std::size_t step_count = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;

  static AdamWState with_lr(double lr, double weight_decay = 0.01) {
    AdamWState s;
    s.learning_rate = lr;
    s.weight_decay = weight_decay;
    return s;
  }
};

namespace detail {
inline const Tensor& grad_for(const GradientMap& grads, const std::string& name, const Tensor& param) {
  auto it = grads.find(name);
  if (it == grads.end()) throw ContractError("missing gradient for parameter '" + name + "'");
  if (it->second.shape() != param.shape())
    throw DimensionError("gradient for '" + name + "' has shape " + shape_str(it->second.shape()) +
                         ", parameter is " + shape_str(param.shape()));
  return it->second;
}
}  // namespace detail

inline ParamSet adamw_step(ParamSet params, const GradientMap& grads, AdamWState& state) {
  for (const auto& e : params) detail::grad_for(grads, e.name, e.tensor);
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (auto& e : params) {
    const Tensor& g = detail::grad_for(grads, e.name, e.tensor);
    auto& m = state.first_moment[e.name];
    auto& v = state.second_moment[e.name];
    if (m.size() != e.tensor.numel()) {
      m.assign(e.tensor.numel(), 0.0);
      v.assign(e.tensor.numel(), 0.0);
    }
    auto p = e.tensor.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= state.learning_rate * state.weight_decay * p[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
  return params;
}

inline ParamSet sgd_step(ParamSet params, const GradientMap& grads, double lr) {
  for (auto& e : params) {
    const Tensor& g = detail::grad_for(grads, e.name, e.tensor);
    auto p = e.tensor.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  }
  return params;
}

}  // namespace fettl
