#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sspt/ndgrad/tensor.hpp"

namespace sspt::ndgrad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for the parameters an optimizer is allowed to touch.
/// `param_ids` lists those parameters; frozen ones are simply absent.
template <typename T>
struct AdamState {
  AdamOptions options;
  std::vector<std::size_t> param_ids;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam(std::span<const Tensor<T>> params, std::vector<std::size_t> ids, AdamOptions options) {
  AdamState<T> st;
  st.options = options;
  for (auto id : ids) {
    if (id >= params.size()) throw ShapeError("adam: param id " + std::to_string(id) + " out of range");
    st.m.emplace_back(params[id].shape());
    st.v.emplace_back(params[id].shape());
  }
  st.param_ids = std::move(ids);
  return st;
}

/// One bias-corrected Adam update of every parameter listed in `state`.
/// `grads` is indexed like `params`.
template <typename T>
void adam_step(std::span<Tensor<T>> params, std::span<const Tensor<T>> grads, AdamState<T>& state) {
  if (grads.size() != params.size()) {
    throw ShapeError("adam: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                     " params");
  }
  for (std::size_t s = 0; s < state.param_ids.size(); ++s) {
    const auto id = state.param_ids[s];
    if (params[id].shape() != grads[id].shape() || state.m[s].shape() != params[id].shape()) {
      throw ShapeError("adam: param " + std::to_string(id) + " shape " + to_string(params[id].shape()) +
                       " vs grad " + to_string(grads[id].shape()) + " vs moment " + to_string(state.m[s].shape()));
    }
  }
  state.step += 1;
  const auto& o = state.options;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const T b1 = T(o.beta1), b2 = T(o.beta2);
  const T step_size = T(o.lr / bc1);
  const T inv_sqrt_bc2 = T(1.0 / std::sqrt(bc2));
  const T eps = T(o.eps);
  for (std::size_t s = 0; s < state.param_ids.size(); ++s) {
    auto& p = params[state.param_ids[s]];
    const auto& g = grads[state.param_ids[s]];
    auto& m = state.m[s];
    auto& v = state.v[s];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace sspt::ndgrad
