#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/tensor.hpp"

namespace eeg2img {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment estimates for one parameter list. Moments are allocated on the
/// first step and keep the order of the parameter list they were built for.
struct OptimizerState {
  AdamConfig hyper;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update. A parameter without a gradient is
/// treated as having a zero gradient. Non-finite gradients abort before any
/// parameter is touched.
inline void adam_step(std::span<NamedTensor> params, OptimizerState& state) {
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw DivergenceError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.tensor.numel(), 0.0);
      state.second_moment.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  ++state.step;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = params[k].tensor;
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != t.numel()) throw ShapeError("adam_step: moment shape mismatch for '" + params[k].name + "'");
    const auto grad = t.grad();
    auto value = t.mutable_data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
      value[i] -= h.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h.eps);
    }
  }
}

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig config) : params_(std::move(params)) { state_.hyper = config; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() { adam_step(params_, state_); }

  const OptimizerState& state() const { return state_; }

 private:
  std::vector<NamedTensor> params_;
  OptimizerState state_;
};

}  // namespace eeg2img
