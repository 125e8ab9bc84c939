#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/ops.hpp"
#include "eeg2img/core/optim.hpp"
#include "eeg2img/core/rng.hpp"
#include "eeg2img/core/tensor.hpp"

namespace eeg2img {

/// Weight initialisation. He: N(0, 2/fan_in). Gaussian: N(0, stddev^2).
struct Init {
  enum class Kind { He, Gaussian } kind = Kind::He;
  double stddev = 0.02;

  static Init he() { return {Kind::He, 0.0}; }
  static Init gaussian(double s) { return {Kind::Gaussian, s}; }
};

/// Ordered registry of a model's trainable parameters and state buffers.
/// Registration order defines the checkpoint layout and the hash.
class ParamStore {
 public:
  Tensor add_param(const std::string& name, Shape shape, std::vector<double> values) {
    check_unique(name);
    params_.push_back({name, Tensor::from_data(std::move(shape), std::move(values), true)});
    return params_.back().tensor;
  }

  Tensor add_buffer(const std::string& name, Shape shape, double fill) {
    check_unique(name);
    buffers_.push_back({name, Tensor::full(std::move(shape), fill)});
    return buffers_.back().tensor;
  }

  const std::vector<NamedTensor>& parameters() const { return params_; }
  const std::vector<NamedTensor>& buffers() const { return buffers_; }

  /// Parameters followed by buffers.
  std::vector<NamedTensor> all() const {
    std::vector<NamedTensor> out = params_;
    out.insert(out.end(), buffers_.begin(), buffers_.end());
    return out;
  }

  /// Frozen parameters stop accumulating gradients; inputs still receive them.
  void set_trainable(bool trainable) {
    for (auto& p : params_) p.tensor.set_requires_grad(trainable);
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    for (const auto& t : all()) out.push_back(t.tensor.to_vector());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    auto tensors = all();
    if (snap.size() != tensors.size()) throw ShapeError("snapshot does not match parameter store");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      auto dst = tensors[i].tensor.mutable_data();
      if (dst.size() != snap[i].size()) throw ShapeError("snapshot size mismatch for '" + tensors[i].name + "'");
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  void check_unique(const std::string& name) const {
    for (const auto& t : params_) {
      if (t.name == name) throw ValueError("duplicate parameter name '" + name + "'");
    }
    for (const auto& t : buffers_) {
      if (t.name == name) throw ValueError("duplicate buffer name '" + name + "'");
    }
  }

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
};

inline std::vector<double> init_values(std::size_t count, std::size_t fan_in, Init init, Rng& rng) {
  const double stddev =
      init.kind == Init::Kind::He ? std::sqrt(2.0 / static_cast<double>(fan_in)) : init.stddev;
  std::vector<double> v(count);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

/// y = x W + b with W stored [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Init init, Rng& rng)
      : in_(in), out_(out) {
    weight_ = store.add_param(name + ".weight", {in, out}, init_values(in * out, in, init, rng));
    bias_ = store.add_param(name + ".bias", {out}, std::vector<double>(out, 0.0));
  }

  Tensor operator()(const Tensor& x) const { return add_trailing(matmul(x, weight_), bias_); }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const Tensor& weight() const { return weight_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_, bias_;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, std::size_t kh, std::size_t kw,
         Stride stride, Padding padding, bool bias, Init init, Rng& rng)
      : stride_(stride), padding_(padding) {
    weight_ = store.add_param(name + ".weight", {out, in, kh, kw}, init_values(out * in * kh * kw, in * kh * kw, init, rng));
    if (bias) bias_ = store.add_param(name + ".bias", {out}, std::vector<double>(out, 0.0));
  }

  Tensor operator()(const Tensor& x) const {
    return conv2d(x, weight_, bias_, stride_, padding_);
  }

  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_, bias_;
  Stride stride_;
  Padding padding_ = Padding::Valid;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& name, std::size_t channels) {
    gamma_ = store.add_param(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
    beta_ = store.add_param(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
    state_.running_mean = store.add_buffer(name + ".running_mean", {channels}, 0.0);
    state_.running_var = store.add_buffer(name + ".running_var", {channels}, 1.0);
  }

  Tensor operator()(const Tensor& x, Mode mode) { return batchnorm(x, gamma_, beta_, state_, mode); }

 private:
  Tensor gamma_, beta_;
  BatchNormState state_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t width) {
    gamma_ = store.add_param(name + ".gamma", {width}, std::vector<double>(width, 1.0));
    beta_ = store.add_param(name + ".beta", {width}, std::vector<double>(width, 0.0));
  }

  Tensor operator()(const Tensor& x) const { return layernorm(x, gamma_, beta_); }

 private:
  Tensor gamma_, beta_;
};

/// Per-call forward settings. Dropout masks come from `rng`; a null stream
/// disables dropout regardless of mode.
struct ForwardContext {
  Mode mode = Mode::Eval;
  Rng* rng = nullptr;
};

}  // namespace eeg2img
