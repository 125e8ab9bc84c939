#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/checkpoint.hpp"
#include "eeg2img/core/layers.hpp"
#include "eeg2img/core/ops.hpp"
#include "eeg2img/data/eeg.hpp"
#include "eeg2img/data/split.hpp"
#include "eeg2img/models/training.hpp"

namespace eeg2img {

using json = nlohmann::json;

struct CFormerConfig {
  std::size_t channels = kEegChannels;
  std::size_t samples = kEegSamples;
  std::size_t k = 40;  // conv feature maps == token width
  std::size_t heads = 8;
  std::size_t ff_dim = 160;
  std::size_t embed_dim = 100;
  std::size_t num_classes = kNumClasses;
  std::size_t temporal_kernel = 5;
  std::size_t depth = 1;
  double dropout = 0.25;
  bool positional_encoding = false;
  bool normalize_input = true;
  Activation conv_activation = Activation::Relu;

  std::size_t tokens() const { return samples - temporal_kernel + 1; }

  void validate() const {
    if (heads == 0 || k % heads != 0) {
      throw ValueError("cformer: k = " + std::to_string(k) + " is not divisible by heads = " + std::to_string(heads));
    }
    if (embed_dim != 100) throw ValueError("cformer: embed_dim must be 100 (generator input width)");
    if (temporal_kernel == 0 || temporal_kernel > samples) throw ValueError("cformer: temporal kernel exceeds window");
    if (depth == 0) throw ValueError("cformer: depth must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValueError("cformer: dropout must be in [0, 1)");
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(Activation, {{Activation::Relu, "relu"},
                                         {Activation::LeakyRelu, "leaky_relu"},
                                         {Activation::Elu, "elu"},
                                         {Activation::Tanh, "tanh"},
                                         {Activation::Sigmoid, "sigmoid"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CFormerConfig, channels, samples, k, heads, ff_dim, embed_dim,
                                                num_classes, temporal_kernel, depth, dropout, positional_encoding,
                                                normalize_input, conv_activation)

/// [B, T, k] -> [B*h, T, k/h]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), t = x.dim(1), k = x.dim(2);
  if (k % heads != 0) throw ValueError("split_heads: width " + std::to_string(k) + " not divisible by " + std::to_string(heads));
  const std::size_t d = k / heads;
  return reshape(permute(reshape(x, {b, t, heads, d}), {0, 2, 1, 3}), {b * heads, t, d});
}

/// [B*h, T, d] -> [B, T, h*d]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  const std::size_t bh = x.dim(0), t = x.dim(1), d = x.dim(2);
  const std::size_t b = bh / heads;
  return reshape(permute(reshape(x, {b, heads, t, d}), {0, 2, 1, 3}), {b, t, heads * d});
}

inline Tensor sinusoidal_positions(std::size_t tokens, std::size_t width) {
  std::vector<double> v(tokens * width);
  for (std::size_t p = 0; p < tokens; ++p) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      v[p * width + i] = i % 2 == 0 ? std::sin(static_cast<double>(p) * rate) : std::cos(static_cast<double>(p) * rate);
    }
  }
  return Tensor::from_data({tokens, width}, std::move(v));
}

/// Multi-head self-attention followed by a position-wise feed-forward
/// layer, each wrapped in residual + post layer-norm.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore& store, const std::string& name, const CFormerConfig& cfg, Rng& rng)
      : heads_(cfg.heads), dropout_(cfg.dropout) {
    const std::size_t k = cfg.k;
    q_ = Linear(store, name + ".query", k, k, Init::gaussian(std::sqrt(1.0 / k)), rng);
    k_ = Linear(store, name + ".key", k, k, Init::gaussian(std::sqrt(1.0 / k)), rng);
    v_ = Linear(store, name + ".value", k, k, Init::gaussian(std::sqrt(1.0 / k)), rng);
    o_ = Linear(store, name + ".out", k, k, Init::gaussian(std::sqrt(1.0 / k)), rng);
    ln1_ = LayerNorm(store, name + ".ln1", k);
    ff1_ = Linear(store, name + ".ff1", k, cfg.ff_dim, Init::he(), rng);
    ff2_ = Linear(store, name + ".ff2", cfg.ff_dim, k, Init::gaussian(std::sqrt(1.0 / cfg.ff_dim)), rng);
    ln2_ = LayerNorm(store, name + ".ln2", k);
  }

  /// Scaled dot-product attention, output projection, residual, layer norm.
  /// `weights` receives the [B*h, T, T] attention matrix when non-null.
  Tensor attention(const Tensor& x, const ForwardContext& ctx, Tensor* weights = nullptr) const {
    const std::size_t b = x.dim(0), t = x.dim(1), k = x.dim(2);
    const Tensor flat = reshape(x, {b * t, k});
    const Tensor q = split_heads(reshape(q_(flat), {b, t, k}), heads_);
    const Tensor kk = split_heads(reshape(k_(flat), {b, t, k}), heads_);
    const Tensor v = split_heads(reshape(v_(flat), {b, t, k}), heads_);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(k / heads_));
    const Tensor a = softmax(scale(bmm(q, kk, true), inv_sqrt_d));
    if (weights) *weights = a;
    const Tensor merged = reshape(merge_heads(bmm(a, v), heads_), {b * t, k});
    const Tensor projected = maybe_dropout(o_(merged), ctx);
    return reshape(ln1_(add(flat, projected)), {b, t, k});
  }

  Tensor feed_forward(const Tensor& x, const ForwardContext& ctx) const {
    const std::size_t b = x.dim(0), t = x.dim(1), k = x.dim(2);
    const Tensor flat = reshape(x, {b * t, k});
    const Tensor h = maybe_dropout(ff2_(relu(ff1_(flat))), ctx);
    return reshape(ln2_(add(flat, h)), {b, t, k});
  }

  Tensor operator()(const Tensor& x, const ForwardContext& ctx, Tensor* weights = nullptr) const {
    return feed_forward(attention(x, ctx, weights), ctx);
  }

 private:
  Tensor maybe_dropout(const Tensor& x, const ForwardContext& ctx) const {
    return ctx.mode == Mode::Train && ctx.rng ? dropout(x, dropout_, *ctx.rng) : x;
  }

  std::size_t heads_ = 1;
  double dropout_ = 0.0;
  Linear q_, k_, v_, o_, ff1_, ff2_;
  LayerNorm ln1_, ln2_;
};

struct CFormerOutput {
  Tensor tokens;                  // [B, T', k] after the conv module
  std::vector<Tensor> attention;  // per block, [B*h, T', T']
  Tensor embedding;               // [B, 100], post-activation
  Tensor probs;                   // [B, num_classes]
};

/// Convolutional front-end + transformer encoder + two-layer classifier.
/// The 100-unit hidden layer of the classifier is the EEG encoding.
class CFormer {
 public:
  explicit CFormer(CFormerConfig cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, 0xCF0);
    temporal_ = Conv2d(store_, "conv.temporal", 1, cfg_.k, 1, cfg_.temporal_kernel, {1, 1}, Padding::Valid, false,
                       Init::he(), rng);
    spatial_ = Conv2d(store_, "conv.spatial", cfg_.k, cfg_.k, cfg_.channels, 1, {1, 1}, Padding::Valid, false,
                      Init::he(), rng);
    bn_ = BatchNorm(store_, "conv.bn", cfg_.k);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      blocks_.emplace_back(store_, "block" + std::to_string(i), cfg_, rng);
    }
    fc1_ = Linear(store_, "head.fc1", cfg_.tokens() * cfg_.k, cfg_.embed_dim, Init::he(), rng);
    fc2_ = Linear(store_, "head.fc2", cfg_.embed_dim, cfg_.num_classes, Init::gaussian(std::sqrt(1.0 / cfg_.embed_dim)), rng);
    if (cfg_.positional_encoding) positions_ = sinusoidal_positions(cfg_.tokens(), cfg_.k);
  }

  CFormer(const CFormer&) = delete;
  CFormer& operator=(const CFormer&) = delete;
  CFormer(CFormer&&) = default;
  CFormer& operator=(CFormer&&) = default;

  const CFormerConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Stacks windows into the [B, 1, channels, samples] model input,
  /// z-scoring each channel when configured.
  Tensor make_input(std::span<const EEGWindow> windows) const {
    const std::size_t per = cfg_.channels * cfg_.samples;
    std::vector<double> v;
    v.reserve(windows.size() * per);
    for (const auto& w : windows) {
      if (w.samples.shape() != Shape{cfg_.channels, cfg_.samples}) {
        throw ShapeError("cformer: window of shape " + shape_str(w.samples.shape()) + ", expected " +
                         shape_str({cfg_.channels, cfg_.samples}));
      }
      if (cfg_.normalize_input) {
        auto z = zscore_channels(w.samples.data(), cfg_.channels);
        v.insert(v.end(), z.begin(), z.end());
      } else {
        v.insert(v.end(), w.samples.data().begin(), w.samples.data().end());
      }
    }
    return Tensor::from_data({windows.size(), 1, cfg_.channels, cfg_.samples}, std::move(v));
  }

  /// [B, 1, channels, samples] -> [B, T', k] tokens.
  Tensor conv_module(const Tensor& x, const ForwardContext& ctx) {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.channels || x.dim(3) != cfg_.samples) {
      throw ShapeError("cformer conv module: input " + shape_str(x.shape()) + ", expected [B,1," +
                       std::to_string(cfg_.channels) + "," + std::to_string(cfg_.samples) + "]");
    }
    const std::size_t b = x.dim(0);
    Tensor h = activate(bn_(spatial_(temporal_(x)), ctx.mode), cfg_.conv_activation);
    if (ctx.mode == Mode::Train && ctx.rng) h = dropout(h, cfg_.dropout, *ctx.rng);
    Tensor tokens = permute(reshape(h, {b, cfg_.k, cfg_.tokens()}), {0, 2, 1});
    return positions_.defined() ? add_trailing(tokens, positions_) : tokens;
  }

  Tensor attention_module(const Tensor& tokens, const ForwardContext& ctx, std::vector<Tensor>* weights = nullptr) const {
    Tensor h = tokens;
    for (const auto& block : blocks_) {
      Tensor w;
      h = block(h, ctx, &w);
      if (weights) weights->push_back(w);
    }
    return h;
  }

  const TransformerBlock& block(std::size_t i) const { return blocks_.at(i); }

  CFormerOutput forward(const Tensor& x, const ForwardContext& ctx) {
    CFormerOutput out;
    out.tokens = conv_module(x, ctx);
    const Tensor encoded = attention_module(out.tokens, ctx, &out.attention);
    const std::size_t b = x.dim(0);
    out.embedding = relu(fc1_(reshape(encoded, {b, cfg_.tokens() * cfg_.k})));
    out.probs = softmax(fc2_(out.embedding));
    return out;
  }

  /// Class probabilities, eval mode.
  Tensor classify(std::span<const EEGWindow> windows) { return forward(make_input(windows), {Mode::Eval, nullptr}).probs; }

  /// 100-dim encodings from the penultimate layer, eval mode. Encodings of
  /// an untrained model are refused unless explicitly allowed.
  Tensor embed(std::span<const EEGWindow> windows, bool allow_untrained = false) {
    if (!trained_ && !allow_untrained) {
      throw StateError("cformer: embed() on an untrained encoder; load a trained checkpoint or pass allow_untrained");
    }
    return forward(make_input(windows), {Mode::Eval, nullptr}).embedding;
  }

  bool trained() const { return trained_; }
  void set_trained(bool flag) { trained_ = flag; }

  json config_json() const { return cfg_; }

 private:
  CFormerConfig cfg_;
  ParamStore store_;
  Conv2d temporal_, spatial_;
  BatchNorm bn_;
  std::vector<TransformerBlock> blocks_;
  Linear fc1_, fc2_;
  Tensor positions_;
  bool trained_ = false;
};

inline constexpr const char* kEncoderModel = "cformer";

/// Checkpoint of the encoder; `run_config` is echoed into the manifest.
inline Checkpoint encoder_checkpoint(const CFormer& model, const json& run_config = json::object()) {
  Checkpoint ckpt = capture_checkpoint(kEncoderModel, run_config, model.params());
  ckpt.extra["architecture"] = model.config_json();
  ckpt.extra["trained"] = model.trained();
  return ckpt;
}

inline CFormer load_encoder(const Checkpoint& ckpt) {
  if (ckpt.model != kEncoderModel) throw FormatError("expected a cformer checkpoint, found '" + ckpt.model + "'");
  if (!ckpt.extra.contains("architecture")) throw FormatError("cformer checkpoint lacks its architecture record");
  CFormer model(ckpt.extra.at("architecture").get<CFormerConfig>());
  apply_checkpoint(ckpt, model.params());
  model.set_trained(ckpt.extra.value("trained", false));
  return model;
}

struct EncoderTraining {
  CFormer model;
  TrainResult result;
  DatasetSplit split;
  Evaluation test;
};

/// Stratified 80/20 split, cross-entropy training, best-test checkpoint.
inline EncoderTraining train_encoder(std::span<const EEGWindow> windows, const CFormerConfig& arch,
                                     const SupervisedConfig& cfg, std::uint64_t seed,
                                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (windows.empty()) throw ValueError("train_encoder: dataset is empty");
  std::vector<int> labels;
  for (const auto& w : windows) labels.push_back(w.label);
  DatasetSplit split = split_dataset(labels, 0.8, seed);
  CFormer model(arch, seed);
  // Inputs are built once; batches gather rows from this cache.
  const Tensor all = model.make_input(windows);
  const std::size_t per = arch.channels * arch.samples;
  ProbsFn forward = [&](std::span<const std::size_t> idx, const ForwardContext& ctx) {
    std::vector<double> v(idx.size() * per);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(all.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * per), per, v.begin() + static_cast<std::ptrdiff_t>(r * per));
    }
    return model.forward(Tensor::from_data({idx.size(), 1, arch.channels, arch.samples}, std::move(v)), ctx).probs;
  };
  TrainResult result =
      train_supervised(model.params(), forward, labels, split.train, split.test, arch.num_classes, cfg, seed, on_epoch);
  Evaluation test = evaluate_classifier(forward, labels, split.test, arch.num_classes);
  model.set_trained(true);
  return {std::move(model), std::move(result), std::move(split), std::move(test)};
}

}  // namespace eeg2img
