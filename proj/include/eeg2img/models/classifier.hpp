#pragma once

#include <algorithm>
#include <array>
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

struct ImageClassifierConfig {
  std::vector<std::size_t> conv_filters{32, 32, 64};
  std::vector<std::size_t> fc_widths{128, 64};
  std::size_t num_classes = kNumClasses;
  std::size_t image_size = kImageSize;
  std::string perceptual_layer = "fc2";

  void validate() const;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ImageClassifierConfig, conv_filters, fc_widths, num_classes, image_size,
                                                perceptual_layer)

/// Layer taps in forward order: conv1..convN (after pooling), fc1..fcM
/// (after activation).
inline std::vector<std::string> classifier_taps(const ImageClassifierConfig& cfg) {
  std::vector<std::string> taps;
  for (std::size_t i = 0; i < cfg.conv_filters.size(); ++i) taps.push_back("conv" + std::to_string(i + 1));
  for (std::size_t i = 0; i < cfg.fc_widths.size(); ++i) taps.push_back("fc" + std::to_string(i + 1));
  return taps;
}

inline void ImageClassifierConfig::validate() const {
  if (conv_filters.empty()) throw ValueError("classifier: at least one conv layer is required");
  const std::size_t shrink = std::size_t{1} << conv_filters.size();
  if (image_size % shrink != 0) {
    throw ValueError("classifier: image size " + std::to_string(image_size) + " is not divisible by " +
                     std::to_string(shrink));
  }
  const auto taps = classifier_taps(*this);
  if (std::find(taps.begin(), taps.end(), perceptual_layer) == taps.end()) {
    throw ValueError("classifier: unknown perceptual layer '" + perceptual_layer + "'");
  }
}

/// Pixels must lie in [-1, 1].
inline void check_pixel_range(const Tensor& images) {
  for (double v : images.data()) {
    if (v < -1.0 || v > 1.0) throw ValueError("image pixel " + std::to_string(v) + " outside [-1, 1]");
  }
}

/// Auxiliary image classifier: [conv 3x3 same, relu, maxpool 2] per conv
/// stage, then relu FC layers and a softmax output.
class ImageClassifier {
 public:
  explicit ImageClassifier(ImageClassifierConfig cfg = {}, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed, 0xC1A);
    std::size_t in = kImageChannels;
    for (std::size_t i = 0; i < cfg_.conv_filters.size(); ++i) {
      convs_.emplace_back(store_, "conv" + std::to_string(i + 1), in, cfg_.conv_filters[i], 3, 3, Stride{},
                          Padding::Same, true, Init::he(), rng);
      in = cfg_.conv_filters[i];
    }
    const std::size_t side = cfg_.image_size >> cfg_.conv_filters.size();
    std::size_t width = in * side * side;
    for (std::size_t i = 0; i < cfg_.fc_widths.size(); ++i) {
      fcs_.emplace_back(store_, "fc" + std::to_string(i + 1), width, cfg_.fc_widths[i], Init::he(), rng);
      width = cfg_.fc_widths[i];
    }
    out_ = Linear(store_, "out", width, cfg_.num_classes, Init::gaussian(std::sqrt(1.0 / static_cast<double>(width))), rng);
  }

  ImageClassifier(const ImageClassifier&) = delete;
  ImageClassifier& operator=(const ImageClassifier&) = delete;
  ImageClassifier(ImageClassifier&&) = default;
  ImageClassifier& operator=(ImageClassifier&&) = default;

  const ImageClassifierConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::vector<std::string> taps() const { return classifier_taps(cfg_); }

  /// Activations at `tap` for images [B, 3, H, W].
  Tensor forward_until(const Tensor& images, const std::string& tap) const {
    check_input(images);
    const std::size_t stop = tap_index(tap);
    Tensor h = images;
    for (std::size_t i = 0; i <= stop; ++i) h = stage(i, h);
    return h;
  }

  /// Class probabilities from activations at `tap`.
  Tensor forward_from(const Tensor& features, const std::string& tap) const {
    Tensor h = features;
    for (std::size_t i = tap_index(tap) + 1; i < stage_count(); ++i) h = stage(i, h);
    return softmax(out_(h));
  }

  Tensor forward(const Tensor& images) const {
    check_input(images);
    Tensor h = images;
    for (std::size_t i = 0; i < stage_count(); ++i) h = stage(i, h);
    return softmax(out_(h));
  }

  /// Perceptual features at the configured tap.
  Tensor features(const Tensor& images) const { return forward_until(images, cfg_.perceptual_layer); }

  static Tensor stack(std::span<const ImageSample> images) {
    if (images.empty()) throw ValueError("classifier: empty image batch");
    const Shape s = images.front().pixels.shape();
    std::vector<double> v;
    v.reserve(images.size() * shape_numel(s));
    for (const auto& im : images) {
      if (im.pixels.shape() != s) throw ShapeError("classifier: mixed image shapes in batch");
      v.insert(v.end(), im.pixels.data().begin(), im.pixels.data().end());
    }
    Shape out{images.size()};
    out.insert(out.end(), s.begin(), s.end());
    return Tensor::from_data(std::move(out), std::move(v));
  }

  Tensor classify(std::span<const ImageSample> images) const { return forward(stack(images)); }

  json config_json() const { return cfg_; }

 private:
  std::size_t stage_count() const { return convs_.size() + fcs_.size(); }

  std::size_t tap_index(const std::string& tap) const {
    const auto names = taps();
    const auto it = std::find(names.begin(), names.end(), tap);
    if (it == names.end()) throw ValueError("classifier: unknown layer tap '" + tap + "'");
    return static_cast<std::size_t>(it - names.begin());
  }

  Tensor stage(std::size_t i, const Tensor& h) const {
    // relu commutes with max pooling; pooling first halves the work.
    if (i < convs_.size()) return relu(maxpool2d(convs_[i](h), 2));
    const Tensor flat = h.rank() == 2 ? h : reshape(h, {h.dim(0), h.numel() / h.dim(0)});
    return relu(fcs_[i - convs_.size()](flat));
  }

  void check_input(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != kImageChannels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size) {
      throw ShapeError("classifier: expected [B,3," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
    }
    check_pixel_range(images);
  }

  ImageClassifierConfig cfg_;
  ParamStore store_;
  std::vector<Conv2d> convs_;
  std::vector<Linear> fcs_;
  Linear out_;
};

inline constexpr const char* kClassifierModel = "image_classifier";

inline Checkpoint classifier_checkpoint(const ImageClassifier& model, bool frozen,
                                        const json& run_config = json::object()) {
  Checkpoint ckpt = capture_checkpoint(kClassifierModel, run_config, model.params());
  ckpt.frozen = frozen;
  ckpt.extra["architecture"] = model.config_json();
  return ckpt;
}

inline ImageClassifier load_classifier(const Checkpoint& ckpt) {
  if (ckpt.model != kClassifierModel) {
    throw FormatError("expected an image_classifier checkpoint, found '" + ckpt.model + "'");
  }
  if (!ckpt.extra.contains("architecture")) throw FormatError("classifier checkpoint lacks its architecture record");
  ImageClassifier model(ckpt.extra.at("architecture").get<ImageClassifierConfig>());
  apply_checkpoint(ckpt, model.params());
  return model;
}

struct ClassifierTraining {
  ImageClassifier model;
  TrainResult result;
  DatasetSplit split;
  Evaluation test;
};

/// Stratified 80/20 split, cross-entropy training, best-test checkpoint.
inline ClassifierTraining train_image_classifier(std::span<const ImageSample> images, const ImageClassifierConfig& arch,
                                                 const SupervisedConfig& cfg, std::uint64_t seed,
                                                 const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (images.empty()) throw ValueError("train_image_classifier: dataset is empty");
  std::vector<int> labels;
  for (const auto& im : images) labels.push_back(im.label);
  DatasetSplit split = split_dataset(labels, 0.8, seed);
  ImageClassifier model(arch, seed);
  ProbsFn forward = [&](std::span<const std::size_t> idx, const ForwardContext&) {
    std::vector<ImageSample> batch;
    batch.reserve(idx.size());
    for (std::size_t i : idx) batch.push_back(images[i]);
    return model.classify(batch);
  };
  TrainResult result =
      train_supervised(model.params(), forward, labels, split.train, split.test, arch.num_classes, cfg, seed, on_epoch);
  Evaluation test = evaluate_classifier(forward, labels, split.test, arch.num_classes);
  return {std::move(model), std::move(result), std::move(split), std::move(test)};
}

}  // namespace eeg2img
