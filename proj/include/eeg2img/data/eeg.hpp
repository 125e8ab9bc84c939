#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/tensor.hpp"

namespace eeg2img {

inline constexpr std::size_t kEegChannels = 14;
inline constexpr std::size_t kEegSamples = 32;
inline constexpr double kEegSampleRate = 128.0;
inline constexpr std::size_t kNumClasses = 10;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = 64;

inline std::vector<std::string> default_class_names() {
  return {"Apple", "Car", "Dog", "Gold", "Mobile", "Rose", "Scooter", "Tiger", "Wallet", "Watch"};
}

/// One 14x32 EEG segment (channels x time).
struct EEGWindow {
  Tensor samples;
  int label = 0;
  int subject = 0;
};

/// One 3x64x64 image, pixels in [-1, 1].
struct ImageSample {
  Tensor pixels;
  int label = 0;
};

struct WindowSpec {
  std::size_t window = kEegSamples;
  std::size_t overlap = 8;

  std::size_t stride() const { return window - overlap; }
};

/// Start offsets of every full window in a recording of `length` samples.
/// A trailing partial window is discarded.
inline std::vector<std::size_t> window_offsets(std::size_t length, WindowSpec spec = {}) {
  if (spec.window == 0 || spec.overlap >= spec.window) {
    throw ValueError("window: overlap " + std::to_string(spec.overlap) + " must be smaller than window " +
                     std::to_string(spec.window));
  }
  if (length < spec.window) {
    throw ValueError("window: recording of " + std::to_string(length) + " samples is too short for a window of " +
                     std::to_string(spec.window));
  }
  std::vector<std::size_t> offsets;
  const std::size_t count = (length - spec.window) / spec.stride() + 1;
  for (std::size_t i = 0; i < count; ++i) offsets.push_back(i * spec.stride());
  return offsets;
}

/// Cuts a [channels, T] recording into [channels, window] segments.
inline std::vector<Tensor> window_signal(const Tensor& signal, WindowSpec spec = {}) {
  if (signal.rank() != 2) throw ShapeError("window_signal: expected [channels, T], got " + shape_str(signal.shape()));
  const std::size_t channels = signal.dim(0), length = signal.dim(1);
  std::vector<Tensor> out;
  for (std::size_t start : window_offsets(length, spec)) {
    std::vector<double> v(channels * spec.window);
    for (std::size_t c = 0; c < channels; ++c) {
      for (std::size_t t = 0; t < spec.window; ++t) v[c * spec.window + t] = signal.data()[c * length + start + t];
    }
    out.push_back(Tensor::from_data({channels, spec.window}, std::move(v)));
  }
  return out;
}

/// Per-channel z-score of one window; flat channels map to zero.
inline std::vector<double> zscore_channels(std::span<const double> window, std::size_t channels) {
  const std::size_t len = window.size() / channels;
  std::vector<double> out(window.size());
  for (std::size_t c = 0; c < channels; ++c) {
    const double* p = window.data() + c * len;
    double m = 0.0;
    for (std::size_t t = 0; t < len; ++t) m += p[t];
    m /= static_cast<double>(len);
    double v = 0.0;
    for (std::size_t t = 0; t < len; ++t) v += (p[t] - m) * (p[t] - m);
    const double sd = std::sqrt(v / static_cast<double>(len));
    for (std::size_t t = 0; t < len; ++t) out[c * len + t] = sd > 1e-12 ? (p[t] - m) / sd : 0.0;
  }
  return out;
}

}  // namespace eeg2img
