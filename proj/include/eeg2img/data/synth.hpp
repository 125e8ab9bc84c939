#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/rng.hpp"
#include "eeg2img/data/eeg.hpp"

namespace eeg2img {

/// Desk-scale stand-in for the recorded EEG: two class-specific tones per
/// channel plus white noise.
struct SynthEegOptions {
  double amplitude = 10.0;    // microvolts, first tone
  double second_gain = 0.5;   // relative amplitude of the 1.5 f tone
  double noise_ratio = 0.5;   // noise sigma as a fraction of the clean signal RMS
};

inline double synth_eeg_frequency(int class_id) { return 4.0 + 2.0 * class_id; }

inline double round_to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// `n` windows of class `class_id`. Values are rounded to float precision
/// so that a save/load round trip through the 32-bit on-disk format is exact.
inline std::vector<EEGWindow> synth_eeg(int class_id, std::size_t n, std::uint64_t seed, SynthEegOptions opt = {}) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= kNumClasses) {
    throw ValueError("synth_eeg: class id " + std::to_string(class_id) + " outside [0, 10)");
  }
  const double f1 = synth_eeg_frequency(class_id);
  const double f2 = 1.5 * f1;
  const double a2 = opt.amplitude * opt.second_gain;
  const double rms = std::sqrt(0.5 * opt.amplitude * opt.amplitude + 0.5 * a2 * a2);
  const double sigma = opt.noise_ratio * rms;

  // Spatial pattern: fixed per class, independent of the sampling seed.
  std::array<double, kEegChannels> phase1{}, phase2{};
  Rng pattern = Rng(0x5EED'EE60ULL).split(static_cast<std::uint64_t>(class_id));
  for (std::size_t ch = 0; ch < kEegChannels; ++ch) {
    phase1[ch] = pattern.uniform(0.0, 2.0 * std::numbers::pi);
    phase2[ch] = pattern.uniform(0.0, 2.0 * std::numbers::pi);
  }

  Rng rng = Rng(seed, 0xEE6).split(static_cast<std::uint64_t>(class_id));
  std::vector<EEGWindow> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t0 = rng.uniform();  // seconds into the recording
    std::vector<double> v(kEegChannels * kEegSamples);
    for (std::size_t ch = 0; ch < kEegChannels; ++ch) {
      for (std::size_t s = 0; s < kEegSamples; ++s) {
        const double t = t0 + static_cast<double>(s) / kEegSampleRate;
        double x = opt.amplitude * std::sin(2.0 * std::numbers::pi * f1 * t + phase1[ch]) +
                   a2 * std::sin(2.0 * std::numbers::pi * f2 * t + phase2[ch]);
        if (sigma > 0.0) x += rng.normal(0.0, sigma);
        v[ch * kEegSamples + s] = round_to_f32(x);
      }
    }
    out.push_back({Tensor::from_data({kEegChannels, kEegSamples}, std::move(v)), class_id,
                   static_cast<int>(i % 23)});
  }
  return out;
}

enum class Glyph { Circle, Square, Triangle, Cross, Ring };

struct ClassStyle {
  Glyph glyph;
  std::array<double, 3> rgb;  // in [0, 1]
};

/// Fixed class table: five glyphs in a warm and a cool hue.
inline ClassStyle class_style(int class_id) {
  static constexpr std::array<double, 3> warm{0.95, 0.40, 0.10};
  static constexpr std::array<double, 3> cool{0.10, 0.50, 0.95};
  return {static_cast<Glyph>(class_id % 5), class_id < 5 ? warm : cool};
}

inline bool glyph_covers(Glyph g, double dx, double dy, double r) {
  const double d = std::sqrt(dx * dx + dy * dy);
  switch (g) {
    case Glyph::Circle: return d < r;
    case Glyph::Square: return std::abs(dx) < 0.85 * r && std::abs(dy) < 0.85 * r;
    case Glyph::Triangle: {
      const double top = -r, bottom = 0.8 * r;
      if (dy < top || dy > bottom) return false;
      return std::abs(dx) < (dy - top) / (bottom - top) * r;
    }
    case Glyph::Cross:
      return (std::abs(dx) < 0.3 * r && std::abs(dy) < r) || (std::abs(dy) < 0.3 * r && std::abs(dx) < r);
    case Glyph::Ring: return d > 0.55 * r && d < r;
  }
  return false;
}

/// Procedural 64x64 renders standing in for the stimulus photographs.
inline std::vector<ImageSample> synth_images(int class_id, std::size_t n, std::uint64_t seed) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= kNumClasses) {
    throw ValueError("synth_images: class id " + std::to_string(class_id) + " outside [0, 10)");
  }
  const ClassStyle style = class_style(class_id);
  Rng rng = Rng(seed, 0x1A6E).split(static_cast<std::uint64_t>(class_id));
  std::vector<ImageSample> out;
  out.reserve(n);
  constexpr std::size_t S = kImageSize;
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = rng.uniform(22.0, 42.0), cy = rng.uniform(22.0, 42.0);
    const double r = rng.uniform(12.0, 19.0);
    const double bg = rng.uniform(-0.9, -0.3);
    const double gain = rng.uniform(0.8, 1.0);
    std::vector<double> v(kImageChannels * S * S);
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        const bool on = glyph_covers(style.glyph, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r);
        const double noise = rng.normal(0.0, 0.03);
        for (std::size_t c = 0; c < kImageChannels; ++c) {
          const double px = on ? 2.0 * gain * style.rgb[c] - 1.0 : bg;
          v[(c * S + y) * S + x] = round_to_f32(std::clamp(px + noise, -1.0, 1.0));
        }
      }
    }
    out.push_back({Tensor::from_data({kImageChannels, S, S}, std::move(v)), class_id});
  }
  return out;
}

}  // namespace eeg2img
