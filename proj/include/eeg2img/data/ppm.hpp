#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/tensor.hpp"

namespace eeg2img {

/// Writes up to rows*cols [3,H,W] images in [-1, 1] as one binary PPM (P6).
/// Missing tiles are black.
inline void write_ppm_grid(const std::filesystem::path& path, std::span<const Tensor> images, std::size_t rows = 8,
                           std::size_t cols = 8) {
  if (images.empty()) throw ValueError("write_ppm_grid: no images");
  const std::size_t h = images.front().dim(1), w = images.front().dim(2);
  const std::size_t width = cols * w, height = rows * h;
  std::vector<unsigned char> rgb(width * height * 3, 0);
  for (std::size_t k = 0; k < std::min(images.size(), rows * cols); ++k) {
    const Tensor& img = images[k];
    if (img.shape() != Shape{3, h, w}) throw ShapeError("write_ppm_grid: tile of shape " + shape_str(img.shape()));
    const std::size_t ty = k / cols, tx = k % cols;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = std::clamp(img.data()[(c * h + y) * w + x], -1.0, 1.0);
          rgb[((ty * h + y) * width + tx * w + x) * 3 + c] = static_cast<unsigned char>(std::lround((v + 1.0) * 127.5));
        }
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "P6\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace eeg2img
