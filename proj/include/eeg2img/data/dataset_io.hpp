#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/checkpoint.hpp"
#include "eeg2img/core/error.hpp"
#include "eeg2img/data/eeg.hpp"

namespace eeg2img {

inline constexpr const char* kEegMagic = "EEGW";
inline constexpr const char* kImageMagic = "IMGW";
inline constexpr int kDatasetVersion = 1;

struct EegDataset {
  std::vector<EEGWindow> windows;
  std::vector<std::string> class_names = default_class_names();
};

struct ImageDataset {
  std::vector<ImageSample> images;
  std::vector<std::string> class_names = default_class_names();
};

namespace detail {

inline void append_f32le(std::vector<unsigned char>& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

inline double read_f32le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return static_cast<double>(std::bit_cast<float>(bits));
}

inline void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

struct RawDataset {
  json meta;
  std::vector<unsigned char> data;
  std::vector<unsigned char> labels;
  std::size_t count = 0;
  std::size_t num_classes = 0;
};

inline RawDataset read_raw(const fs::path& dir, const char* magic, std::size_t values_per_item) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' does not exist");
  RawDataset raw;
  raw.meta = read_json_file(dir / "meta.json");
  try {
    if (raw.meta.at("magic") != magic) {
      throw FormatError("'" + dir.string() + "': magic " + raw.meta.at("magic").dump() + ", expected \"" + magic + "\"");
    }
    if (raw.meta.at("version") != kDatasetVersion) {
      throw FormatError("'" + dir.string() + "': unsupported version " + raw.meta.at("version").dump());
    }
    raw.count = raw.meta.at("count").get<std::size_t>();
    raw.num_classes = raw.meta.at("num_classes").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError("'" + dir.string() + "': malformed meta.json: " + e.what());
  }
  raw.data = read_binary_file(dir / "data.bin");
  raw.labels = read_binary_file(dir / "labels.bin");
  const std::size_t expected = raw.count * values_per_item * 4;
  if (raw.data.size() != expected) {
    throw FormatError("'" + (dir / "data.bin").string() + "': expected " + std::to_string(expected) +
                      " bytes, found " + std::to_string(raw.data.size()));
  }
  if (raw.labels.size() != raw.count) {
    throw FormatError("'" + (dir / "labels.bin").string() + "': expected " + std::to_string(raw.count) +
                      " bytes, found " + std::to_string(raw.labels.size()));
  }
  for (std::size_t i = 0; i < raw.count; ++i) {
    if (raw.labels[i] >= raw.num_classes) {
      throw FormatError("'" + dir.string() + "': label " + std::to_string(raw.labels[i]) + " of item " +
                        std::to_string(i) + " is not below num_classes " + std::to_string(raw.num_classes));
    }
  }
  return raw;
}

inline std::vector<std::string> class_names_from(const json& meta, std::size_t num_classes) {
  std::vector<std::string> names;
  if (meta.contains("class_names")) names = meta.at("class_names").get<std::vector<std::string>>();
  if (names.size() != num_classes) {
    names.clear();
    for (std::size_t c = 0; c < num_classes; ++c) names.push_back("class" + std::to_string(c));
  }
  return names;
}

inline void check_meta_extent(const json& meta, const char* key, std::size_t expected, const fs::path& dir) {
  if (meta.value(key, expected) != expected) {
    throw FormatError("'" + dir.string() + "': meta " + key + " = " + meta.at(key).dump() + ", expected " +
                      std::to_string(expected));
  }
}

}  // namespace detail

inline void save_eeg_dataset(const fs::path& dir, const EegDataset& ds) {
  detail::ensure_dir(dir);
  std::vector<unsigned char> data, labels;
  data.reserve(ds.windows.size() * kEegChannels * kEegSamples * 4);
  for (const auto& w : ds.windows) {
    if (w.samples.shape() != Shape{kEegChannels, kEegSamples}) {
      throw ShapeError("save_eeg_dataset: window of shape " + shape_str(w.samples.shape()));
    }
    for (double v : w.samples.data()) detail::append_f32le(data, v);
    labels.push_back(static_cast<unsigned char>(w.label));
  }
  json meta{{"magic", kEegMagic},       {"version", kDatasetVersion}, {"count", ds.windows.size()},
            {"channels", kEegChannels}, {"samples", kEegSamples},     {"num_classes", ds.class_names.size()},
            {"class_names", ds.class_names}};
  detail::write_bytes(dir / "data.bin", data);
  detail::write_bytes(dir / "labels.bin", labels);
  detail::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

inline EegDataset load_eeg_dataset(const fs::path& dir) {
  const std::size_t per = kEegChannels * kEegSamples;
  auto raw = detail::read_raw(dir, kEegMagic, per);
  detail::check_meta_extent(raw.meta, "channels", kEegChannels, dir);
  detail::check_meta_extent(raw.meta, "samples", kEegSamples, dir);
  EegDataset ds;
  ds.class_names = detail::class_names_from(raw.meta, raw.num_classes);
  ds.windows.reserve(raw.count);
  for (std::size_t i = 0; i < raw.count; ++i) {
    std::vector<double> v(per);
    for (std::size_t k = 0; k < per; ++k) v[k] = detail::read_f32le(raw.data.data() + (i * per + k) * 4);
    ds.windows.push_back({Tensor::from_data({kEegChannels, kEegSamples}, std::move(v)), raw.labels[i], 0});
  }
  return ds;
}

inline void save_image_dataset(const fs::path& dir, const ImageDataset& ds) {
  detail::ensure_dir(dir);
  std::vector<unsigned char> data, labels;
  for (const auto& img : ds.images) {
    if (img.pixels.shape() != Shape{kImageChannels, kImageSize, kImageSize}) {
      throw ShapeError("save_image_dataset: image of shape " + shape_str(img.pixels.shape()));
    }
    for (double v : img.pixels.data()) detail::append_f32le(data, v);
    labels.push_back(static_cast<unsigned char>(img.label));
  }
  json meta{{"magic", kImageMagic},       {"version", kDatasetVersion}, {"count", ds.images.size()},
            {"height", kImageSize},       {"width", kImageSize},        {"channels", kImageChannels},
            {"num_classes", ds.class_names.size()}, {"class_names", ds.class_names}};
  detail::write_bytes(dir / "data.bin", data);
  detail::write_bytes(dir / "labels.bin", labels);
  detail::write_text(dir / "meta.json", meta.dump(2) + "\n");
}

inline ImageDataset load_image_dataset(const fs::path& dir) {
  const std::size_t per = kImageChannels * kImageSize * kImageSize;
  auto raw = detail::read_raw(dir, kImageMagic, per);
  detail::check_meta_extent(raw.meta, "height", kImageSize, dir);
  detail::check_meta_extent(raw.meta, "width", kImageSize, dir);
  detail::check_meta_extent(raw.meta, "channels", kImageChannels, dir);
  ImageDataset ds;
  ds.class_names = detail::class_names_from(raw.meta, raw.num_classes);
  ds.images.reserve(raw.count);
  for (std::size_t i = 0; i < raw.count; ++i) {
    std::vector<double> v(per);
    for (std::size_t k = 0; k < per; ++k) {
      v[k] = detail::read_f32le(raw.data.data() + (i * per + k) * 4);
      if (!(v[k] >= -1.0 && v[k] <= 1.0)) {
        throw FormatError("'" + dir.string() + "': pixel of image " + std::to_string(i) + " outside [-1, 1]");
      }
    }
    ds.images.push_back({Tensor::from_data({kImageChannels, kImageSize, kImageSize}, std::move(v)), raw.labels[i]});
  }
  return ds;
}

}  // namespace eeg2img
