#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/layers.hpp"

namespace eeg2img {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "eeg2img-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  bool buffer = false;
  std::vector<double> data;
};

/// In-memory image of a checkpoint directory (manifest.json + params.bin).
struct Checkpoint {
  std::string model;
  json config = json::object();
  bool frozen = false;
  json extra = json::object();
  std::vector<CheckpointTensor> tensors;
  std::string content_hash;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
};

namespace detail {

inline void append_f64le(std::vector<unsigned char>& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

inline double read_f64le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hash_string(const std::vector<unsigned char>& bytes) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fnv1a64:%016llx", static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
  return buf;
}

inline std::vector<unsigned char> serialize(const std::vector<CheckpointTensor>& tensors) {
  std::vector<unsigned char> bytes;
  for (const auto& t : tensors) {
    for (double v : t.data) append_f64le(bytes, v);
  }
  return bytes;
}

}  // namespace detail

/// Hash over the little-endian payload of every parameter and buffer, in
/// registration order. Equal to the content_hash of a checkpoint of `store`.
inline std::string content_hash(const ParamStore& store) {
  std::vector<unsigned char> bytes;
  for (const auto& t : store.all()) {
    for (double v : t.tensor.data()) detail::append_f64le(bytes, v);
  }
  return detail::hash_string(bytes);
}

inline Checkpoint capture_checkpoint(const std::string& model, const json& config, const ParamStore& store) {
  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.config = config;
  for (const auto& p : store.parameters()) ckpt.tensors.push_back({p.name, p.tensor.shape(), false, p.tensor.to_vector()});
  for (const auto& b : store.buffers()) ckpt.tensors.push_back({b.name, b.tensor.shape(), true, b.tensor.to_vector()});
  ckpt.content_hash = detail::hash_string(detail::serialize(ckpt.tensors));
  return ckpt;
}

/// Copies checkpoint values into `store`; names, order and shapes must match.
inline void apply_checkpoint(const Checkpoint& ckpt, ParamStore& store) {
  auto targets = store.all();
  if (targets.size() != ckpt.tensors.size()) {
    throw FormatError("checkpoint '" + ckpt.model + "' holds " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& src = ckpt.tensors[i];
    if (src.name != targets[i].name || src.shape != targets[i].tensor.shape()) {
      throw FormatError("checkpoint tensor '" + src.name + "' " + shape_str(src.shape) + " does not match model tensor '" +
                        targets[i].name + "' " + shape_str(targets[i].tensor.shape()));
    }
    auto dst = targets[i].tensor.mutable_data();
    std::copy(src.data.begin(), src.data.end(), dst.begin());
  }
}

inline void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory '" + dir.string() + "': " + ec.message());

  const auto bytes = detail::serialize(ckpt.tensors);
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["model"] = ckpt.model;
  manifest["dtype"] = "f64le";
  manifest["frozen"] = ckpt.frozen;
  manifest["config"] = ckpt.config;
  manifest["extra"] = ckpt.extra;
  json entries = json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    const std::size_t nbytes = t.data.size() * 8;
    entries.push_back({{"name", t.name}, {"shape", t.shape}, {"kind", t.buffer ? "buffer" : "param"},
                       {"offset", offset}, {"bytes", nbytes}});
    offset += nbytes;
  }
  manifest["tensors"] = entries;
  manifest["content_hash"] = detail::hash_string(bytes);

  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write '" + (dir / "params.bin").string() + "'");
  bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw IoError("short write to '" + (dir / "params.bin").string() + "'");
  std::ofstream man(dir / "manifest.json", std::ios::trunc);
  if (!man) throw IoError("cannot write '" + (dir / "manifest.json").string() + "'");
  man << manifest.dump(2) << '\n';
  if (!man) throw IoError("short write to '" + (dir / "manifest.json").string() + "'");
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

inline std::vector<unsigned char> read_binary_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("checkpoint directory '" + dir.string() + "' does not exist");
  const json manifest = read_json_file(dir / "manifest.json");
  const auto bytes = read_binary_file(dir / "params.bin");
  Checkpoint ckpt;
  try {
    if (manifest.at("format") != kCheckpointFormat || manifest.at("version") != kCheckpointVersion) {
      throw FormatError("'" + dir.string() + "' is not a version-1 eeg2img checkpoint");
    }
    if (manifest.at("dtype") != "f64le") throw FormatError("unsupported checkpoint dtype in '" + dir.string() + "'");
    ckpt.model = manifest.at("model").get<std::string>();
    ckpt.config = manifest.at("config");
    ckpt.frozen = manifest.at("frozen").get<bool>();
    ckpt.extra = manifest.value("extra", json::object());
    for (const auto& e : manifest.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      t.buffer = e.at("kind") == "buffer";
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("bytes").get<std::size_t>();
      if (nbytes != shape_numel(t.shape) * 8 || offset + nbytes > bytes.size()) {
        throw FormatError("tensor '" + t.name + "' exceeds params.bin (" + std::to_string(bytes.size()) + " bytes)");
      }
      t.data.resize(nbytes / 8);
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = detail::read_f64le(bytes.data() + offset + 8 * i);
      ckpt.tensors.push_back(std::move(t));
    }
    ckpt.content_hash = manifest.at("content_hash").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError("malformed checkpoint manifest in '" + dir.string() + "': " + e.what());
  }
  if (detail::hash_string(bytes) != ckpt.content_hash) {
    throw FormatError("content hash mismatch in '" + dir.string() + "'");
  }
  return ckpt;
}

}  // namespace eeg2img
