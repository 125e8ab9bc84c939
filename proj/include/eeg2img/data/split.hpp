#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/rng.hpp"

namespace eeg2img {

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

/// Stratified split: each class contributes round(train_fraction * count)
/// items to train and the rest to test. Both index lists are ascending.
inline DatasetSplit split_dataset(std::span<const int> labels, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValueError("split: train fraction must be in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  DatasetSplit split;
  split.seed = seed;
  Rng base(seed, 0x5B1);
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 5) {
      throw ValueError("split: class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                       " items; stratification needs at least 5");
    }
    Rng rng = base.split(static_cast<std::uint64_t>(label));
    rng.shuffle(std::span<std::size_t>(idx));
    const auto n_train = static_cast<std::size_t>(std::lround(train_fraction * static_cast<double>(idx.size())));
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.insert(split.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

template <class T>
std::vector<T> gather(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items.at(i));
  return out;
}

}  // namespace eeg2img
