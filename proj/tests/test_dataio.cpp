#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "eeg2img/data/dataset_io.hpp"
#include "eeg2img/data/eeg.hpp"
#include "eeg2img/data/ppm.hpp"
#include "eeg2img/data/split.hpp"
#include "eeg2img/data/synth.hpp"

namespace eeg2img {
namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("eeg2img_dataio_" + name);
  fs::remove_all(dir);
  return dir;
}

// Slides a window one sample at a time and keeps the starts that land on the
// stride grid with the whole window in bounds.
std::vector<std::size_t> brute_force_offsets(std::size_t length, std::size_t window, std::size_t overlap) {
  std::vector<std::size_t> out;
  for (std::size_t start = 0; start < length; ++start) {
    if (start % (window - overlap) == 0 && start + window <= length) out.push_back(start);
  }
  return out;
}

TEST(Windowing, KnownCounts) {
  EXPECT_EQ(window_offsets(32).size(), 1u);
  EXPECT_EQ(window_offsets(96), (std::vector<std::size_t>{0, 24, 48}));
  EXPECT_EQ(window_offsets(1280).size(), 53u);
}

TEST(Windowing, MatchesBruteForceSlider) {
  for (std::size_t t = 32; t <= 2000; ++t) {
    ASSERT_EQ(window_offsets(t), brute_force_offsets(t, 32, 8)) << "T=" << t;
  }
}

TEST(Windowing, TooShortAndBadOverlap) {
  EXPECT_THROW(window_offsets(31), ValueError);
  EXPECT_THROW(window_offsets(100, {32, 32}), ValueError);
}

TEST(Windowing, CutsChannelsAtOffsets) {
  std::vector<double> v(2 * 80);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  auto windows = window_signal(Tensor::from_data({2, 80}, v));
  ASSERT_EQ(windows.size(), 3u);
  EXPECT_EQ(windows[1].shape(), (Shape{2, 32}));
  EXPECT_EQ(windows[1].data()[0], 24.0);
  EXPECT_EQ(windows[2].data()[32], 80.0 + 48.0);
}

TEST(EegDatasetIo, RoundTripIsBitIdentical) {
  EegDataset ds;
  for (int c = 0; c < 10; ++c) {
    auto w = synth_eeg(c, 10, 3);
    ds.windows.insert(ds.windows.end(), w.begin(), w.end());
  }
  const auto dir = scratch_dir("roundtrip");
  save_eeg_dataset(dir, ds);
  const auto back = load_eeg_dataset(dir);
  ASSERT_EQ(back.windows.size(), 100u);
  EXPECT_EQ(back.class_names, ds.class_names);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(back.windows[i].samples.to_vector(), ds.windows[i].samples.to_vector());
    EXPECT_EQ(back.windows[i].label, ds.windows[i].label);
  }
}

TEST(EegDatasetIo, TruncatedPayloadNamesByteCounts) {
  EegDataset ds;
  ds.windows = synth_eeg(1, 3, 0);
  const auto dir = scratch_dir("truncated");
  save_eeg_dataset(dir, ds);
  fs::resize_file(dir / "data.bin", 100);
  try {
    load_eeg_dataset(dir);
    FAIL();
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(3 * 14 * 32 * 4)), std::string::npos) << msg;
    EXPECT_NE(msg.find("100"), std::string::npos) << msg;
  }
}

TEST(EegDatasetIo, EmptyDatasetIsValid) {
  const auto dir = scratch_dir("empty");
  save_eeg_dataset(dir, EegDataset{});
  EXPECT_TRUE(load_eeg_dataset(dir).windows.empty());
}

TEST(EegDatasetIo, CorruptedFixtures) {
  EegDataset ds;
  ds.windows = synth_eeg(2, 4, 0);
  auto rewrite_meta = [](const fs::path& dir, const char* key, json value) {
    auto meta = read_json_file(dir / "meta.json");
    meta[key] = std::move(value);
    std::ofstream(dir / "meta.json") << meta.dump();
  };
  {
    const auto dir = scratch_dir("magic");
    save_eeg_dataset(dir, ds);
    rewrite_meta(dir, "magic", "IMGW");
    EXPECT_THROW(load_eeg_dataset(dir), FormatError);
  }
  {
    const auto dir = scratch_dir("version");
    save_eeg_dataset(dir, ds);
    rewrite_meta(dir, "version", 2);
    EXPECT_THROW(load_eeg_dataset(dir), FormatError);
  }
  {
    const auto dir = scratch_dir("label");
    save_eeg_dataset(dir, ds);
    std::ofstream(dir / "labels.bin", std::ios::binary) << std::string("\x01\x02\x0A\x00", 4);
    EXPECT_THROW(load_eeg_dataset(dir), FormatError);
  }
  {
    const auto dir = scratch_dir("labels_len");
    save_eeg_dataset(dir, ds);
    fs::resize_file(dir / "labels.bin", 2);
    EXPECT_THROW(load_eeg_dataset(dir), FormatError);
  }
  {
    const auto dir = scratch_dir("channels");
    save_eeg_dataset(dir, ds);
    rewrite_meta(dir, "channels", 16);
    EXPECT_THROW(load_eeg_dataset(dir), FormatError);
  }
  {
    const auto dir = scratch_dir("json");
    save_eeg_dataset(dir, ds);
    std::ofstream(dir / "meta.json") << "{not json";
    EXPECT_THROW(load_eeg_dataset(dir), FormatError);
  }
  EXPECT_THROW(load_eeg_dataset(scratch_dir("missing")), IoError);
}

TEST(ImageDatasetIo, RoundTripAndRangeCheck) {
  ImageDataset ds;
  ds.images = synth_images(4, 5, 1);
  const auto dir = scratch_dir("images");
  save_image_dataset(dir, ds);
  auto back = load_image_dataset(dir);
  ASSERT_EQ(back.images.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(back.images[i].pixels.to_vector(), ds.images[i].pixels.to_vector());
  EXPECT_THROW(load_eeg_dataset(dir), FormatError);  // wrong magic
}

TEST(SynthEeg, DeterministicInSeed) {
  auto a = synth_eeg(3, 5, 11), b = synth_eeg(3, 5, 11), c = synth_eeg(3, 5, 12);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a[i].samples.to_vector(), b[i].samples.to_vector());
    EXPECT_EQ(a[i].label, 3);
  }
  EXPECT_NE(a[0].samples.to_vector(), c[0].samples.to_vector());
}

TEST(SynthEeg, NoiselessPeakBinMatchesClassFrequency) {
  // Classes whose base tone falls on an exact DFT bin of a 32-sample window.
  for (int cls : {0, 2, 4, 6, 8}) {
    auto w = synth_eeg(cls, 3, 5, {10.0, 0.5, 0.0});
    for (const auto& win : w) {
      std::size_t best = 0;
      double best_mag = -1.0;
      for (std::size_t k = 0; k <= 16; ++k) {
        std::complex<double> acc{};
        for (std::size_t n = 0; n < 32; ++n) {
          acc += win.samples.data()[n] * std::polar(1.0, -2.0 * std::numbers::pi * double(k * n) / 32.0);
        }
        if (std::abs(acc) > best_mag) {
          best_mag = std::abs(acc);
          best = k;
        }
      }
      EXPECT_EQ(best, static_cast<std::size_t>(std::lround(32.0 * synth_eeg_frequency(cls) / 128.0))) << "class " << cls;
    }
  }
}

TEST(SynthEeg, NearestNeighbourSeparatesExtremeClasses) {
  auto a = synth_eeg(0, 100, 21), b = synth_eeg(9, 100, 21);
  std::vector<EEGWindow> all(a);
  all.insert(all.end(), b.begin(), b.end());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::vector<std::pair<double, int>> dist;
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (i == j) continue;
      double d = 0.0;
      for (std::size_t k = 0; k < all[i].samples.numel(); ++k) {
        d += std::pow(all[i].samples.data()[k] - all[j].samples.data()[k], 2);
      }
      dist.emplace_back(d, all[j].label);
    }
    std::partial_sort(dist.begin(), dist.begin() + 10, dist.end());
    int votes9 = 0;
    for (int k = 0; k < 10; ++k) votes9 += dist[k].second == 9;
    const int pred = votes9 > 5 ? 9 : 0;
    correct += pred == all[i].label;
  }
  EXPECT_GE(static_cast<double>(correct) / 200.0, 0.95);
}

TEST(SynthImages, DeterministicAndInRange) {
  auto a = synth_images(7, 4, 2), b = synth_images(7, 4, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].pixels.to_vector(), b[i].pixels.to_vector());
    EXPECT_EQ(a[i].pixels.shape(), (Shape{3, 64, 64}));
    for (double v : a[i].pixels.data()) {
      ASSERT_GE(v, -1.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(SynthImages, InterClassDistanceExceedsIntraClass) {
  std::vector<std::vector<ImageSample>> per(10);
  for (int c = 0; c < 10; ++c) per[c] = synth_images(c, 50, 8);
  auto dist = [](const ImageSample& x, const ImageSample& y) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.pixels.numel(); ++k) s += std::pow(x.pixels.data()[k] - y.pixels.data()[k], 2);
    return std::sqrt(s);
  };
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (int c = 0; c < 10; ++c) {
    for (int d = c; d < 10; ++d) {
      for (std::size_t i = 0; i < 50; ++i) {
        for (std::size_t j = (c == d ? i + 1 : 0); j < 50; ++j) {
          const double v = dist(per[c][i], per[d][j]);
          (c == d ? intra : inter) += v;
          ++(c == d ? n_intra : n_inter);
        }
      }
    }
  }
  EXPECT_GT(inter / n_inter, intra / n_intra);
}

TEST(Split, StratifiedEightyTwenty) {
  std::vector<int> labels;
  for (int c = 0; c < 10; ++c) labels.insert(labels.end(), 100, c);
  auto s = split_dataset(labels, 0.8, 1);
  std::vector<int> train_count(10, 0), test_count(10, 0);
  for (auto i : s.train) ++train_count[labels[i]];
  for (auto i : s.test) ++test_count[labels[i]];
  for (int c = 0; c < 10; ++c) {
    EXPECT_EQ(train_count[c], 80);
    EXPECT_EQ(test_count[c], 20);
  }
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  for (auto i : s.test) EXPECT_TRUE(all.insert(i).second) << "index in both splits";
  EXPECT_EQ(all.size(), labels.size());
}

TEST(Split, SeedControlsAssignment) {
  std::vector<int> labels;
  for (int c = 0; c < 2; ++c) labels.insert(labels.end(), 60, c);
  EXPECT_EQ(split_dataset(labels, 0.8, 4).train, split_dataset(labels, 0.8, 4).train);
  EXPECT_NE(split_dataset(labels, 0.8, 4).train, split_dataset(labels, 0.8, 5).train);
}

TEST(Split, RoundsPerClassAndRejectsTinyClasses) {
  std::vector<int> labels{0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  auto s = split_dataset(labels, 0.8, 0);
  EXPECT_EQ(s.train.size(), 6u + 4u);  // round(5.6) + round(4.0)
  std::vector<int> tiny{0, 0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_THROW(split_dataset(tiny, 0.8, 0), ValueError);
}

TEST(PpmGrid, WritesValidP6) {
  std::vector<Tensor> tiles;
  for (const auto& s : synth_images(0, 3, 0)) tiles.push_back(s.pixels);
  const auto path = fs::temp_directory_path() / "eeg2img_grid.ppm";
  write_ppm_grid(path, tiles);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  EXPECT_EQ(magic, "P6");
  EXPECT_EQ(w, 512u);
  EXPECT_EQ(h, 512u);
  EXPECT_EQ(maxv, 255u);
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(rest.size(), 512u * 512u * 3u);
}

}  // namespace
}  // namespace eeg2img
