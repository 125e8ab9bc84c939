#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "eeg2img/data/synth.hpp"
#include "eeg2img/models/cformer.hpp"
#include "support/gradcheck.hpp"

namespace eeg2img {
namespace {

using testing::param;
using testing::random_tensor;

CFormerConfig tiny_config() {
  CFormerConfig cfg;
  cfg.channels = 3;
  cfg.samples = 8;
  cfg.temporal_kernel = 3;
  cfg.k = 4;
  cfg.heads = 2;
  cfg.ff_dim = 8;
  return cfg;
}

std::vector<EEGWindow> corpus(std::size_t per_class, std::uint64_t seed) {
  std::vector<EEGWindow> out;
  for (int c = 0; c < 10; ++c) {
    auto w = synth_eeg(c, per_class, seed);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

TEST(CFormer, DefaultShapes) {
  CFormer model;
  Rng rng(1);
  const Tensor x = random_tensor({3, 1, 14, 32}, rng, false);
  const auto out = model.forward(x, {});
  EXPECT_EQ(out.tokens.shape(), (Shape{3, 28, 40}));
  EXPECT_EQ(out.attention.at(0).shape(), (Shape{3 * 8, 28, 28}));
  EXPECT_EQ(out.embedding.shape(), (Shape{3, 100}));
  EXPECT_EQ(out.probs.shape(), (Shape{3, 10}));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 10; ++c) s += out.probs.data()[r * 10 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(CFormer, ConfigValidation) {
  CFormerConfig cfg;
  cfg.k = 42;
  EXPECT_THROW(CFormer{cfg}, ValueError);
  cfg = {};
  cfg.embed_dim = 64;
  EXPECT_THROW(CFormer{cfg}, ValueError);
  cfg = {};
  cfg.dropout = 1.0;
  EXPECT_THROW(CFormer{cfg}, ValueError);
}

TEST(CFormer, RejectsWrongInputShape) {
  CFormer model;
  EXPECT_THROW(model.conv_module(Tensor::zeros({2, 1, 13, 32}), {}), ShapeError);
  EXPECT_THROW(model.conv_module(Tensor::zeros({2, 14, 32}), {}), ShapeError);
  std::vector<EEGWindow> bad{{Tensor::zeros({14, 30}), 0, 0}};
  EXPECT_THROW(model.make_input(bad), ShapeError);
}

TEST(CFormer, ZeroInputGivesIdenticalTokens) {
  CFormer model;
  const Tensor tokens = model.conv_module(Tensor::zeros({1, 1, 14, 32}), {});
  const auto v = tokens.data();
  for (std::size_t t = 1; t < 28; ++t) {
    for (std::size_t f = 0; f < 40; ++f) EXPECT_EQ(v[t * 40 + f], v[f]);
  }
}

// Two-stage direct convolution, then the eval-mode batch norm of a fresh
// layer (mean 0, variance 1) and relu.
TEST(CFormer, ConvModuleMatchesDirectConvolution) {
  for (const auto& [channels, samples, kernel] : {std::tuple{14u, 32u, 5u}, {3u, 9u, 2u}, {6u, 12u, 4u}}) {
    CFormerConfig cfg;
    cfg.channels = channels;
    cfg.samples = samples;
    cfg.temporal_kernel = kernel;
    cfg.k = 8;
    cfg.heads = 2;
    CFormer model(cfg, 5);
    Rng rng(channels);
    const Tensor x = random_tensor({2, 1, channels, samples}, rng, false);
    const Tensor tokens = model.conv_module(x, {});
    const std::size_t T = samples - kernel + 1;
    ASSERT_EQ(tokens.shape(), (Shape{2, T, 8}));

    const auto wt = param(model.params(), "conv.temporal.weight").data();
    const auto ws = param(model.params(), "conv.spatial.weight").data();
    const double bn = 1.0 / std::sqrt(1.0 + 1e-5);
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t s = 0; s < T; ++s) {
        for (std::size_t o = 0; o < 8; ++o) {
          double u = 0.0;
          for (std::size_t c = 0; c < 8; ++c) {
            for (std::size_t ch = 0; ch < channels; ++ch) {
              double t = 0.0;
              for (std::size_t j = 0; j < kernel; ++j) {
                t += wt[c * kernel + j] * x.data()[(b * channels + ch) * samples + s + j];
              }
              u += ws[(o * 8 + c) * channels + ch] * t;
            }
          }
          EXPECT_NEAR(tokens.data()[(b * T + s) * 8 + o], std::max(0.0, u * bn), 1e-12);
        }
      }
    }
  }
}

TEST(Attention, RowsAreDistributions) {
  CFormer model;
  Rng rng(2);
  const auto out = model.forward(random_tensor({2, 1, 14, 32}, rng, false), {});
  const Tensor& a = out.attention.at(0);
  const std::size_t rows = a.numel() / 28;
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 28; ++c) {
      const double w = a.data()[r * 28 + c];
      EXPECT_GE(w, 0.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Attention, SingleTokenAttendsToItself) {
  CFormerConfig cfg;
  cfg.samples = 5;  // one token after the width-5 temporal conv
  CFormer model(cfg, 3);
  Rng rng(4);
  const Tensor x = random_tensor({2, 1, 40}, rng, false);
  Tensor weights;
  const Tensor y = model.block(0).attention(x, {}, &weights);
  for (double w : weights.data()) EXPECT_EQ(w, 1.0);

  // With one token the attention output is the value projection itself.
  const auto& p = model.params();
  const Tensor flat = reshape(x, {2, 40});
  const Tensor v = add_trailing(matmul(flat, param(p, "block0.value.weight")), param(p, "block0.value.bias"));
  const Tensor o = add_trailing(matmul(v, param(p, "block0.out.weight")), param(p, "block0.out.bias"));
  const Tensor ref = layernorm(add(flat, o), param(p, "block0.ln1.gamma"), param(p, "block0.ln1.beta"));
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(y.data()[i], ref.data()[i], 1e-12);
}

TEST(Attention, PermutationEquivariant) {
  CFormer model(CFormerConfig{}, 8);
  Rng rng(9);
  const std::size_t T = 28, k = 40;
  const Tensor x = random_tensor({2, T, k}, rng, false);
  std::vector<std::size_t> perm(T);
  for (std::size_t i = 0; i < T; ++i) perm[i] = i;
  rng.shuffle(std::span<std::size_t>(perm));
  auto permute_tokens = [&](const Tensor& t) {
    std::vector<double> v(t.numel());
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t f = 0; f < k; ++f) v[(b * T + i) * k + f] = t.data()[(b * T + perm[i]) * k + f];
    return Tensor::from_data(t.shape(), std::move(v));
  };
  const Tensor lhs = model.block(0).attention(permute_tokens(x), {});
  const Tensor rhs = permute_tokens(model.block(0).attention(x, {}));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs.data()[i], rhs.data()[i], 1e-12);
}

TEST(Attention, HeadSplitMergeIsLossless) {
  Rng rng(10);
  const Tensor x = random_tensor({3, 5, 40}, rng, false);
  const Tensor s = split_heads(x, 8);
  ASSERT_EQ(s.shape(), (Shape{24, 5, 5}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t h = 0; h < 8; ++h)
      for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t d = 0; d < 5; ++d) {
          EXPECT_EQ(s.data()[((b * 8 + h) * 5 + t) * 5 + d], x.data()[(b * 5 + t) * 40 + h * 5 + d]);
        }
  EXPECT_EQ(merge_heads(s, 8).to_vector(), x.to_vector());
  EXPECT_THROW(split_heads(x, 7), ValueError);
}

TEST(CFormer, PositionalEncodingFlag) {
  CFormerConfig cfg;
  cfg.positional_encoding = true;
  CFormer with_pe(cfg, 1);
  CFormer without_pe(CFormerConfig{}, 1);
  const Tensor zero = Tensor::zeros({1, 1, 14, 32});
  const auto a = with_pe.conv_module(zero, {}).to_vector();
  const auto b = without_pe.conv_module(zero, {}).to_vector();
  EXPECT_NE(a, b);
  const Tensor pe = sinusoidal_positions(28, 40);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i] - b[i], pe.data()[i], 1e-12);
}

TEST(CFormer, GradientsMatchFiniteDifferences) {
  CFormer model(tiny_config(), 21);
  Rng rng(22);
  const Tensor x = random_tensor({4, 1, 3, 8}, rng, false);
  const std::vector<int> labels{0, 3, 7, 3};
  auto loss = [&] { return cross_entropy(model.forward(x, {Mode::Train, nullptr}).probs, labels); };
  std::size_t checked = 0, skipped = 0;
  for (const auto& c : testing::check_params(model.params(), loss)) {
    EXPECT_TRUE(c.ok()) << c.name << " rel=" << c.rel_error << " abs=" << c.abs_error;
    checked += c.checked;
    skipped += c.nonsmooth;
  }
  EXPECT_GT(checked, 200u);
  EXPECT_LE(skipped * 20, checked + skipped);
}

TEST(CFormer, UntrainedModelDoesNotCollapse) {
  CFormer model;
  Rng rng(32);
  std::vector<std::size_t> counts(10, 0);
  for (int batch = 0; batch < 10; ++batch) {
    const Tensor probs = model.forward(random_tensor({100, 1, 14, 32}, rng, false), {}).probs;
    for (std::size_t r = 0; r < 100; ++r) ++counts[argmax_row(probs.data().subspan(r * 10, 10))];
  }
  EXPECT_LT(*std::max_element(counts.begin(), counts.end()), 500u);
}

TEST(CFormer, EmbedIsPenultimateActivationAndDeterministic) {
  CFormer model(CFormerConfig{}, 41);
  const auto windows = synth_eeg(3, 6, 42);
  EXPECT_THROW(model.embed(windows), StateError);
  const Tensor e1 = model.embed(windows, true);
  const Tensor e2 = model.embed(windows, true);
  EXPECT_EQ(e1.shape(), (Shape{6, 100}));
  EXPECT_EQ(e1.to_vector(), e2.to_vector());
  EXPECT_EQ(e1.to_vector(), model.forward(model.make_input(windows), {}).embedding.to_vector());
  for (double v : e1.data()) EXPECT_GE(v, 0.0);
}

TEST(CFormer, CheckpointRoundTripReproducesOutputs) {
  CFormer model(tiny_config(), 51);
  Rng rng(52);
  // Move the running statistics away from their initial values first.
  model.forward(random_tensor({5, 1, 3, 8}, rng, false, 3.0), {Mode::Train, nullptr});
  model.set_trained(true);
  const auto dir = std::filesystem::temp_directory_path() / "eeg2img_cformer_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, encoder_checkpoint(model, json{{"note", "x"}}));
  const Checkpoint loaded_ckpt = load_checkpoint(dir);
  EXPECT_EQ(loaded_ckpt.config, (json{{"note", "x"}}));
  CFormer loaded = load_encoder(loaded_ckpt);
  EXPECT_TRUE(loaded.trained());
  EXPECT_EQ(content_hash(loaded.params()), content_hash(model.params()));
  const Tensor x = random_tensor({3, 1, 3, 8}, rng, false);
  EXPECT_EQ(loaded.forward(x, {}).probs.to_vector(), model.forward(x, {}).probs.to_vector());
  std::filesystem::remove_all(dir);
}

TEST(EncoderTraining, LearnsSyntheticClasses) {
  const auto data = corpus(100, 61);
  SupervisedConfig cfg;
  cfg.epochs = 3;
  auto run = train_encoder(data, CFormerConfig{}, cfg, 62);
  ASSERT_EQ(run.result.log.size(), 4u);
  EXPECT_LT(run.result.log[1].test_loss, run.result.log[0].test_loss);
  EXPECT_LT(run.result.log[1].train_loss, run.result.log[0].train_loss);
  EXPECT_GE(run.test.accuracy, 0.9);
  EXPECT_EQ(run.test.accuracy, run.result.best_test_accuracy);

  // Confusion rows add up to the per-class test counts.
  std::vector<std::size_t> per_class(10, 0);
  for (std::size_t i : run.split.test) ++per_class[static_cast<std::size_t>(data[i].label)];
  for (std::size_t c = 0; c < 10; ++c) {
    std::size_t row = 0;
    for (std::size_t v : run.test.confusion[c]) row += v;
    EXPECT_EQ(row, per_class[c]);
  }

  // Embeddings of fresh windows cluster by class.
  const auto fresh = corpus(100, 63);
  const Tensor e = run.model.embed(fresh);
  std::vector<double> norm(fresh.size());
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    double s = 0.0;
    for (std::size_t f = 0; f < 100; ++f) s += e.data()[i * 100 + f] * e.data()[i * 100 + f];
    norm[i] = std::sqrt(s) + 1e-300;
  }
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t i = 0; i < fresh.size(); i += 3) {
    for (std::size_t j = i + 1; j < fresh.size(); j += 7) {
      double dot = 0.0;
      for (std::size_t f = 0; f < 100; ++f) dot += e.data()[i * 100 + f] * e.data()[j * 100 + f];
      const double cos = dot / (norm[i] * norm[j]);
      if (fresh[i].label == fresh[j].label) {
        intra += cos;
        ++n_intra;
      } else {
        inter += cos;
        ++n_inter;
      }
    }
  }
  ASSERT_GT(n_intra, 0u);
  EXPECT_GT(intra / static_cast<double>(n_intra), inter / static_cast<double>(n_inter));
}

TEST(EncoderTraining, SameSeedSameCheckpoint) {
  const auto data = corpus(20, 71);
  SupervisedConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 32;
  auto a = train_encoder(data, CFormerConfig{}, cfg, 72);
  auto b = train_encoder(data, CFormerConfig{}, cfg, 72);
  EXPECT_EQ(content_hash(a.model.params()), content_hash(b.model.params()));
  EXPECT_EQ(json(a.result.log).dump(), json(b.result.log).dump());
  auto c = train_encoder(data, CFormerConfig{}, cfg, 73);
  EXPECT_NE(content_hash(a.model.params()), content_hash(c.model.params()));
}

TEST(EncoderTraining, RejectsEmptyDataset) {
  EXPECT_THROW(train_encoder({}, CFormerConfig{}, SupervisedConfig{}, 1), ValueError);
}

}  // namespace
}  // namespace eeg2img
