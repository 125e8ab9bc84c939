#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/checkpoint.hpp"
#include "eeg2img/core/layers.hpp"
#include "eeg2img/core/ops.hpp"
#include "eeg2img/core/optim.hpp"
#include "eeg2img/data/eeg.hpp"
#include "eeg2img/models/cformer.hpp"
#include "eeg2img/models/classifier.hpp"

namespace eeg2img {

struct GeneratorConfig {
  std::size_t input_dim = 100;
  std::size_t base = 4;
  std::vector<std::size_t> channels{256, 128, 64, 32};
  std::size_t out_channels = kImageChannels;
  double init_std = 0.02;

  std::size_t image_size() const { return base << channels.size(); }

  void validate() const {
    if (input_dim == 0 || base == 0) throw ValueError("generator: input_dim and base must be positive");
    if (channels.empty()) throw ValueError("generator: channel schedule is empty");
    if (!(init_std > 0.0)) throw ValueError("generator: init_std must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GeneratorConfig, input_dim, base, channels, out_channels, init_std)

struct DiscriminatorConfig {
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::size_t image_size = kImageSize;
  double leaky_slope = 0.2;
  double init_std = 0.02;

  void validate() const {
    if (channels.size() != 4) {
      throw ValueError("discriminator: exactly four strided conv layers are required, got " +
                       std::to_string(channels.size()));
    }
    if (image_size % 16 != 0 || image_size == 0) throw ValueError("discriminator: image size must be a multiple of 16");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DiscriminatorConfig, channels, image_size, leaky_slope, init_std)

/// Noise-free generator: the EEG encoding is the only input.
/// FC -> [c0, b, b] -> BN, relu -> {upsample x2, conv 3x3, BN, relu} per
/// schedule entry -> conv 3x3 to RGB -> tanh.
class Generator {
 public:
  explicit Generator(GeneratorConfig cfg = {}, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed, 0x6E4);
    const Init init = Init::gaussian(cfg_.init_std);
    const std::size_t c0 = cfg_.channels.front();
    fc_ = Linear(store_, "fc", cfg_.input_dim, c0 * cfg_.base * cfg_.base, init, rng);
    bn0_ = BatchNorm(store_, "bn0", c0);
    const std::size_t n = cfg_.channels.size();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t in = cfg_.channels[i], out = cfg_.channels[std::min(i + 1, n - 1)];
      const std::string name = "up" + std::to_string(i + 1);
      convs_.emplace_back(store_, name + ".conv", in, out, 3, 3, Stride{}, Padding::Same, false, init, rng);
      bns_.emplace_back(store_, name + ".bn", out);
    }
    to_rgb_ = Conv2d(store_, "to_rgb", cfg_.channels.back(), cfg_.out_channels, 3, 3, Stride{}, Padding::Same, true,
                     init, rng);
  }

  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;
  Generator(Generator&&) = default;
  Generator& operator=(Generator&&) = default;

  const GeneratorConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// z [B, input_dim] -> images [B, 3, S, S] in (-1, 1).
  Tensor forward(const Tensor& z, Mode mode) {
    if (z.rank() != 2 || z.dim(1) != cfg_.input_dim) {
      throw ShapeError("generator: encoding batch " + shape_str(z.shape()) + ", expected [B," +
                       std::to_string(cfg_.input_dim) + "]");
    }
    const std::size_t b = z.dim(0);
    Tensor h = relu(bn0_(reshape(fc_(z), {b, cfg_.channels.front(), cfg_.base, cfg_.base}), mode));
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = relu(bns_[i](convs_[i](upsample_nearest(h, 2)), mode));
    }
    return tanh(to_rgb_(h));
  }

  /// Eval-mode generation; a pure function of the encodings.
  Tensor generate(const Tensor& z) { return forward(z, Mode::Eval); }

  json config_json() const { return cfg_; }

 private:
  GeneratorConfig cfg_;
  ParamStore store_;
  Linear fc_;
  BatchNorm bn0_;
  std::vector<Conv2d> convs_;
  std::vector<BatchNorm> bns_;
  Conv2d to_rgb_;
};

/// Unconditional real/fake critic: four stride-2 3x3 convs with leaky relu,
/// then one valid conv over the remaining S/16 x S/16 map and a sigmoid.
class Discriminator {
 public:
  explicit Discriminator(DiscriminatorConfig cfg = {}, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed, 0xD15);
    const Init init = Init::gaussian(cfg_.init_std);
    std::size_t in = kImageChannels;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      convs_.emplace_back(store_, "conv" + std::to_string(i + 1), in, cfg_.channels[i], 3, 3, Stride{2, 2},
                          Padding::Same, true, init, rng);
      in = cfg_.channels[i];
    }
    const std::size_t side = cfg_.image_size / 16;
    convs_.emplace_back(store_, "conv" + std::to_string(cfg_.channels.size() + 1), in, 1, side, side, Stride{},
                        Padding::Valid, true, init, rng);
  }

  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;
  Discriminator(Discriminator&&) = default;
  Discriminator& operator=(Discriminator&&) = default;

  const DiscriminatorConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  std::size_t conv_layers() const { return convs_.size(); }

  /// images [B, 3, S, S] -> real-probabilities [B].
  Tensor forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != kImageChannels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size) {
      throw ShapeError("discriminator: expected [B,3," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
    }
    Tensor h = images;
    for (std::size_t i = 0; i + 1 < convs_.size(); ++i) h = leaky_relu(convs_[i](h), cfg_.leaky_slope);
    return sigmoid(reshape(convs_.back()(h), {images.dim(0)}));
  }

  /// Activation maps after each strided conv, for shape inspection.
  std::vector<Shape> feature_shapes(const Tensor& images) const {
    std::vector<Shape> shapes;
    Tensor h = images;
    for (std::size_t i = 0; i + 1 < convs_.size(); ++i) {
      h = leaky_relu(convs_[i](h), cfg_.leaky_slope);
      shapes.push_back(h.shape());
    }
    return shapes;
  }

  json config_json() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  ParamStore store_;
  std::vector<Conv2d> convs_;
};

// ---------------------------------------------------------------------------
// Losses

enum class Side { Discriminator, Generator };

/// Probabilities are floored at 1e-12 inside every log.
inline Tensor discriminator_loss(const Tensor& d_real, const Tensor& d_fake) {
  const Tensor real_term = mean(log_floor(d_real));
  const Tensor fake_term = mean(log_floor(affine(d_fake, -1.0, 1.0)));
  return scale(add(real_term, fake_term), -1.0);
}

/// Non-saturating: -mean log d_fake. Saturating: mean log(1 - d_fake), the
/// generator's side of the two-player minimax objective.
inline Tensor generator_adversarial_loss(const Tensor& d_fake, bool saturating = false) {
  if (saturating) return mean(log_floor(affine(d_fake, -1.0, 1.0)));
  return scale(mean(log_floor(d_fake)), -1.0);
}

inline Tensor loss_adversarial(const Tensor& d_real, const Tensor& d_fake, Side side, bool saturating = false) {
  return side == Side::Discriminator ? discriminator_loss(d_real, d_fake)
                                     : generator_adversarial_loss(d_fake, saturating);
}

/// Negative log-likelihood the frozen classifier assigns to the conditioned
/// class of each generated image.
inline Tensor loss_classifier(const ImageClassifier& classifier, const Tensor& generated, std::span<const int> labels) {
  return cross_entropy(classifier.forward(generated), labels);
}

/// Mean absolute difference of frozen-classifier features over all batch
/// items and feature elements. Real image i must share the class of
/// generated image i.
inline Tensor loss_perceptual(const ImageClassifier& classifier, const Tensor& real, std::span<const int> real_labels,
                              const Tensor& generated, std::span<const int> generated_labels) {
  if (real_labels.size() != generated_labels.size() || real.dim(0) != generated.dim(0) ||
      real.dim(0) != real_labels.size()) {
    throw ValueError("perceptual loss: batch sizes differ (real " + std::to_string(real.dim(0)) + ", generated " +
                     std::to_string(generated.dim(0)) + ")");
  }
  for (std::size_t i = 0; i < real_labels.size(); ++i) {
    if (real_labels[i] != generated_labels[i]) {
      throw ValueError("perceptual loss: pairing error at item " + std::to_string(i) + ": real class " +
                       std::to_string(real_labels[i]) + " vs conditioned class " +
                       std::to_string(generated_labels[i]));
    }
  }
  return mean_abs_diff(classifier.features(real), classifier.features(generated));
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kGeneratorModel = "generator";
inline constexpr const char* kDiscriminatorModel = "discriminator";

inline Checkpoint generator_checkpoint(const Generator& g, const json& run_config = json::object()) {
  Checkpoint ckpt = capture_checkpoint(kGeneratorModel, run_config, g.params());
  ckpt.extra["architecture"] = g.config_json();
  return ckpt;
}

inline Checkpoint discriminator_checkpoint(const Discriminator& d, const json& run_config = json::object()) {
  Checkpoint ckpt = capture_checkpoint(kDiscriminatorModel, run_config, d.params());
  ckpt.extra["architecture"] = d.config_json();
  ckpt.extra["conv_layers"] = d.conv_layers();
  return ckpt;
}

inline Generator load_generator(const Checkpoint& ckpt) {
  if (ckpt.model != kGeneratorModel) throw FormatError("expected a generator checkpoint, found '" + ckpt.model + "'");
  if (!ckpt.extra.contains("architecture")) throw FormatError("generator checkpoint lacks its architecture record");
  Generator g(ckpt.extra.at("architecture").get<GeneratorConfig>());
  apply_checkpoint(ckpt, g.params());
  return g;
}

inline Discriminator load_discriminator(const Checkpoint& ckpt) {
  if (ckpt.model != kDiscriminatorModel) {
    throw FormatError("expected a discriminator checkpoint, found '" + ckpt.model + "'");
  }
  if (!ckpt.extra.contains("architecture")) throw FormatError("discriminator checkpoint lacks its architecture record");
  Discriminator d(ckpt.extra.at("architecture").get<DiscriminatorConfig>());
  apply_checkpoint(ckpt, d.params());
  return d;
}

// ---------------------------------------------------------------------------
// Training

struct GanTrainConfig {
  std::size_t batch = 100;
  std::size_t iterations = 200;
  double lr = 1e-5;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double lambda3 = 1.0;
  bool saturating = false;
  // Control run: conditioned classes are a fixed random permutation of the
  // true window labels, so encodings carry no information about targets.
  bool shuffle_labels = false;
  std::size_t snapshot_every = 0;

  void validate() const {
    if (batch < 2) throw ConfigError("gan.batch must be at least 2 (batch norm)");
    if (!(lr > 0.0)) throw ConfigError("gan.lr must be positive");
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw ConfigError("gan loss weights must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GanTrainConfig, batch, iterations, lr, beta1, beta2, lambda1, lambda2,
                                                lambda3, saturating, shuffle_labels, snapshot_every)

struct GanRecord {
  std::size_t iter = 0;
  double L1_D = 0.0;
  double L1_G = 0.0;
  double L2 = 0.0;
  double L3 = 0.0;
  double L_total = 0.0;
};

inline void to_json(json& j, const GanRecord& r) {
  j = json{{"iter", r.iter}, {"L1_D", r.L1_D}, {"L1_G", r.L1_G}, {"L2", r.L2}, {"L3", r.L3}, {"L_total", r.L_total}};
}

struct GanHooks {
  std::function<void(const GanRecord&)> on_record;
  // Called every snapshot_every iterations and after the last one.
  std::function<void(std::size_t iter, Generator&, Discriminator&)> on_snapshot;
};

struct GanTraining {
  Generator generator;
  Discriminator discriminator;
  std::vector<GanRecord> log;
  std::string encoder_hash_before, encoder_hash_after;
  std::string classifier_hash_before, classifier_hash_after;
};

/// Encodings for every window, in order, in chunks to bound memory.
inline Tensor embed_all(CFormer& encoder, std::span<const EEGWindow> windows, std::size_t chunk = 500) {
  std::vector<double> v;
  v.reserve(windows.size() * 100);
  for (std::size_t s = 0; s < windows.size(); s += chunk) {
    const Tensor e = encoder.embed(windows.subspan(s, std::min(chunk, windows.size() - s)));
    v.insert(v.end(), e.data().begin(), e.data().end());
  }
  return Tensor::from_data({windows.size(), encoder.config().embed_dim}, std::move(v));
}

inline Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const std::size_t width = m.numel() / m.dim(0);
  std::vector<double> v(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy_n(m.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                v.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  return Tensor::from_data({rows.size(), width}, std::move(v));
}

/// Conditioned class per window: the true label, or for the control run a
/// seeded permutation of the label list.
inline std::vector<int> conditioning_labels(std::span<const EEGWindow> windows, bool shuffle, std::uint64_t seed) {
  std::vector<int> labels;
  for (const auto& w : windows) labels.push_back(w.label);
  if (shuffle) {
    Rng rng(seed, 0x5FF);
    rng.shuffle(std::span<int>(labels));
  }
  return labels;
}

/// One discriminator step then one generator step per iteration, on
/// encodings from the frozen encoder and class-matched real images.
inline GanTraining train_gan(std::span<const EEGWindow> eeg, std::span<const ImageSample> real_images, CFormer& encoder,
                             ImageClassifier& classifier, const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg,
                             const GanTrainConfig& cfg, std::uint64_t seed, const GanHooks& hooks = {}) {
  cfg.validate();
  if (eeg.empty()) throw ValueError("train_gan: EEG dataset is empty");
  if (gcfg.input_dim != encoder.config().embed_dim) {
    throw ConfigError("generator input_dim " + std::to_string(gcfg.input_dim) + " does not match encoding width " +
                      std::to_string(encoder.config().embed_dim));
  }
  if (gcfg.image_size() != classifier.config().image_size || dcfg.image_size != gcfg.image_size()) {
    throw ConfigError("generator, discriminator and classifier image sizes differ");
  }

  GanTraining run{Generator(gcfg, seed), Discriminator(dcfg, seed), {}, {}, {}, {}, {}};
  run.encoder_hash_before = content_hash(encoder.params());
  run.classifier_hash_before = content_hash(classifier.params());
  classifier.params().set_trainable(false);

  const Tensor encodings = embed_all(encoder, eeg);
  const std::vector<int> labels = conditioning_labels(eeg, cfg.shuffle_labels, seed);
  std::map<int, std::vector<std::size_t>> pool;
  for (std::size_t i = 0; i < real_images.size(); ++i) pool[real_images[i].label].push_back(i);
  for (int y : labels) {
    if (!pool.contains(y)) {
      throw ValueError("train_gan: pairing error: no real images of class " + std::to_string(y));
    }
  }

  Adam opt_d(run.discriminator.params().parameters(), AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  Adam opt_g(run.generator.params().parameters(), AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  Rng order_rng(seed, 0x0D4);
  Rng pair_rng(seed, 0x9A1);
  std::vector<std::size_t> order(eeg.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();

  auto finite_or_throw = [](double v, const char* what, std::size_t iter) {
    if (!std::isfinite(v)) {
      throw DivergenceError(std::string(what) + " is not finite at iteration " + std::to_string(iter));
    }
  };

  for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
    std::vector<std::size_t> idx;
    while (idx.size() < cfg.batch) {
      if (cursor == order.size()) {
        order_rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::vector<int> y;
    std::vector<ImageSample> real_batch;
    for (std::size_t i : idx) {
      y.push_back(labels[i]);
      const auto& candidates = pool.at(labels[i]);
      real_batch.push_back(real_images[candidates[pair_rng.below(candidates.size())]]);
    }
    const Tensor real = ImageClassifier::stack(real_batch);
    const Tensor z = gather_rows(encodings, idx);

    GanRecord rec;
    rec.iter = iter;
    const Tensor fake = run.generator.forward(z, Mode::Train);

    // Discriminator step on detached fakes.
    opt_d.zero_grad();
    const Tensor loss_d = discriminator_loss(run.discriminator.forward(real), run.discriminator.forward(fake.detach()));
    rec.L1_D = loss_d.item();
    finite_or_throw(rec.L1_D, "L1_D", iter);
    loss_d.backward();
    opt_d.step();

    // Generator step on the weighted objective; D is held fixed.
    opt_g.zero_grad();
    run.discriminator.params().set_trainable(false);
    const Tensor l1 = generator_adversarial_loss(run.discriminator.forward(fake), cfg.saturating);
    const Tensor l2 = loss_classifier(classifier, fake, y);
    const Tensor l3 = loss_perceptual(classifier, real, y, fake, y);
    rec.L1_G = l1.item();
    rec.L2 = l2.item();
    rec.L3 = l3.item();
    finite_or_throw(rec.L1_G, "L1_G", iter);
    finite_or_throw(rec.L2, "L2", iter);
    finite_or_throw(rec.L3, "L3", iter);
    const Tensor total = add(add(scale(l1, cfg.lambda1), scale(l2, cfg.lambda2)), scale(l3, cfg.lambda3));
    rec.L_total = total.item();
    finite_or_throw(rec.L_total, "L_total", iter);
    try {
      total.backward();
      opt_g.step();
    } catch (const DivergenceError& e) {
      throw DivergenceError("generator update at iteration " + std::to_string(iter) + ": " + e.what());
    }
    run.discriminator.params().set_trainable(true);

    run.log.push_back(rec);
    if (hooks.on_record) hooks.on_record(rec);
    const bool last = iter + 1 == cfg.iterations;
    if (hooks.on_snapshot && (last || (cfg.snapshot_every > 0 && (iter + 1) % cfg.snapshot_every == 0))) {
      hooks.on_snapshot(iter + 1, run.generator, run.discriminator);
    }
  }

  run.encoder_hash_after = content_hash(encoder.params());
  run.classifier_hash_after = content_hash(classifier.params());
  if (run.encoder_hash_after != run.encoder_hash_before || run.classifier_hash_after != run.classifier_hash_before) {
    throw StateError("train_gan: a frozen module changed during training");
  }
  return run;
}

}  // namespace eeg2img
