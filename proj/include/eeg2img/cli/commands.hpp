#pragma once

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "eeg2img/cli/config.hpp"
#include "eeg2img/core/checkpoint.hpp"
#include "eeg2img/core/error.hpp"
#include "eeg2img/data/dataset_io.hpp"
#include "eeg2img/data/ppm.hpp"
#include "eeg2img/data/synth.hpp"
#include "eeg2img/metrics/metrics.hpp"
#include "eeg2img/models/cformer.hpp"
#include "eeg2img/models/classifier.hpp"
#include "eeg2img/models/gan.hpp"

namespace eeg2img::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kIo = 3, kDivergence = 4 };

inline constexpr std::size_t kDefaultEegPerClass = 500;
inline constexpr std::size_t kDefaultImagesPerClass = 200;
inline constexpr std::size_t kGridTiles = 64;

namespace detail {

class JsonLines {
 public:
  explicit JsonLines(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
  }

  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("short write to a log file");
  }

 private:
  std::ofstream out_;
};

inline fs::path require_checkpoint(const fs::path& dir, const std::string& what, const std::string& hint) {
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError(what + " checkpoint not found at '" + dir.string() + "'; " + hint);
  }
  return dir;
}

/// Accepts a generator checkpoint, a GAN directory holding generator/, or a
/// run directory holding gan/generator/.
inline fs::path resolve_generator(const fs::path& p) {
  for (const fs::path& candidate : {p, p / "generator", p / "gan" / "generator"}) {
    if (fs::exists(candidate / "manifest.json")) return candidate;
  }
  throw ConfigError("no generator checkpoint under '" + p.string() + "'; run train-gan first");
}

/// Up to `limit` indices taking one window per class in turn.
inline std::vector<std::size_t> round_robin(std::span<const EEGWindow> windows, std::size_t limit) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < windows.size(); ++i) by_class[windows[i].label].push_back(i);
  std::vector<std::size_t> out;
  for (std::size_t round = 0; out.size() < limit; ++round) {
    bool any = false;
    for (const auto& [label, idx] : by_class) {
      if (round < idx.size() && out.size() < limit) {
        out.push_back(idx[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

inline std::vector<Tensor> split_images(const Tensor& batch) {
  const std::size_t n = batch.dim(0), per = batch.numel() / n;
  const Shape one{batch.dim(1), batch.dim(2), batch.dim(3)};
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(Tensor::from_data(one, std::vector<double>(batch.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                             batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per))));
  }
  return out;
}

inline std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

inline std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_synth_data(const std::string& kind, const fs::path& out_dir, long long per_class, std::uint64_t seed,
                          std::ostream& out) {
  if (per_class < 0) per_class = static_cast<long long>(kind == "eeg" ? kDefaultEegPerClass : kDefaultImagesPerClass);
  const auto n = static_cast<std::size_t>(per_class);
  if (kind == "eeg") {
    EegDataset ds;
    for (int c = 0; c < static_cast<int>(kNumClasses); ++c) {
      auto w = synth_eeg(c, n, seed);
      ds.windows.insert(ds.windows.end(), w.begin(), w.end());
    }
    save_eeg_dataset(out_dir, ds);
    out << "wrote " << ds.windows.size() << " EEG windows to " << out_dir.string() << "\n";
  } else {
    ImageDataset ds;
    for (int c = 0; c < static_cast<int>(kNumClasses); ++c) {
      auto s = synth_images(c, n, seed);
      ds.images.insert(ds.images.end(), s.begin(), s.end());
    }
    save_image_dataset(out_dir, ds);
    out << "wrote " << ds.images.size() << " images to " << out_dir.string() << "\n";
  }
  return kOk;
}

inline int cmd_train_encoder(const RunConfig& cfg, std::ostream& out) {
  const EegDataset ds = load_eeg_dataset(cfg.data.eeg);
  detail::JsonLines log(cfg.log_dir() / "encoder.jsonl");
  auto run = train_encoder(ds.windows, cfg.encoder.architecture, cfg.encoder.training, cfg.seed, [&](const EpochRecord& r) {
    log.write(r);
    out << "encoder epoch " << r.epoch << ": train_loss " << detail::fixed(r.train_loss) << " test_acc "
        << detail::fixed(r.test_accuracy) << "\n";
  });
  save_checkpoint(cfg.encoder_checkpoint(), encoder_checkpoint(run.model, cfg));
  out << "encoder: best test accuracy " << detail::fixed(run.result.best_test_accuracy) << " at epoch "
      << run.result.best_epoch << ", saved to " << cfg.encoder_checkpoint().string() << "\n";
  return kOk;
}

inline int cmd_train_classifier(const RunConfig& cfg, std::ostream& out) {
  const ImageDataset ds = load_image_dataset(cfg.data.images);
  detail::JsonLines log(cfg.log_dir() / "classifier.jsonl");
  auto run = train_image_classifier(ds.images, cfg.classifier.architecture, cfg.classifier.training, cfg.seed,
                                    [&](const EpochRecord& r) {
                                      log.write(r);
                                      out << "classifier epoch " << r.epoch << ": train_loss "
                                          << detail::fixed(r.train_loss) << " test_acc "
                                          << detail::fixed(r.test_accuracy) << "\n";
                                    });
  save_checkpoint(cfg.classifier_checkpoint(), classifier_checkpoint(run.model, true, cfg));
  out << "classifier: best test accuracy " << detail::fixed(run.result.best_test_accuracy) << " at epoch "
      << run.result.best_epoch << ", saved to " << cfg.classifier_checkpoint().string() << "\n";
  return kOk;
}

inline int cmd_train_gan(const RunConfig& cfg, std::ostream& out) {
  const fs::path enc_dir =
      detail::require_checkpoint(cfg.encoder_checkpoint(), "encoder", "run train-encoder or set encoder.checkpoint");
  const fs::path cls_dir = detail::require_checkpoint(cfg.classifier_checkpoint(), "classifier",
                                                      "run train-classifier or set classifier.checkpoint");
  CFormer encoder = load_encoder(load_checkpoint(enc_dir));
  ImageClassifier classifier = load_classifier(load_checkpoint(cls_dir));
  const EegDataset eeg = load_eeg_dataset(cfg.data.eeg);
  const ImageDataset images = load_image_dataset(cfg.data.images);

  const fs::path gan_dir = cfg.gan_dir();
  detail::JsonLines log(cfg.log_dir() / "gan.jsonl");
  std::vector<EEGWindow> grid_windows;
  for (std::size_t i : detail::round_robin(eeg.windows, kGridTiles)) grid_windows.push_back(eeg.windows[i]);

  auto save_all = [&](Generator& g, Discriminator& d) {
    save_checkpoint(gan_dir / "generator", generator_checkpoint(g, cfg));
    save_checkpoint(gan_dir / "discriminator", discriminator_checkpoint(d, cfg));
  };
  GanHooks hooks;
  hooks.on_record = [&](const GanRecord& r) {
    log.write(r);
    if (r.iter % 10 == 0) {
      out << "gan iter " << r.iter << ": L1_D " << detail::fixed(r.L1_D) << " L1_G " << detail::fixed(r.L1_G) << " L2 "
          << detail::fixed(r.L2) << " L3 " << detail::fixed(r.L3) << "\n";
    }
  };
  hooks.on_snapshot = [&](std::size_t iter, Generator& g, Discriminator& d) {
    if (!grid_windows.empty()) {
      const auto tiles = detail::split_images(generate_images(g, encoder, grid_windows, cfg.metrics.batch));
      std::ostringstream name;
      name << "iter_" << std::setw(6) << std::setfill('0') << iter << ".ppm";
      fs::create_directories(gan_dir / "samples");
      write_ppm_grid(gan_dir / "samples" / name.str(), tiles);
    }
    save_all(g, d);
  };
  auto run = train_gan(eeg.windows, images.images, encoder, classifier, cfg.gan.generator, cfg.gan.discriminator,
                       cfg.gan.training, cfg.seed, hooks);
  save_all(run.generator, run.discriminator);
  if (!run.log.empty()) {
    out << "gan: L2 " << detail::fixed(run.log.front().L2) << " -> " << detail::fixed(run.log.back().L2)
        << ", saved to " << gan_dir.string() << "\n";
  }
  return kOk;
}

inline int cmd_generate(const fs::path& gan, const fs::path& encoder_dir, const fs::path& eeg_dir, const fs::path& out_dir,
                        bool grid, std::size_t batch, std::ostream& out) {
  Generator generator = load_generator(load_checkpoint(detail::resolve_generator(gan)));
  CFormer encoder =
      load_encoder(load_checkpoint(detail::require_checkpoint(encoder_dir, "encoder", "pass a trained encoder")));
  const EegDataset eeg = load_eeg_dataset(eeg_dir);
  ImageDataset result;
  result.class_names = eeg.class_names;
  std::vector<Tensor> tiles;
  if (!eeg.windows.empty()) tiles = detail::split_images(generate_images(generator, encoder, eeg.windows, batch));
  for (std::size_t i = 0; i < tiles.size(); ++i) result.images.push_back({tiles[i], eeg.windows[i].label});
  save_image_dataset(out_dir, result);
  if (grid) {
    std::map<int, std::vector<Tensor>> by_class;
    for (const auto& im : result.images) {
      auto& v = by_class[im.label];
      if (v.size() < kGridTiles) v.push_back(im.pixels);
    }
    for (const auto& [label, imgs] : by_class) {
      const auto c = static_cast<std::size_t>(label);
      const std::string name = c < eeg.class_names.size() ? eeg.class_names[c] : std::to_string(label);
      write_ppm_grid(out_dir / ("grid_" + detail::safe_name(name) + ".ppm"), imgs);
    }
  }
  out << "generated " << result.images.size() << " images into " << out_dir.string() << "\n";
  return kOk;
}

inline int cmd_evaluate(const fs::path& gan, const fs::path& encoder_dir, const fs::path& classifier_dir,
                        const fs::path& train_dir, const fs::path& test_dir, const fs::path& report_path,
                        std::ostream& out) {
  Generator generator = load_generator(load_checkpoint(detail::resolve_generator(gan)));
  CFormer encoder =
      load_encoder(load_checkpoint(detail::require_checkpoint(encoder_dir, "encoder", "pass a trained encoder")));
  ImageClassifier classifier = load_classifier(
      load_checkpoint(detail::require_checkpoint(classifier_dir, "classifier", "pass a trained classifier")));
  const EegDataset train = load_eeg_dataset(train_dir);
  const EegDataset test = load_eeg_dataset(test_dir);
  if (test.windows.empty()) throw ConfigError("evaluate: the test EEG set '" + test_dir.string() + "' is empty");
  const MetricsReport report =
      evaluate_generator(generator, encoder, classifier, train.windows, test.windows, test.class_names);
  if (report_path.has_parent_path()) fs::create_directories(report_path.parent_path());
  std::ofstream f(report_path, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + report_path.string() + "'");
  f << json(report).dump(2) << '\n';
  if (!f) throw IoError("short write to '" + report_path.string() + "'");
  out << "IS condition1 " << detail::fixed(report.is_condition1) << ", condition2 "
      << detail::fixed(report.is_condition2) << ", mean diversity " << detail::fixed(report.diversity_mean)
      << "; report at " << report_path.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses `args` (without the program name) and runs one subcommand.
/// Exit codes: 0 success, 2 usage or config, 3 I/O, 4 numerical divergence.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"eeg2img: EEG-conditioned image synthesis (encoder, classifier, noise-free GAN, metrics)", "eeg2img"};
  app.require_subcommand(1);
  app.footer(config_reference());

  std::string kind;
  fs::path synth_out;
  long long per_class = -1;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic EEG or image dataset");
  synth->add_option("--kind", kind, "eeg or images")->required()->check(CLI::IsMember({"eeg", "images"}));
  synth->add_option("--out", synth_out, "Output dataset directory")->required();
  synth->add_option("--per-class", per_class, "Items per class (default 500 EEG windows, 200 images)")
      ->check(CLI::NonNegativeNumber);
  synth->add_option("--seed", synth_seed, "Seed")->capture_default_str();

  fs::path config_path;
  auto* train_enc = app.add_subcommand("train-encoder", "Pre-train the EEG encoder on data.eeg");
  auto* train_cls = app.add_subcommand("train-classifier", "Train the auxiliary image classifier on data.images");
  auto* train_g = app.add_subcommand("train-gan", "Train the generator and discriminator against frozen modules");
  for (auto* sub : {train_enc, train_cls, train_g}) {
    sub->add_option("--config", config_path, "Run config (JSON)")->required();
    sub->footer(config_reference());
  }

  fs::path gan_path, encoder_path, classifier_path, eeg_path, out_path, eeg_train, eeg_test;
  bool grid = false;
  std::size_t batch = 100;
  auto* gen = app.add_subcommand("generate", "Generate one image per EEG window");
  gen->add_option("--gan", gan_path, "Generator checkpoint, GAN directory or run directory")->required();
  gen->add_option("--encoder", encoder_path, "Encoder checkpoint directory")->required();
  gen->add_option("--eeg", eeg_path, "EEG dataset directory")->required();
  gen->add_option("--out", out_path, "Output image dataset directory")->required();
  gen->add_flag("--grid", grid, "Also write an 8x8 PPM grid per class");
  gen->add_option("--batch", batch, "Windows per forward pass")->capture_default_str()->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("evaluate", "Inception score and class diversity of generated images");
  eval->add_option("--gan", gan_path, "Generator checkpoint, GAN directory or run directory")->required();
  eval->add_option("--encoder", encoder_path, "Encoder checkpoint directory")->required();
  eval->add_option("--classifier", classifier_path, "Classifier checkpoint directory")->required();
  eval->add_option("--eeg-train", eeg_train, "Training EEG dataset (condition 1 adds these windows)")->required();
  eval->add_option("--eeg-test", eeg_test, "Test EEG dataset")->required();
  eval->add_option("--out", out_path, "Report JSON path")->required();

  std::vector<std::string> argv_store{"eeg2img"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(kind, synth_out, per_class, synth_seed, out);
    if (gen->parsed()) return cmd_generate(gan_path, encoder_path, eeg_path, out_path, grid, batch, out);
    if (eval->parsed()) {
      return cmd_evaluate(gan_path, encoder_path, classifier_path, eeg_train, eeg_test, out_path, out);
    }
    const RunConfig cfg = load_run_config(config_path);
    if (train_enc->parsed()) return cmd_train_encoder(cfg, out);
    if (train_cls->parsed()) return cmd_train_classifier(cfg, out);
    return cmd_train_gan(cfg, out);
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace eeg2img::cli
