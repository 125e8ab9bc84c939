#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/tensor.hpp"
#include "eeg2img/data/eeg.hpp"
#include "eeg2img/models/cformer.hpp"
#include "eeg2img/models/classifier.hpp"
#include "eeg2img/models/gan.hpp"
#include "eeg2img/models/training.hpp"

namespace eeg2img {

inline constexpr double kRowSumTolerance = 1e-9;

namespace detail {

inline void check_matrix(const Tensor& m, const char* what) {
  if (m.rank() != 2) throw ShapeError(std::string(what) + ": expected [S, M], got " + shape_str(m.shape()));
  if (m.dim(0) == 0 || m.dim(1) == 0) throw ValueError(std::string(what) + ": empty prediction batch");
}

// x log x with 0 log 0 = 0.
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace detail

/// Rows must be probability distributions: finite, non-negative, summing
/// to 1 within 1e-9.
inline void validate_distributions(const Tensor& probs) {
  detail::check_matrix(probs, "inception_score");
  const std::size_t s = probs.dim(0), m = probs.dim(1);
  const auto p = probs.data();
  for (std::size_t i = 0; i < s; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = p[i * m + j];
      if (!std::isfinite(v) || v < 0.0) {
        throw ValueError("row " + std::to_string(i) + " has an invalid probability " + std::to_string(v));
      }
      total += v;
    }
    if (std::abs(total - 1.0) > kRowSumTolerance) {
      throw ValueError("row " + std::to_string(i) + " sums to " + std::to_string(total) + ", not 1");
    }
  }
}

/// exp(mean_i KL(p_i || p_bar)) with p_bar the column mean. Natural log.
inline double inception_score(const Tensor& probs) {
  validate_distributions(probs);
  const std::size_t s = probs.dim(0), m = probs.dim(1);
  const auto p = probs.data();
  std::vector<double> marginal(m, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < m; ++j) marginal[j] += p[i * m + j];
  }
  for (double& v : marginal) v /= static_cast<double>(s);
  double kl_total = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double v = p[i * m + j];
      // v > 0 implies marginal[j] > 0.
      if (v > 0.0) kl_total += v * (std::log(v) - std::log(marginal[j]));
    }
  }
  return std::exp(kl_total / static_cast<double>(s));
}

/// Hard predictions: one-hot of each row's argmax, ties to the lowest index.
inline Tensor argmax_one_hot(const Tensor& probs) {
  detail::check_matrix(probs, "argmax_one_hot");
  const std::size_t s = probs.dim(0), m = probs.dim(1);
  std::vector<double> out(s * m, 0.0);
  for (std::size_t i = 0; i < s; ++i) out[i * m + argmax_row(probs.data().subspan(i * m, m))] = 1.0;
  return Tensor::from_data({s, m}, std::move(out));
}

/// H(mean one-hot) / ln N.
inline double class_diversity_score(const Tensor& one_hot, std::size_t num_classes) {
  detail::check_matrix(one_hot, "class_diversity_score");
  if (num_classes < 2) throw ValueError("class_diversity_score: need at least two classes");
  const std::size_t s = one_hot.dim(0), m = one_hot.dim(1);
  if (m != num_classes) {
    throw ShapeError("class_diversity_score: " + std::to_string(m) + " columns for " + std::to_string(num_classes) +
                     " classes");
  }
  const auto p = one_hot.data();
  std::vector<double> counts(m, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = p[i * m + j];
      if (v == 1.0) {
        ++ones;
        counts[j] += 1.0;
      } else if (v != 0.0) {
        ones = 2;
        break;
      }
    }
    if (ones != 1) throw ValueError("class_diversity_score: row " + std::to_string(i) + " is not one-hot");
  }
  double entropy = 0.0;
  for (double c : counts) entropy -= detail::xlogx(c / static_cast<double>(s));
  return entropy / std::log(static_cast<double>(num_classes));
}

// ---------------------------------------------------------------------------
// Generator evaluation

/// One image per window, in window order: encoder embedding -> eval-mode G.
inline Tensor generate_images(Generator& generator, CFormer& encoder, std::span<const EEGWindow> windows,
                              std::size_t chunk = 100) {
  if (windows.empty()) throw ValueError("generate_images: no EEG windows");
  const std::size_t side = generator.config().image_size();
  const std::size_t per = generator.config().out_channels * side * side;
  std::vector<double> v;
  v.reserve(windows.size() * per);
  for (std::size_t s = 0; s < windows.size(); s += chunk) {
    const auto part = windows.subspan(s, std::min(chunk, windows.size() - s));
    const Tensor img = generator.generate(encoder.embed(part));
    v.insert(v.end(), img.data().begin(), img.data().end());
  }
  return Tensor::from_data({windows.size(), generator.config().out_channels, side, side}, std::move(v));
}

inline Tensor classify_images(const ImageClassifier& classifier, const Tensor& images, std::size_t chunk = 200) {
  const std::size_t n = images.dim(0), per = images.numel() / n, m = classifier.config().num_classes;
  Shape shape = images.shape();
  std::vector<double> probs;
  probs.reserve(n * m);
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t k = std::min(chunk, n - s);
    shape[0] = k;
    const Tensor part = Tensor::from_data(
        shape, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(s * per),
                                   images.data().begin() + static_cast<std::ptrdiff_t>((s + k) * per)));
    const Tensor p = classifier.forward(part);
    probs.insert(probs.end(), p.data().begin(), p.data().end());
  }
  return Tensor::from_data({n, m}, std::move(probs));
}

struct MetricsReport {
  double is_condition1 = 0.0;
  double is_condition2 = 0.0;
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> diversity;  // per condition class, null when absent
  double diversity_mean = 0.0;
  std::size_t images_condition1 = 0;
  std::size_t images_condition2 = 0;
};

inline void to_json(json& j, const MetricsReport& r) {
  json diversity = json::object();
  for (std::size_t c = 0; c < r.diversity.size(); ++c) {
    diversity[r.class_names[c]] = r.diversity[c] ? json(*r.diversity[c]) : json(nullptr);
  }
  diversity["mean"] = r.diversity_mean;
  j = json{{"inception_score", {{"condition1", r.is_condition1}, {"condition2", r.is_condition2}}},
           {"diversity", diversity},
           {"num_images", {{"condition1", r.images_condition1}, {"condition2", r.images_condition2}}}};
}

/// Per-class diversity of hard predictions, grouped by each window's class.
/// Classes without windows are null; the mean covers the present ones.
inline std::vector<std::optional<double>> diversity_by_class(const Tensor& probs, std::span<const EEGWindow> windows,
                                                             std::size_t num_classes) {
  const Tensor hot = argmax_one_hot(probs);
  const std::size_t m = hot.dim(1);
  std::vector<std::vector<double>> rows(num_classes);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto c = static_cast<std::size_t>(windows[i].label);
    if (c >= num_classes) throw IndexError("window label " + std::to_string(c) + " out of range");
    rows[c].insert(rows[c].end(), hot.data().begin() + static_cast<std::ptrdiff_t>(i * m),
                   hot.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * m));
  }
  std::vector<std::optional<double>> out(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (rows[c].empty()) continue;
    const std::size_t s = rows[c].size() / m;
    out[c] = class_diversity_score(Tensor::from_data({s, m}, std::move(rows[c])), m);
  }
  return out;
}

inline double mean_present(const std::vector<std::optional<double>>& values) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& v : values) {
    if (v) {
      total += *v;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Condition 1 scores images from train and test windows together,
/// condition 2 only those from test windows. Diversity uses test windows.
inline MetricsReport evaluate_generator(Generator& generator, CFormer& encoder, const ImageClassifier& classifier,
                                        std::span<const EEGWindow> train, std::span<const EEGWindow> test,
                                        std::vector<std::string> class_names = {}) {
  if (test.empty()) throw ValueError("evaluate_generator: test EEG set is empty");
  const std::size_t m = classifier.config().num_classes;
  if (class_names.size() != m) {
    class_names.clear();
    for (std::size_t c = 0; c < m; ++c) class_names.push_back(std::to_string(c));
  }
  const Tensor test_probs = classify_images(classifier, generate_images(generator, encoder, test));
  MetricsReport r;
  r.class_names = std::move(class_names);
  r.is_condition2 = inception_score(test_probs);
  r.images_condition2 = test.size();
  if (train.empty()) {
    r.is_condition1 = r.is_condition2;
  } else {
    const Tensor train_probs = classify_images(classifier, generate_images(generator, encoder, train));
    std::vector<double> both(train_probs.data().begin(), train_probs.data().end());
    both.insert(both.end(), test_probs.data().begin(), test_probs.data().end());
    r.is_condition1 = inception_score(Tensor::from_data({train.size() + test.size(), m}, std::move(both)));
  }
  r.images_condition1 = train.size() + test.size();
  r.diversity = diversity_by_class(test_probs, test, m);
  r.diversity_mean = mean_present(r.diversity);
  return r;
}

}  // namespace eeg2img
