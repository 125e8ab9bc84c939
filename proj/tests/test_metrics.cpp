#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "eeg2img/data/synth.hpp"
#include "eeg2img/metrics/metrics.hpp"

namespace eeg2img {
namespace {

// Brute-force oracles. IS through the entropy identity
// mean KL(p_i || p) = H(p) - mean H(p_i); diversity from integer label
// counts in base 2.
double oracle_inception(const std::vector<std::vector<double>>& rows) {
  const std::size_t s = rows.size(), m = rows[0].size();
  double mean_row_entropy = 0.0;
  for (const auto& r : rows) {
    for (double v : r) {
      if (v > 0.0) mean_row_entropy -= v * std::log(v) / static_cast<double>(s);
    }
  }
  double marginal_entropy = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double pj = 0.0;
    for (const auto& r : rows) pj += r[j];
    pj /= static_cast<double>(s);
    if (pj > 0.0) marginal_entropy -= pj * std::log(pj);
  }
  return std::exp(marginal_entropy - mean_row_entropy);
}

double oracle_diversity(const std::vector<int>& labels, std::size_t n) {
  std::vector<int> counts(n, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  double h = 0.0;
  for (int c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(labels.size());
    h -= p * std::log2(p);
  }
  return h / std::log2(static_cast<double>(n));
}

Tensor matrix(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return Tensor::from_data({rows.size(), rows[0].size()}, std::move(flat));
}

Tensor one_hots(const std::vector<int>& labels, std::size_t n) {
  std::vector<std::vector<double>> rows;
  for (int y : labels) {
    std::vector<double> r(n, 0.0);
    r[static_cast<std::size_t>(y)] = 1.0;
    rows.push_back(r);
  }
  return matrix(rows);
}

std::vector<std::vector<double>> random_distributions(Rng& rng, std::size_t s, std::size_t m) {
  std::vector<std::vector<double>> rows(s, std::vector<double>(m));
  for (auto& r : rows) {
    double total = 0.0;
    for (double& v : r) {
      // Sparse rows exercise the 0 log 0 convention.
      v = rng.uniform() < 0.3 ? 0.0 : -std::log(1.0 - rng.uniform());
      total += v;
    }
    if (total == 0.0) {
      r[rng.below(m)] = 1.0;
      continue;
    }
    for (double& v : r) v /= total;
  }
  return rows;
}

TEST(InceptionScore, KnownValues) {
  EXPECT_NEAR(inception_score(matrix({{0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}})), 1.0, 1e-12);
  std::vector<int> each(10);
  std::iota(each.begin(), each.end(), 0);
  EXPECT_NEAR(inception_score(one_hots(each, 10)), 10.0, 1e-12);
  const double kl = 0.9 * std::log(1.8) + 0.1 * std::log(0.2);
  EXPECT_NEAR(inception_score(matrix({{0.9, 0.1}, {0.1, 0.9}})), std::exp(kl), 1e-12);
  EXPECT_NEAR(inception_score(matrix({{0.9, 0.1}, {0.1, 0.9}})), 1.44493, 1e-5);
}

TEST(InceptionScore, RejectsNonDistributions) {
  EXPECT_THROW(inception_score(matrix({{0.5, 0.6}})), ValueError);
  EXPECT_THROW(inception_score(matrix({{1.5, -0.5}})), ValueError);
  EXPECT_THROW(inception_score(matrix({{std::nan(""), 1.0}})), ValueError);
  EXPECT_THROW(inception_score(Tensor::zeros({3})), ShapeError);
  EXPECT_NO_THROW(inception_score(matrix({{0.5, 0.5 + 1e-10}})));
}

TEST(DiversityScore, KnownValues) {
  EXPECT_EQ(class_diversity_score(one_hots({4, 4, 4}, 10), 10), 0.0);
  std::vector<int> each(10);
  std::iota(each.begin(), each.end(), 0);
  EXPECT_NEAR(class_diversity_score(one_hots(each, 10), 10), 1.0, 1e-12);
  const double h = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
  EXPECT_NEAR(class_diversity_score(one_hots({2, 2, 2, 7}, 10), 10), h / std::log(10.0), 1e-12);
  EXPECT_NEAR(class_diversity_score(one_hots({2, 2, 2, 7}, 10), 10), 0.24422, 1e-5);
}

TEST(DiversityScore, RejectsBadInput) {
  EXPECT_THROW(class_diversity_score(matrix({{0.5, 0.5}}), 2), ValueError);
  EXPECT_THROW(class_diversity_score(matrix({{1.0, 1.0}}), 2), ValueError);
  EXPECT_THROW(class_diversity_score(matrix({{0.0, 0.0}}), 2), ValueError);
  EXPECT_THROW(class_diversity_score(one_hots({0}, 3), 2), ShapeError);
  EXPECT_THROW(class_diversity_score(one_hots({0}, 1), 1), ValueError);
}

TEST(ArgmaxOneHot, TiesGoToLowestIndex) {
  const Tensor hot = argmax_one_hot(matrix({{0.25, 0.5, 0.25, 0.0}, {0.4, 0.1, 0.1, 0.4}, {0.25, 0.25, 0.25, 0.25}}));
  EXPECT_EQ(hot.to_vector(), (std::vector<double>{0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0}));
}

TEST(MetricsProperty, AgreeWithBruteForceAndStayInBounds) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t s = 1 + rng.below(40);
    const std::size_t m = 2 + rng.below(12);
    const auto rows = random_distributions(rng, s, m);
    const double is = inception_score(matrix(rows));
    EXPECT_NEAR(is, oracle_inception(rows), 1e-12 * std::max(1.0, is)) << trial;
    EXPECT_GE(is, 1.0 - 1e-12) << trial;
    EXPECT_LE(is, static_cast<double>(m) + 1e-12) << trial;

    std::vector<int> labels(s);
    for (int& y : labels) y = static_cast<int>(rng.below(m));
    const double d = class_diversity_score(one_hots(labels, m), m);
    EXPECT_NEAR(d, oracle_diversity(labels, m), 1e-12) << trial;
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0 + 1e-12);

    // Relabeling the classes permutes columns and leaves diversity unchanged.
    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<int>(perm));
    std::vector<int> relabeled;
    for (int y : labels) relabeled.push_back(perm[static_cast<std::size_t>(y)]);
    EXPECT_NEAR(class_diversity_score(one_hots(relabeled, m), m), d, 1e-12);
  }
}

struct Models {
  Generator generator;
  CFormer encoder;
  ImageClassifier classifier;

  Models() : generator(small_gen(), 1), encoder(CFormerConfig{}, 2), classifier(small_cls(), 3) {
    encoder.set_trained(true);
  }

  static GeneratorConfig small_gen() {
    GeneratorConfig g;
    g.base = 2;
    g.channels = {4, 3, 2};
    return g;
  }
  static ImageClassifierConfig small_cls() {
    ImageClassifierConfig c;
    c.conv_filters = {2, 3};
    c.fc_widths = {5, 4};
    c.image_size = 16;
    return c;
  }
};

std::vector<EEGWindow> windows_of(std::initializer_list<int> classes, std::size_t per_class) {
  std::vector<EEGWindow> out;
  for (int c : classes) {
    auto w = synth_eeg(c, per_class, 7);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

TEST(EvaluateGenerator, ReportSchemaAndCounts) {
  Models models;
  const auto train = windows_of({0, 1, 2, 3}, 3);
  const auto test = windows_of({0, 1, 4}, 2);
  const MetricsReport r = evaluate_generator(models.generator, models.encoder, models.classifier, train, test,
                                             default_class_names());
  const json j = r;
  EXPECT_EQ(j.at("num_images").at("condition1").get<std::size_t>(), 18u);
  EXPECT_EQ(j.at("num_images").at("condition2").get<std::size_t>(), 6u);
  EXPECT_GE(j.at("inception_score").at("condition1").get<double>(), 1.0);
  EXPECT_GE(j.at("inception_score").at("condition2").get<double>(), 1.0);
  const json& d = j.at("diversity");
  EXPECT_EQ(d.size(), 11u);
  EXPECT_TRUE(d.at("Dog").is_null());
  EXPECT_TRUE(d.at("Gold").is_null());
  EXPECT_TRUE(d.at("Apple").is_number());
  EXPECT_NEAR(d.at("mean").get<double>(),
              (d.at("Apple").get<double>() + d.at("Car").get<double>() + d.at("Mobile").get<double>()) / 3.0, 1e-15);
}

TEST(EvaluateGenerator, ConstantGeneratorGivesUnitScoreAndZeroDiversity) {
  Models models;
  // Zero every generator weight: each image is tanh(bias of the last conv) = 0.
  for (auto p : models.generator.params().parameters()) {
    auto v = p.tensor.mutable_data();
    std::fill(v.begin(), v.end(), 0.0);
  }
  const auto train = windows_of({0, 5, 9}, 2);
  const auto test = windows_of({1, 5, 8}, 3);
  const MetricsReport r = evaluate_generator(models.generator, models.encoder, models.classifier, train, test);
  EXPECT_NEAR(r.is_condition1, 1.0, 1e-12);
  EXPECT_NEAR(r.is_condition2, 1.0, 1e-12);
  for (std::size_t c : {1u, 5u, 8u}) {
    ASSERT_TRUE(r.diversity[c].has_value());
    EXPECT_EQ(*r.diversity[c], 0.0);
  }
  EXPECT_FALSE(r.diversity[0].has_value());
  EXPECT_EQ(r.diversity_mean, 0.0);
}

TEST(EvaluateGenerator, GeneratedImagesFollowWindowOrder) {
  Models models;
  const auto windows = windows_of({0, 6}, 3);
  const Tensor all = generate_images(models.generator, models.encoder, windows, 4);
  EXPECT_EQ(generate_images(models.generator, models.encoder, windows, 4).to_vector(), all.to_vector());
  // A different chunking changes GEMM blocking, so agreement is to rounding.
  const Tensor one = generate_images(models.generator, models.encoder, std::span(windows).subspan(4, 1));
  const std::size_t per = 3 * 16 * 16;
  for (std::size_t i = 0; i < per; ++i) EXPECT_NEAR(all.data()[4 * per + i], one.data()[i], 1e-12);
}

}  // namespace
}  // namespace eeg2img
