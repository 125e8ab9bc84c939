#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/layers.hpp"
#include "eeg2img/core/ops.hpp"
#include "eeg2img/core/optim.hpp"
#include "eeg2img/core/rng.hpp"

namespace eeg2img {

using json = nlohmann::json;

struct SupervisedConfig {
  std::size_t epochs = 30;
  std::size_t batch = 100;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  // Stop once test accuracy reaches this value; 0 trains every epoch.
  double stop_at_accuracy = 0.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SupervisedConfig, epochs, batch, lr, beta1, beta2, stop_at_accuracy)

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the untrained model
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
  double seconds = 0.0;
};

inline void to_json(json& j, const EpochRecord& r) {
  // Wall time stays out of the record so logs are reproducible byte for byte.
  j = json{{"epoch", r.epoch},         {"train_loss", r.train_loss}, {"train_accuracy", r.train_accuracy},
           {"test_loss", r.test_loss}, {"test_accuracy", r.test_accuracy}};
}

struct TrainResult {
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_test_accuracy = 0.0;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

inline std::size_t argmax_row(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Batch forward returning class probabilities for items `idx`.
using ProbsFn = std::function<Tensor(std::span<const std::size_t> idx, const ForwardContext& ctx)>;

/// Eval-mode cross-entropy, accuracy and confusion matrix over `idx`.
inline Evaluation evaluate_classifier(const ProbsFn& forward, std::span<const int> labels,
                                      std::span<const std::size_t> idx, std::size_t num_classes,
                                      std::size_t batch = 200) {
  Evaluation ev;
  ev.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  if (idx.empty()) return ev;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch) {
    const auto chunk = idx.subspan(start, std::min(batch, idx.size() - start));
    std::vector<int> y;
    for (std::size_t i : chunk) y.push_back(labels[i]);
    const Tensor probs = forward(chunk, {Mode::Eval, nullptr});
    loss_sum += cross_entropy(probs, y).item() * static_cast<double>(chunk.size());
    const auto p = probs.data();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const std::size_t pred = argmax_row(p.subspan(r * num_classes, num_classes));
      ++ev.confusion[static_cast<std::size_t>(y[r])][pred];
      if (pred == static_cast<std::size_t>(y[r])) ++correct;
    }
  }
  ev.loss = loss_sum / static_cast<double>(idx.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  return ev;
}

/// Minibatch Adam on cross-entropy. Keeps the parameters of the epoch with
/// the best test accuracy and restores them before returning.
inline TrainResult train_supervised(ParamStore& store, const ProbsFn& forward, std::span<const int> labels,
                                    std::span<const std::size_t> train_idx, std::span<const std::size_t> test_idx,
                                    std::size_t num_classes, const SupervisedConfig& cfg, std::uint64_t seed,
                                    const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  if (train_idx.empty()) throw ValueError("training split is empty");
  if (cfg.batch == 0) throw ConfigError("batch must be positive");
  Adam adam(store.parameters(), AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  Rng order_rng(seed, 0x0D3E);
  Rng dropout_rng(seed, 0xD20);

  TrainResult result;
  auto record = [&](EpochRecord r) {
    result.log.push_back(r);
    if (on_epoch) on_epoch(r);
  };

  {
    const auto tr = evaluate_classifier(forward, labels, train_idx, num_classes);
    const auto te = evaluate_classifier(forward, labels, test_idx, num_classes);
    record({0, tr.loss, tr.accuracy, te.loss, te.accuracy, 0.0});
  }
  auto best = store.snapshot();
  result.best_test_accuracy = result.log[0].test_accuracy;

  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += cfg.batch, ++b) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(cfg.batch, order.size() - start));
      // Batch statistics need two items; a lone leftover waits for the next shuffle.
      if (chunk.size() < 2) continue;
      seen += chunk.size();
      std::vector<int> y;
      for (std::size_t i : chunk) y.push_back(labels[i]);
      adam.zero_grad();
      const Tensor probs = forward(chunk, {Mode::Train, &dropout_rng});
      const Tensor loss = cross_entropy(probs, y);
      try {
        loss.backward();
        adam.step();
      } catch (const DivergenceError& e) {
        throw DivergenceError("diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " +
                              e.what());
      }
      loss_sum += loss.item() * static_cast<double>(chunk.size());
      const auto p = probs.data();
      for (std::size_t r = 0; r < chunk.size(); ++r) {
        if (argmax_row(p.subspan(r * num_classes, num_classes)) == static_cast<std::size_t>(y[r])) ++correct;
      }
    }
    const auto te = evaluate_classifier(forward, labels, test_idx, num_classes);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double n = static_cast<double>(std::max<std::size_t>(seen, 1));
    record({epoch, loss_sum / n, static_cast<double>(correct) / n, te.loss, te.accuracy, secs});
    if (te.accuracy > result.best_test_accuracy) {
      result.best_test_accuracy = te.accuracy;
      result.best_epoch = epoch;
      best = store.snapshot();
    }
    if (cfg.stop_at_accuracy > 0.0 && te.accuracy >= cfg.stop_at_accuracy) break;
  }
  store.restore(best);
  return result;
}

}  // namespace eeg2img
