#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "adversary.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "separator.hpp"
#include "tasks.hpp"

namespace vtom {

struct TrainConfig {
  int epochs = 6;
  double lr = 1e-3;
  int batch = 32;
  std::uint64_t seed = 42;

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (batch < 1) throw ConfigError("batch size must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double train_accuracy = 0;  // predictions made before each batch update
  double val_accuracy = 0;    // mean over tasks
  std::array<double, kNumTasks> val_task{};
};

struct TrainResult {
  Weights<double> weights;
  std::vector<EpochStats> curve;
};

inline TaskAccuracy clean_accuracy(const Model<float>& m, const Dataset& data) {
  return task_accuracy(m, data, [&](std::size_t i) -> const std::vector<double>& { return data[i].frames; });
}

inline double mean_accuracy(const TaskAccuracy& a) {
  double s = 0;
  int n = 0;
  for (int k = 0; k < kNumTasks; ++k)
    if (a.count[k]) {
      s += a.acc[k];
      ++n;
    }
  return n ? s / n : 0.0;
}

// Mini-batch Adam on the option cross-entropy, single precision. Deterministic for a given seed.
inline TrainResult train_toy(const Weights<double>& init, const Dataset& train, const Dataset& val,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training set is empty");
  TrainResult res;
  if (cfg.epochs == 0) {
    res.weights = init;
    return res;
  }
  Model<float> model(init.cast<float>());
  const auto& w = model.weights();
  std::vector<char> frozen(w.size(), 0);
  for (int b = 0; b < Weights<float>::kBlocks; ++b)
    if (!Weights<float>::trainable(b))
      std::fill(frozen.begin() + w.off[b], frozen.begin() + w.off[b + 1], 1);
  Adam opt;
  opt.lr = cfg.lr;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::vector<float> grad(w.size());
  for (int ep = 0; ep < cfg.epochs; ++ep) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double total = 0;
    int hits = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::fill(grad.begin(), grad.end(), 0.0f);
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& d = train[order[i]];
        const auto text = d.text();
        Tape<float> tape;
        ForwardOutput<float> out;
        try {
          out = model.forward(model.embed(d.frames, text), std::span<const int>(d.options.data(), d.options.size()),
                              nullptr, &tape);
        } catch (const NumericError& e) {
          throw TrainingError(ep, e.what());
        }
        auto [loss, dl] = cross_entropy(out.logits, d.gold);
        if (!std::isfinite(loss)) throw TrainingError(ep, "loss is not finite");
        total += loss;
        hits += argmax_lowest(out.logits) == d.gold;
        dl *= inv;
        Mat<float> ds = model.backward(tape, dl, &grad);
        model.embed_backward(ds, text, &grad, false);
      }
      opt.step(model.weights().data, grad, &frozen);
    }
    EpochStats s;
    s.epoch = ep;
    s.loss = total / static_cast<double>(train.size());
    s.train_accuracy = static_cast<double>(hits) / static_cast<double>(train.size());
    if (!val.empty()) {
      auto a = clean_accuracy(model, val);
      s.val_task = a.acc;
      s.val_accuracy = mean_accuracy(a);
    }
    res.curve.push_back(s);
  }
  res.weights = model.weights().cast<double>();
  return res;
}

}  // namespace vtom
