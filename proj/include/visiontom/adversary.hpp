#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "io.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace vtom {

struct AttackConfig {
  enum class Mode { Pgd, Gaussian };
  Mode mode = Mode::Pgd;
  double epsilon = 16.0;  // raw pixel units
  double step = 1.0;
  int iters = 300;
  std::uint64_t seed = 42;
  double sigma_low = 50.0;
  double sigma_high = 80.0;

  void validate() const {
    if (!(epsilon >= 0)) throw ConfigError("epsilon must be >= 0");
    if (mode == Mode::Pgd && !(step > 0)) throw ConfigError("pgd step must be > 0");
    if (iters < 0) throw ConfigError("iters must be >= 0");
    if (!(sigma_low >= 0 && sigma_low <= sigma_high)) throw ConfigError("sigma range must satisfy 0 <= low <= high");
  }
};

inline const char* mode_name(AttackConfig::Mode m) { return m == AttackConfig::Mode::Pgd ? "pgd" : "gaussian"; }

struct AttackResult {
  std::vector<double> frames;
  std::vector<double> loss_trace;  // pgd: loss at the clean input and after every step
  double sigma = 0.0;              // gaussian: the drawn standard deviation
  bool failed = false;             // pgd: final loss did not exceed the clean loss
};

inline constexpr double kPixelMin = 0.0;
inline constexpr double kPixelMax = 255.0;

// Untargeted L-infinity PGD from the clean input: ascend the cross-entropy of the gold option with
// sign steps, then project onto the epsilon box and the valid pixel range after every step.
template <class T>
AttackResult pgd(const Model<T>& model, const TaskInstance& inst, const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.mode != AttackConfig::Mode::Pgd) throw ConfigError("pgd called with a non-pgd config");
  const auto text = inst.text();
  const std::span<const int> opts(inst.options.data(), inst.options.size());
  const auto& clean = inst.frames;
  AttackResult r;
  r.frames = clean;
  if (cfg.iters == 0 || cfg.epsilon == 0) {
    const double l = cross_entropy(model.logits(clean, text, opts), inst.gold).first;
    r.loss_trace.assign(static_cast<std::size_t>(cfg.iters) + 1, l);
    r.failed = cfg.iters > 0;
    return r;
  }
  for (int t = 0; t <= cfg.iters; ++t) {
    auto g = model.grad_wrt_visual(r.frames, text, opts, inst.gold);
    r.loss_trace.push_back(g.loss);
    if (t == cfg.iters) break;
    for (std::size_t i = 0; i < r.frames.size(); ++i) {
      const double s = (g.grad[i] > 0) - (g.grad[i] < 0);
      double x = r.frames[i] + cfg.step * s;
      x = std::clamp(x, clean[i] - cfg.epsilon, clean[i] + cfg.epsilon);
      r.frames[i] = std::clamp(x, kPixelMin, kPixelMax);
    }
  }
  r.failed = !(r.loss_trace.back() > r.loss_trace.front());
  return r;
}

// Additive Gaussian noise with sigma drawn once per instance; the stream depends only on the
// config seed and the instance id.
inline AttackResult gaussian(const TaskInstance& inst, const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.mode != AttackConfig::Mode::Gaussian) throw ConfigError("gaussian called with a non-gaussian config");
  Hasher h;
  h.text(inst.id);
  Rng rng(mix_seed(cfg.seed, h.digest()));
  AttackResult r;
  r.sigma = rng.uniform(cfg.sigma_low, cfg.sigma_high);
  r.frames = inst.frames;
  if (r.sigma == 0) return r;
  for (auto& v : r.frames) v = std::clamp(v + r.sigma * rng.normal(), kPixelMin, kPixelMax);
  return r;
}

template <class T>
AttackResult attack(const Model<T>& model, const TaskInstance& inst, const AttackConfig& cfg) {
  return cfg.mode == AttackConfig::Mode::Pgd ? pgd(model, inst, cfg) : gaussian(inst, cfg);
}

struct TaskAccuracy {
  std::array<double, kNumTasks> acc{};
  std::array<int, kNumTasks> count{};
  std::array<int, kNumTasks> invalid{};
};

struct AttackImpact {
  TaskAccuracy clean;
  TaskAccuracy perturbed;
  double max_linf = 0.0;   // largest |perturbed - clean| over all instances
  bool in_range = true;    // every perturbed value inside [0, 255]
  int failed = 0;
};

// Top-1 accuracy per task; instances whose forward pass is not finite count as wrong.
template <class T, class FramesOf>
TaskAccuracy task_accuracy(const Model<T>& model, const Dataset& data, FramesOf&& frames_of) {
  TaskAccuracy r;
  std::array<int, kNumTasks> ok{};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& d = data[i];
    const int k = static_cast<int>(d.kind);
    ++r.count[k];
    try {
      auto lg = model.logits(frames_of(i), d.text(), std::span<const int>(d.options.data(), d.options.size()));
      if (argmax_lowest(lg) == d.gold) ++ok[k];
    } catch (const NumericError&) {
      ++r.invalid[k];
    }
  }
  for (int k = 0; k < kNumTasks; ++k) r.acc[k] = r.count[k] ? static_cast<double>(ok[k]) / r.count[k] : 0.0;
  return r;
}

template <class T>
AttackImpact attack_impact(const Model<T>& model, const Dataset& data, const AttackConfig& cfg,
                           std::vector<AttackResult>* results = nullptr) {
  AttackImpact out;
  out.clean = task_accuracy(model, data, [&](std::size_t i) -> const std::vector<double>& { return data[i].frames; });
  std::vector<AttackResult> adv;
  adv.reserve(data.size());
  for (const auto& d : data) {
    adv.push_back(attack(model, d, cfg));
    const auto& a = adv.back();
    out.failed += a.failed;
    for (std::size_t j = 0; j < a.frames.size(); ++j) {
      out.max_linf = std::max(out.max_linf, std::abs(a.frames[j] - d.frames[j]));
      if (a.frames[j] < kPixelMin || a.frames[j] > kPixelMax) out.in_range = false;
    }
  }
  out.perturbed = task_accuracy(model, data, [&](std::size_t i) -> const std::vector<double>& { return adv[i].frames; });
  if (results) *results = std::move(adv);
  return out;
}

}  // namespace vtom
