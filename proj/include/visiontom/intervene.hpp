#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "capture.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "separator.hpp"
#include "tasks.hpp"

namespace vtom {

enum class Variant : std::uint8_t { Full = 0, NoText, NoVisual, Random, Negated, Baseline };

inline constexpr std::array<Variant, 6> kAllVariants = {Variant::Full,   Variant::NoText,  Variant::NoVisual,
                                                        Variant::Random, Variant::Negated, Variant::Baseline};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoText: return "no_text";
    case Variant::NoVisual: return "no_visual";
    case Variant::Random: return "random";
    case Variant::Negated: return "negated";
    case Variant::Baseline: return "baseline";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (auto v : kAllVariants)
    if (s == variant_name(v)) return v;
  throw ConfigError("unknown variant: " + s);
}

// Row labels in the style of ablation tables.
inline const char* variant_label(Variant v) {
  switch (v) {
    case Variant::Full: return "+αΔ";
    case Variant::NoText: return "w/o δ_T";
    case Variant::NoVisual: return "w/o δ_V";
    case Variant::Random: return "Rnd-Δ";
    case Variant::Negated: return "−αΔ";
    case Variant::Baseline: return "Baseline";
  }
  return "?";
}

struct OffsetField {
  std::vector<HeadId> heads;
  std::vector<std::vector<double>> delta;  // per head, head_dim values
  int samples = 0;
};

// Mean over paired samples of (pos - neg) for each requested head. Pairs are matched by sample id.
inline OffsetField compute_visual_offsets(const std::vector<const HeadActivationMap*>& pos,
                                          const std::vector<const HeadActivationMap*>& neg,
                                          const std::vector<HeadId>& heads) {
  std::map<std::string, const HeadActivationMap*> by_id;
  for (auto* n : neg)
    if (!by_id.emplace(n->sample_id, n).second) throw PairingError("duplicate negative for " + n->sample_id);
  if (pos.size() != neg.size()) throw PairingError("positive and negative counts differ");
  if (pos.empty()) throw PairingError("no visual pairs");
  OffsetField f;
  f.heads = heads;
  f.samples = static_cast<int>(pos.size());
  const int D = pos[0]->head_dim;
  f.delta.assign(heads.size(), std::vector<double>(D, 0.0));
  for (auto* p : pos) {
    auto it = by_id.find(p->sample_id);
    if (it == by_id.end()) throw PairingError("no negative for " + p->sample_id);
    const auto* n = it->second;
    if (n->head_dim != D || p->head_dim != D) throw PairingError("head width differs within a pair");
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const float* a = p->head(heads[h].layer, heads[h].head);
      const float* b = n->head(heads[h].layer, heads[h].head);
      for (int d = 0; d < D; ++d) f.delta[h][d] += static_cast<double>(a[d]) - static_cast<double>(b[d]);
    }
  }
  for (auto& v : f.delta)
    for (auto& x : v) x /= f.samples;
  return f;
}

struct BundleHead {
  HeadId head;
  int k_star = 0;
  std::vector<float> centers;                // k_star x head_dim
  std::vector<std::vector<float>> encoders;  // k_star parameter vectors
  bool operator==(const BundleHead&) const = default;
};

struct InterventionBundle {
  std::uint64_t model_hash = 0;
  int head_dim = 0;
  int k = 0;
  double alpha = 1.0;
  Variant variant = Variant::Full;
  std::uint64_t seed = 42;
  int offset_samples = 0;
  std::vector<HeadId> visual_heads;         // ranked
  std::vector<std::vector<float>> delta_v;  // per visual head
  std::array<std::vector<BundleHead>, kNumTasks> tom;  // ranked, per task

  bool operator==(const InterventionBundle&) const = default;
};

inline std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

inline BundleHead bundle_head(const ClusterCorrector& cc) {
  BundleHead b;
  b.head = cc.cluster.head;
  b.k_star = cc.cluster.k_star;
  const Eigen::MatrixXd& c = cc.cluster.centers;
  for (Eigen::Index i = 0; i < c.rows(); ++i)
    for (Eigen::Index j = 0; j < c.cols(); ++j) b.centers.push_back(static_cast<float>(c(i, j)));
  for (const auto& e : cc.encoders) b.encoders.push_back(to_float(e.p));
  return b;
}

inline ClusterCorrector corrector_from(const BundleHead& b, int head_dim, TaskKind task) {
  ClusterCorrector cc;
  cc.cluster.head = b.head;
  cc.cluster.task = task;
  cc.cluster.k_star = b.k_star;
  cc.cluster.centers.resize(b.k_star, head_dim);
  for (int i = 0; i < b.k_star; ++i)
    for (int j = 0; j < head_dim; ++j) cc.cluster.centers(i, j) = b.centers[static_cast<std::size_t>(i) * head_dim + j];
  for (const auto& p : b.encoders) {
    Encoder e;
    e.d = head_dim;
    e.p.assign(p.begin(), p.end());
    cc.encoders.push_back(std::move(e));
  }
  cc.trained = true;
  return cc;
}

// The first k heads of each ranked list.
inline InterventionBundle truncate(const InterventionBundle& b, int k) {
  if (k < 1) throw ConfigError("K must be >= 1");
  InterventionBundle t = b;
  t.k = k;
  if (static_cast<int>(t.visual_heads.size()) > k) {
    t.visual_heads.resize(k);
    t.delta_v.resize(k);
  }
  for (auto& v : t.tom)
    if (static_cast<int>(v.size()) > k) v.resize(k);
  return t;
}

inline void validate_bundle(const InterventionBundle& b, const ModelConfig& c) {
  if (b.head_dim != c.head_dim) throw BundleError("bundle head width does not match model");
  if (b.model_hash != config_hash(c)) throw BundleError("bundle was built for a different model config");
  auto in_bounds = [&](HeadId h) { return h.layer >= 0 && h.layer < c.layers && h.head >= 0 && h.head < c.heads; };
  if (b.delta_v.size() != b.visual_heads.size()) throw BundleError("visual offsets do not match head list");
  for (std::size_t i = 0; i < b.visual_heads.size(); ++i) {
    if (!in_bounds(b.visual_heads[i])) throw BundleError("visual head out of bounds");
    if (static_cast<int>(b.delta_v[i].size()) != c.head_dim) throw BundleError("visual offset has wrong width");
  }
  for (const auto& task : b.tom)
    for (const auto& h : task) {
      if (!in_bounds(h.head)) throw BundleError("ToM head out of bounds");
      if (h.k_star < 1 || static_cast<int>(h.encoders.size()) != h.k_star ||
          h.centers.size() != static_cast<std::size_t>(h.k_star) * c.head_dim)
        throw BundleError("corrector shape mismatch");
      for (const auto& e : h.encoders)
        if (e.size() != Encoder::size_for(c.head_dim)) throw BundleError("encoder parameter count mismatch");
    }
}

// Bundle plus decoded correctors, ready for hooked inference.
class Intervention {
 public:
  Intervention(InterventionBundle b, const ModelConfig& c) : b_(std::move(b)) {
    validate_bundle(b_, c);
    for (int t = 0; t < kNumTasks; ++t)
      for (const auto& h : b_.tom[t]) correctors_[t].push_back(corrector_from(h, b_.head_dim, static_cast<TaskKind>(t)));
  }

  const InterventionBundle& bundle() const { return b_; }
  bool needs_trace() const {
    if (b_.variant == Variant::Baseline || b_.variant == Variant::NoText) return false;
    for (const auto& v : correctors_)
      if (!v.empty()) return true;
    return false;
  }

  // Per-head Δ (before α) for one input. trace holds the input's unhooked final-position head outputs.
  std::map<HeadId, std::vector<double>> assemble(TaskKind task, const std::string& sample_id,
                                                 const Mat<double>* trace, int heads) const {
    std::map<HeadId, std::vector<double>> delta;
    if (b_.variant == Variant::Baseline) return delta;
    const int D = b_.head_dim;
    if (b_.variant != Variant::NoVisual)
      for (std::size_t i = 0; i < b_.visual_heads.size(); ++i)
        delta[b_.visual_heads[i]] = std::vector<double>(b_.delta_v[i].begin(), b_.delta_v[i].end());
    if (b_.variant != Variant::NoText) {
      const auto& cs = correctors_[static_cast<int>(task)];
      if (!cs.empty() && !trace) throw BundleError("ToM correction needs the input's head activations");
      for (const auto& cc : cs) {
        const HeadId h = cc.cluster.head;
        Eigen::VectorXd x = trace->row(h.layer * heads + h.head).transpose();
        Eigen::VectorXd t = correct(cc, x);
        auto& v = delta[h];
        if (v.empty()) v.assign(D, 0.0);
        for (int d = 0; d < D; ++d) v[d] += t(d);
      }
    }
    if (b_.variant == Variant::Random) {
      Hasher hs;
      hs.text(sample_id);
      Rng rng(mix_seed(b_.seed, hs.digest()));
      for (auto& [h, v] : delta) {
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        std::vector<double> g(D);
        double gn = 0;
        for (auto& x : g) {
          x = rng.normal();
          gn += x * x;
        }
        gn = std::sqrt(gn);
        for (int d = 0; d < D; ++d) v[d] = gn > 0 ? g[d] * norm / gn : 0.0;
      }
    }
    return delta;
  }

  double signed_alpha() const { return b_.variant == Variant::Negated ? -b_.alpha : b_.alpha; }

 private:
  InterventionBundle b_;
  std::array<std::vector<ClusterCorrector>, kNumTasks> correctors_;
};

struct Prediction {
  int option = -1;
  Vec<double> logits;
  bool invalid = false;
};

// Hooked forward with Δ from assemble; argmax picks the lowest index on ties. Non-finite logits mark
// the prediction invalid.
template <class T>
Prediction apply(const Model<T>& model, const TaskInstance& inst, const Intervention& iv) {
  const auto& c = model.config();
  const auto text = inst.text();
  const std::span<const int> opts(inst.options.data(), inst.options.size());
  Prediction p;
  try {
    const Mat<T> state = model.embed(inst.frames, text);
    std::optional<Mat<double>> trace;
    if (iv.needs_trace()) trace = model.forward(state, opts).trace.template cast<double>();
    auto delta = iv.assemble(inst.kind, inst.id, trace ? &*trace : nullptr, c.heads);
    ForwardOutput<T> out;
    if (delta.empty()) {
      out = model.forward(state, opts);
    } else {
      HookSpec hs;
      hs.alpha = iv.signed_alpha();
      for (auto& [h, v] : delta) hs.targets.push_back({h, std::move(v)});
      out = model.forward(state, opts, &hs);
    }
    p.logits = out.logits.template cast<double>();
    p.option = argmax_lowest(p.logits);
  } catch (const NumericError&) {
    p.invalid = true;
  }
  return p;
}

struct SweepCell {
  TaskKind task = TaskKind::Goal;
  int k = 0;
  double alpha = 0;
  double accuracy = 0;
  int count = 0;
  int invalid = 0;
};

template <class T>
std::vector<SweepCell> evaluate(const Model<T>& model, const Dataset& data, const Intervention& iv) {
  std::array<SweepCell, kNumTasks> cells;
  std::array<int, kNumTasks> ok{};
  for (const auto& d : data) {
    const int t = static_cast<int>(d.kind);
    auto p = apply(model, d, iv);
    ++cells[t].count;
    if (p.invalid)
      ++cells[t].invalid;
    else if (p.option == d.gold)
      ++ok[t];
  }
  std::vector<SweepCell> out;
  for (int t = 0; t < kNumTasks; ++t) {
    cells[t].task = static_cast<TaskKind>(t);
    cells[t].k = iv.bundle().k;
    cells[t].alpha = iv.bundle().alpha;
    cells[t].accuracy = cells[t].count ? static_cast<double>(ok[t]) / cells[t].count : 0.0;
    if (cells[t].count) out.push_back(cells[t]);
  }
  return out;
}

// Accuracy surface over (task, K, alpha) for the bundle's variant.
template <class T>
std::vector<SweepCell> sweep(const Model<T>& model, const Dataset& data, const InterventionBundle& b,
                             const std::vector<int>& ks, const std::vector<double>& alphas) {
  if (ks.empty() || alphas.empty()) throw ConfigError("sweep needs K and alpha values");
  std::vector<SweepCell> out;
  for (int k : ks)
    for (double a : alphas) {
      auto t = truncate(b, k);
      t.alpha = a;
      auto cells = evaluate(model, data, Intervention(t, model.config()));
      out.insert(out.end(), cells.begin(), cells.end());
    }
  return out;
}

inline constexpr char kBundleMagic[9] = "VTOMBNDL";
inline constexpr std::uint32_t kBundleVersion = 1;

inline void save_bundle(const std::string& path, const InterventionBundle& b) {
  {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path);
    BinWriter w(os);
    w.magic(kBundleMagic);
    w.put<std::uint32_t>(kBundleVersion);
    w.put<std::uint64_t>(b.model_hash);
    w.put<std::int32_t>(b.k);
    w.put<double>(b.alpha);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.variant));
    w.put<std::uint64_t>(b.seed);
    w.put<std::int32_t>(b.head_dim);
    w.put<std::int32_t>(b.offset_samples);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.visual_heads.size()));
    for (std::size_t i = 0; i < b.visual_heads.size(); ++i) {
      w.put<std::int32_t>(b.visual_heads[i].layer);
      w.put<std::int32_t>(b.visual_heads[i].head);
      w.put_array(b.delta_v[i].data(), b.delta_v[i].size());
    }
    for (const auto& task : b.tom) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(task.size()));
      for (const auto& h : task) {
        w.put<std::int32_t>(h.head.layer);
        w.put<std::int32_t>(h.head.head);
        w.put<std::int32_t>(h.k_star);
        w.put_array(h.centers.data(), h.centers.size());
        for (const auto& e : h.encoders) w.put_array(e.data(), e.size());
      }
    }
    if (!os) throw FormatError("write failed: " + path);
  }
  auto heads_json = [](const std::vector<HeadId>& hs) {
    nlohmann::json a = nlohmann::json::array();
    for (auto h : hs) a.push_back({h.layer, h.head});
    return a;
  };
  nlohmann::json tom = nlohmann::json::object();
  for (int t = 0; t < kNumTasks; ++t) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& h : b.tom[t]) a.push_back({{"head", {h.head.layer, h.head.head}}, {"k_star", h.k_star}});
    tom[task_name(static_cast<TaskKind>(t))] = a;
  }
  nlohmann::json m = {{"format", "visiontom-bundle"},
                      {"version", kBundleVersion},
                      {"model_hash", hex64(b.model_hash)},
                      {"k", b.k},
                      {"alpha", b.alpha},
                      {"variant", variant_name(b.variant)},
                      {"seed", b.seed},
                      {"offset_samples", b.offset_samples},
                      {"visual_heads", heads_json(b.visual_heads)},
                      {"tom_heads", tom},
                      {"hash", hex64(hash_file(path))}};
  std::ofstream ms(path + ".json");
  ms << m.dump(2) << '\n';
}

inline InterventionBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  BinReader r(is);
  r.expect_magic(kBundleMagic);
  const auto ver = r.get<std::uint32_t>();
  if (ver != kBundleVersion) throw FormatError("bundle version " + std::to_string(ver) + " unsupported");
  InterventionBundle b;
  b.model_hash = r.get<std::uint64_t>();
  b.k = r.get<std::int32_t>();
  b.alpha = r.get<double>();
  const auto v = r.get<std::uint8_t>();
  if (v > static_cast<std::uint8_t>(Variant::Baseline)) throw FormatError("bad variant in bundle");
  b.variant = static_cast<Variant>(v);
  b.seed = r.get<std::uint64_t>();
  b.head_dim = r.get<std::int32_t>();
  b.offset_samples = r.get<std::int32_t>();
  const int D = b.head_dim;
  if (D < 1 || D > 4096) throw FormatError("bad head width in bundle");
  const auto nv = r.get<std::uint32_t>();
  if (nv > 65536) throw FormatError("bad head count in bundle");
  for (std::uint32_t i = 0; i < nv; ++i) {
    HeadId h{r.get<std::int32_t>(), r.get<std::int32_t>()};
    std::vector<float> d(D);
    r.get_array(d.data(), d.size());
    b.visual_heads.push_back(h);
    b.delta_v.push_back(std::move(d));
  }
  for (auto& task : b.tom) {
    const auto n = r.get<std::uint32_t>();
    if (n > 65536) throw FormatError("bad head count in bundle");
    for (std::uint32_t i = 0; i < n; ++i) {
      BundleHead h;
      h.head = {r.get<std::int32_t>(), r.get<std::int32_t>()};
      h.k_star = r.get<std::int32_t>();
      if (h.k_star < 1 || h.k_star > kMaxClusters) throw FormatError("bad cluster count in bundle");
      h.centers.resize(static_cast<std::size_t>(h.k_star) * D);
      r.get_array(h.centers.data(), h.centers.size());
      for (int c = 0; c < h.k_star; ++c) {
        std::vector<float> e(Encoder::size_for(D));
        r.get_array(e.data(), e.size());
        h.encoders.push_back(std::move(e));
      }
      task.push_back(std::move(h));
    }
  }
  r.expect_end();
  return b;
}

}  // namespace vtom
