#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "adversary.hpp"
#include "capture.hpp"
#include "errors.hpp"
#include "intervene.hpp"
#include "io.hpp"
#include "model.hpp"
#include "probes.hpp"
#include "separator.hpp"
#include "tasks.hpp"
#include "train.hpp"

namespace vtom {

namespace fs = std::filesystem;
using nlohmann::json;

struct PipelineConfig {
  TaskConfig task;
  ModelConfig model;  // shape and init; vocabulary and visual layout come from the task
  int train_per_task = 2000;
  int val_per_task = 100;
  TrainConfig train;
  int bench_per_task = 300;
  double split_ratio = 0.3;
  AttackConfig attack = [] {
    AttackConfig a;
    a.iters = 40;
    return a;
  }();
  ProbeConfig probe;
  EncoderTraining encoder;
  int k = 16;
  double alpha = 1.0;
  std::vector<Variant> variants = {kAllVariants.begin(), kAllVariants.end()};
  std::vector<int> sweep_ks = {4, 8, 16};
  std::vector<double> sweep_alphas = {-2, -1, -0.5, -0.25, 0, 0.25, 0.5, 1, 2, 4};
  std::uint64_t seed = 42;
  std::string out_dir = "run";

  ModelConfig model_config() const {
    ModelConfig m = model_config_for(task, model);
    m.seed = seed;
    return m;
  }

  void validate() const {
    model_config().validate();
    train.validate();
    attack.validate();
    if (train_per_task < 1 || bench_per_task < 2 || val_per_task < 0) throw ConfigError("dataset sizes must be positive");
    if (!(split_ratio > 0 && split_ratio < 1)) throw ConfigError("split_ratio must be in (0, 1)");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (variants.empty()) throw ConfigError("variant list is empty");
    if (sweep_ks.empty() || sweep_alphas.empty()) throw ConfigError("sweep lists must be nonempty");
    if (probe.steps < 0 || !(probe.lr > 0) || !(probe.val_fraction > 0 && probe.val_fraction < 1))
      throw ConfigError("bad probe settings");
    if (encoder.steps < 0 || !(encoder.lr > 0)) throw ConfigError("bad encoder settings");
    if (task.noise_max < 0) throw ConfigError("noise_max must be >= 0");
  }
};

inline json to_json(const PipelineConfig& c) {
  json variants = json::array();
  for (auto v : c.variants) variants.push_back(variant_name(v));
  return {{"task", to_json(c.task)},
          {"model",
           {{"layers", c.model.layers},
            {"heads", c.model.heads},
            {"head_dim", c.model.head_dim},
            {"code_bandwidth", c.model.code_bandwidth},
            {"code_gain", c.model.code_gain}}},
          {"train_per_task", c.train_per_task},
          {"val_per_task", c.val_per_task},
          {"train", {{"epochs", c.train.epochs}, {"lr", c.train.lr}, {"batch", c.train.batch}}},
          {"bench_per_task", c.bench_per_task},
          {"split_ratio", c.split_ratio},
          {"attack",
           {{"epsilon", c.attack.epsilon},
            {"step", c.attack.step},
            {"iters", c.attack.iters},
            {"sigma_low", c.attack.sigma_low},
            {"sigma_high", c.attack.sigma_high}}},
          {"probe",
           {{"l2", c.probe.l2},
            {"steps", c.probe.steps},
            {"lr", c.probe.lr},
            {"val_fraction", c.probe.val_fraction},
            {"balanced", c.probe.balanced}}},
          {"encoder", {{"steps", c.encoder.steps}, {"lr", c.encoder.lr}}},
          {"k", c.k},
          {"alpha", c.alpha},
          {"variants", variants},
          {"sweep_ks", c.sweep_ks},
          {"sweep_alphas", c.sweep_alphas},
          {"seed", c.seed},
          {"out_dir", c.out_dir}};
}

// Keys absent from j keep their defaults; unknown keys are rejected.
inline PipelineConfig pipeline_config_from_json(const json& j) {
  PipelineConfig c;
  const json ref = to_json(c);
  std::function<void(const json&, const json&, const std::string&)> check = [&](const json& a, const json& r,
                                                                                const std::string& at) {
    if (!a.is_object()) return;
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (!r.contains(it.key())) throw ConfigError("unknown config key: " + at + it.key());
      if (it.key() != "task") check(it.value(), r.at(it.key()), at + it.key() + ".");
    }
  };
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check(j, ref, "");
  try {
    if (j.contains("task")) c.task = task_config_from_json(j.at("task"));
    auto get = [&](const json& o, const char* key, auto& dst) {
      if (o.contains(key)) dst = o.at(key).get<std::decay_t<decltype(dst)>>();
    };
    if (j.contains("model")) {
      const auto& m = j.at("model");
      get(m, "layers", c.model.layers);
      get(m, "heads", c.model.heads);
      get(m, "head_dim", c.model.head_dim);
      get(m, "code_bandwidth", c.model.code_bandwidth);
      get(m, "code_gain", c.model.code_gain);
    }
    get(j, "train_per_task", c.train_per_task);
    get(j, "val_per_task", c.val_per_task);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      get(t, "epochs", c.train.epochs);
      get(t, "lr", c.train.lr);
      get(t, "batch", c.train.batch);
    }
    get(j, "bench_per_task", c.bench_per_task);
    get(j, "split_ratio", c.split_ratio);
    if (j.contains("attack")) {
      const auto& a = j.at("attack");
      get(a, "epsilon", c.attack.epsilon);
      get(a, "step", c.attack.step);
      get(a, "iters", c.attack.iters);
      get(a, "sigma_low", c.attack.sigma_low);
      get(a, "sigma_high", c.attack.sigma_high);
    }
    if (j.contains("probe")) {
      const auto& p = j.at("probe");
      get(p, "l2", c.probe.l2);
      get(p, "steps", c.probe.steps);
      get(p, "lr", c.probe.lr);
      get(p, "val_fraction", c.probe.val_fraction);
      get(p, "balanced", c.probe.balanced);
    }
    if (j.contains("encoder")) {
      get(j.at("encoder"), "steps", c.encoder.steps);
      get(j.at("encoder"), "lr", c.encoder.lr);
    }
    get(j, "k", c.k);
    get(j, "alpha", c.alpha);
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
    }
    get(j, "sweep_ks", c.sweep_ks);
    get(j, "sweep_alphas", c.sweep_alphas);
    get(j, "seed", c.seed);
    get(j, "out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  c.train.seed = c.seed;
  c.attack.seed = c.seed;
  c.encoder.seed = c.seed;
  c.validate();
  return c;
}

// Sets a dotted key ("attack.iters") from command-line text; the value is parsed as JSON when
// possible, otherwise taken as a string.
inline void set_config_key(json& j, const std::string& dotted, const std::string& text) {
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* at = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("bad config key: " + dotted);
    if (dot == std::string::npos) {
      (*at)[key] = value;
      return;
    }
    if (!at->contains(key) || !(*at)[key].is_object()) (*at)[key] = json::object();
    at = &(*at)[key];
    start = dot + 1;
  }
}

// Seeds for each consumer, all derived from the global seed.
struct StageSeeds {
  std::uint64_t train_data, val_data, bench_data, split, probe, cluster;
  explicit StageSeeds(std::uint64_t s)
      : train_data(mix_seed(s, 1)),
        val_data(mix_seed(s, 2)),
        bench_data(mix_seed(s, 3)),
        split(mix_seed(s, 4)),
        probe(mix_seed(s, 5)),
        cluster(mix_seed(s, 6)) {}
};

// ---------------------------------------------------------------------------------------------
// Results

struct GridRow {
  Variant variant = Variant::Baseline;
  std::array<double, kNumTasks> accuracy{};
  std::array<int, kNumTasks> count{};
  std::array<int, kNumTasks> invalid{};
  bool operator==(const GridRow&) const = default;
};

struct ResultGrid {
  std::vector<GridRow> rows;
  json meta = json::object();
  bool operator==(const ResultGrid&) const = default;

  const GridRow* find(Variant v) const {
    for (const auto& r : rows)
      if (r.variant == v) return &r;
    return nullptr;
  }
};

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json to_json(const ResultGrid& g) {
  json rows = json::array();
  for (const auto& r : g.rows)
    rows.push_back({{"variant", variant_name(r.variant)}, {"accuracy", r.accuracy}, {"count", r.count}, {"invalid", r.invalid}});
  return {{"rows", rows}, {"meta", g.meta}};
}

inline ResultGrid grid_from_json(const json& j) {
  ResultGrid g;
  for (const auto& r : j.at("rows")) {
    GridRow row;
    row.variant = parse_variant(r.at("variant").get<std::string>());
    row.accuracy = r.at("accuracy").get<std::array<double, kNumTasks>>();
    row.count = r.at("count").get<std::array<int, kNumTasks>>();
    row.invalid = r.at("invalid").get<std::array<int, kNumTasks>>();
    g.rows.push_back(row);
  }
  g.meta = j.value("meta", json::object());
  return g;
}

inline void report(const ResultGrid& g, const std::string& format, std::ostream& os) {
  if (format == "csv") {
    os << "variant,goal,belief,action,count_goal,count_belief,count_action,invalid_goal,invalid_belief,invalid_action\n";
    for (const auto& r : g.rows) {
      os << variant_name(r.variant);
      for (double a : r.accuracy) os << ',' << fmt17(a);
      for (int c : r.count) os << ',' << c;
      for (int c : r.invalid) os << ',' << c;
      os << '\n';
    }
  } else if (format == "json") {
    os << to_json(g).dump(2) << '\n';
  } else if (format == "markdown") {
    os << "| Method | Goal | Belief | Action |\n|---|---|---|---|\n";
    char buf[32];
    for (const auto& r : g.rows) {
      os << "| " << variant_label(r.variant);
      for (double a : r.accuracy) {
        std::snprintf(buf, sizeof buf, "%.1f", 100.0 * a);
        os << " | " << buf;
      }
      os << " |\n";
    }
  } else {
    throw ConfigError("unknown report format: " + format);
  }
}

inline void report(const ResultGrid& g, const std::string& format, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path);
  report(g, format, os);
}

// ---------------------------------------------------------------------------------------------
// Run directory and provenance

class RunDir {
 public:
  explicit RunDir(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
    if (fs::exists(prov_path())) {
      std::ifstream is(prov_path());
      prov_ = json::parse(is);
    } else {
      prov_ = {{"stages", json::object()}, {"label_access", json::array()}};
    }
  }

  const fs::path& root() const { return root_; }
  std::string path(const std::string& rel) const {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    return p.string();
  }
  bool has(const std::string& rel) const { return fs::exists(root_ / rel); }
  json& provenance() { return prov_; }

  void record_stage(const std::string& stage, const std::vector<std::string>& outputs, double seconds,
                    const json& extra = json::object()) {
    json out = json::object();
    for (const auto& o : outputs) {
      out[o] = hex64(hash_file((root_ / o).string()));
      if (fs::exists(root_ / (o + ".json"))) out[o + ".json"] = hex64(hash_file((root_ / (o + ".json")).string()));
    }
    prov_["stages"][stage] = {{"outputs", out}, {"seconds", seconds}, {"info", extra}};
    save();
  }

  void note_label_access(const std::string& stage) {
    prov_["label_access"].push_back(stage);
    save();
  }

  void save() const {
    std::ofstream os(prov_path());
    os << prov_.dump(2) << '\n';
  }

 private:
  std::string prov_path() const { return (root_ / "provenance.json").string(); }
  fs::path root_;
  json prov_;
};

inline constexpr const char* kCalibrationFile = "data/calibration.jsonl";
inline constexpr const char* kEvaluationFile = "data/evaluation.jsonl";

// Stages allowed to read evaluation-split labels.
inline bool may_read_eval_labels(const std::string& stage) { return stage == "evaluate" || stage == "sweep"; }

class StageTimer {
 public:
  StageTimer() : t0_(std::chrono::steady_clock::now()) {}
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_;
};

inline Model<float> load_model(RunDir& run) {
  if (!run.has("model/toy.ckpt")) throw StateError("missing model checkpoint; run train-toy first");
  return Model<float>(load_checkpoint(run.path("model/toy.ckpt")).cast<float>());
}

inline Dataset load_split(RunDir& run, const char* file, const std::string& stage) {
  if (!run.has(file)) throw StateError(std::string("missing ") + file + "; run generate first");
  if (std::string(file) == kEvaluationFile) {
    if (!may_read_eval_labels(stage)) throw StateError("stage " + stage + " may not read evaluation labels");
    run.note_label_access(stage);
  }
  return load_dataset(run.path(file)).second;
}

// ---------------------------------------------------------------------------------------------
// Stages

inline void stage_generate(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  const StageSeeds s(c.seed);
  save_dataset(run.path("data/train.jsonl"), c.task, generate(c.task, c.train_per_task, s.train_data));
  if (c.val_per_task > 0) save_dataset(run.path("data/val.jsonl"), c.task, generate(c.task, c.val_per_task, s.val_data));
  auto bench = generate(c.task, c.bench_per_task, s.bench_data);
  auto sp = split(bench, c.split_ratio, s.split);
  save_dataset(run.path(kCalibrationFile), c.task, sp.calibration);
  save_dataset(run.path(kEvaluationFile), c.task, sp.evaluation);
  std::vector<std::string> outs = {"data/train.jsonl", kCalibrationFile, kEvaluationFile};
  if (c.val_per_task > 0) outs.push_back("data/val.jsonl");
  run.record_stage("generate", outs, t.seconds(),
                   {{"calibration", sp.calibration.size()}, {"evaluation", sp.evaluation.size()}});
}

inline void stage_train(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto train = load_dataset(run.path("data/train.jsonl")).second;
  Dataset val;
  if (run.has("data/val.jsonl")) val = load_dataset(run.path("data/val.jsonl")).second;
  auto res = train_toy(init_weights(c.model_config()), train, val, c.train);
  save_checkpoint(run.path("model/toy.ckpt"), res.weights);
  json curve = json::array();
  for (const auto& e : res.curve)
    curve.push_back({{"epoch", e.epoch},
                     {"loss", e.loss},
                     {"train_accuracy", e.train_accuracy},
                     {"val_accuracy", e.val_accuracy},
                     {"val_task", e.val_task}});
  std::ofstream(run.path("model/curve.json")) << curve.dump(2) << '\n';
  const double final_val = res.curve.empty() ? 0.0 : res.curve.back().val_accuracy;
  run.record_stage("train-toy", {"model/toy.ckpt", "model/curve.json"}, t.seconds(),
                   {{"val_accuracy", final_val}, {"model_hash", hex64(config_hash(c.model_config()))}});
}

inline constexpr char kAdvMagic[9] = "VTOMADVX";

inline void save_attacks(const std::string& path, const Dataset& data, const std::vector<AttackResult>& adv) {
  std::ofstream os(path, std::ios::binary);
  BinWriter w(os);
  w.magic(kAdvMagic);
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i) {
    w.put_string(data[i].id);
    w.put<std::uint8_t>(adv[i].failed ? 1 : 0);
    w.put<double>(adv[i].sigma);
    w.put<std::uint64_t>(adv[i].frames.size());
    w.put_array(adv[i].frames.data(), adv[i].frames.size());
  }
  if (!os) throw FormatError("write failed: " + path);
}

inline std::vector<AttackResult> load_attacks(const std::string& path, const Dataset& data) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  BinReader r(is);
  r.expect_magic(kAdvMagic);
  if (r.get<std::uint32_t>() != 1) throw FormatError("unsupported perturbation file version");
  const auto n = r.get<std::uint64_t>();
  if (n != data.size()) throw PairingError("perturbation count does not match calibration split");
  std::vector<AttackResult> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (r.get_string() != data[i].id) throw PairingError("perturbation order does not match calibration split");
    out[i].failed = r.get<std::uint8_t>() != 0;
    out[i].sigma = r.get<double>();
    const auto m = r.get<std::uint64_t>();
    if (m != data[i].frames.size()) throw FormatError("perturbed frame size mismatch");
    out[i].frames.resize(m);
    r.get_array(out[i].frames.data(), m);
  }
  r.expect_end();
  return out;
}

inline json impact_json(const AttackImpact& a) {
  return {{"clean", a.clean.acc},
          {"perturbed", a.perturbed.acc},
          {"count", a.clean.count},
          {"invalid", a.perturbed.invalid},
          {"max_linf", a.max_linf},
          {"in_range", a.in_range},
          {"failed", a.failed}};
}

// PGD and Gaussian noise on the calibration split; PGD frames are kept for capture.
inline void stage_attack(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto model = load_model(run);
  auto cal = load_split(run, kCalibrationFile, "attack");
  std::vector<AttackResult> adv;
  AttackConfig pg = c.attack;
  pg.mode = AttackConfig::Mode::Pgd;
  auto pgd_impact = attack_impact(model, cal, pg, &adv);
  AttackConfig gs = c.attack;
  gs.mode = AttackConfig::Mode::Gaussian;
  auto noise_impact = attack_impact(model, cal, gs);
  save_attacks(run.path("attack/pgd.bin"), cal, adv);
  json j = {{"pgd", impact_json(pgd_impact)}, {"gaussian", impact_json(noise_impact)}, {"epsilon", pg.epsilon},
            {"iters", pg.iters}};
  std::ofstream(run.path("attack/impact.json")) << j.dump(2) << '\n';
  run.record_stage("attack", {"attack/pgd.bin", "attack/impact.json"}, t.seconds());
}

inline void stage_capture(const PipelineConfig&, RunDir& run) {
  StageTimer t;
  auto model = load_model(run);
  auto cal = load_split(run, kCalibrationFile, "capture");
  auto adv = load_attacks(run.path("attack/pgd.bin"), cal);
  const auto& mc = model.config();
  RecordStore store(mc.layers, mc.heads, mc.head_dim);
  for (auto& r : visual_pairs(model, cal, adv)) store.append(std::move(r));
  for (auto& r : collect_text_pairs(model, cal)) store.append(std::move(r));
  save_records(run.path("records/store.bin"), store);
  run.record_stage("capture", {"records/store.bin"}, t.seconds(), {{"records", store.size()}});
}

struct Selection {
  std::vector<HeadId> visual;
  std::array<std::vector<HeadId>, kNumTasks> tom;
};

inline json heads_to_json(const std::vector<HeadId>& hs) {
  json a = json::array();
  for (auto h : hs) a.push_back({h.layer, h.head});
  return a;
}

inline std::vector<HeadId> heads_from_json(const json& j) {
  std::vector<HeadId> out;
  for (const auto& h : j) out.push_back({h.at(0).get<int>(), h.at(1).get<int>()});
  return out;
}

inline Selection load_selection(RunDir& run) {
  if (!run.has("probes/selection.json")) throw StateError("missing head selection; run probe first");
  std::ifstream is(run.path("probes/selection.json"));
  json j = json::parse(is);
  Selection s;
  s.visual = heads_from_json(j.at("visual"));
  for (int t = 0; t < kNumTasks; ++t) s.tom[t] = heads_from_json(j.at("tom").at(task_name(static_cast<TaskKind>(t))));
  return s;
}

// Rows of one head for the given records.
inline Eigen::MatrixXd head_rows(const std::vector<const HeadActivationMap*>& recs, HeadId h) {
  if (recs.empty()) return {};
  Eigen::MatrixXd m(recs.size(), recs[0]->head_dim);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const float* p = recs[i]->head(h.layer, h.head);
    for (int d = 0; d < recs[i]->head_dim; ++d) m(i, d) = p[d];
  }
  return m;
}

inline void stage_probe(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto store = load_records(run.path("records/store.bin"));
  const StageSeeds seeds(c.seed);
  std::vector<Heatmap> visual, text;
  for (auto task : kAllTasks) {
    visual.push_back(probe_heatmap(store, Dimension::Visual, task, seeds.probe, c.probe));
    text.push_back(probe_heatmap(store, Dimension::Text, task, seeds.probe, c.probe));
  }
  std::vector<Heatmap> all = visual;
  all.insert(all.end(), text.begin(), text.end());
  {
    std::ofstream os(run.path("probes/heatmap.csv"));
    write_heatmap_csv(os, all);
  }
  auto vsel = select_heads(visual, c.k, true)[0];
  auto tsel = select_heads(text, c.k, false);
  json tom = json::object();
  for (int k = 0; k < kNumTasks; ++k) tom[task_name(static_cast<TaskKind>(k))] = heads_to_json(tsel[k].selected);
  json sel = {{"k", c.k}, {"visual", heads_to_json(vsel.selected)}, {"tom", tom}, {"chance", kChanceAccuracy}};
  std::ofstream(run.path("probes/selection.json")) << sel.dump(2) << '\n';

  // Geometry of the best head per (dimension, task).
  json geo = json::array();
  for (const auto& hm : all) {
    auto best = rank_heads(hm.acc, hm.layers, hm.heads, 1).selected[0];
    auto pos = store.query(hm.dimension, hm.task, Label::Pos);
    auto neg = store.query(hm.dimension, hm.task, Label::Neg);
    std::vector<const HeadActivationMap*> recs(pos.begin(), pos.end());
    recs.insert(recs.end(), neg.begin(), neg.end());
    std::vector<int> labels(pos.size(), 1);
    labels.resize(recs.size(), 0);
    try {
      auto p = pca_project(head_rows(recs, best), 2);
      auto g = geometry_json(p, kde_density(p.projected), labels);
      g["dimension"] = dimension_name(hm.dimension);
      g["task"] = task_name(hm.task);
      g["head"] = {best.layer, best.head};
      geo.push_back(g);
    } catch (const DegenerateDataError&) {
    }
  }
  std::ofstream(run.path("probes/geometry.json")) << geo.dump() << '\n';
  run.record_stage("probe", {"probes/heatmap.csv", "probes/selection.json", "probes/geometry.json"}, t.seconds());
}

inline void write_cluster_csv(std::ostream& os, const std::vector<ClusterCorrector>& ccs) {
  os << "task,layer,head,k,silhouette,sse,ch,chosen\n";
  for (const auto& cc : ccs)
    for (const auto& m : cc.cluster.report) {
      if (!m.feasible) continue;
      os << task_name(cc.cluster.task) << ',' << cc.cluster.head.layer << ',' << cc.cluster.head.head << ',' << m.k
         << ',' << fmt17(m.silhouette) << ',' << fmt17(m.sse) << ',' << fmt17(m.ch) << ','
         << (m.k == cc.cluster.k_star ? 1 : 0) << '\n';
    }
}

// Per task and selected ToM head: cluster the negatives, train one encoder per cluster.
inline void stage_cluster(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto store = load_records(run.path("records/store.bin"));
  auto sel = load_selection(run);
  const StageSeeds seeds(c.seed);
  std::vector<ClusterCorrector> all;
  InterventionBundle partial;
  const auto mc = c.model_config();
  partial.model_hash = config_hash(mc);
  partial.head_dim = mc.head_dim;
  partial.seed = c.seed;
  std::vector<std::string> warnings;
  json curves = json::array();
  for (auto task : kAllTasks) {
    auto negs = store.query(Dimension::Text, task, Label::Neg);
    std::vector<const HeadActivationMap*> pos;
    for (auto* n : negs) {
      const auto* p = store.find(n->sample_id + "/text/pos/-1");
      if (!p) throw PairingError("no positive for " + n->key());
      pos.push_back(p);
    }
    for (auto h : sel.tom[static_cast<int>(task)]) {
      EncoderTraining et = c.encoder;
      et.seed = mix_seed(seeds.cluster, static_cast<std::uint64_t>(h.layer * 1000 + h.head) * 8 + static_cast<int>(task));
      auto cc = fit_corrector(h, task, head_rows(negs, h), head_rows(pos, h), et, &warnings);
      for (int k = 0; k < cc.cluster.k_star; ++k) {
        const auto& cur = cc.loss_curves[k];
        curves.push_back({{"task", task_name(task)},
                          {"head", {h.layer, h.head}},
                          {"cluster", k},
                          {"initial", cur.empty() ? 0.0 : cur.front()},
                          {"final", cur.empty() ? 0.0 : cur.back()}});
      }
      partial.tom[static_cast<int>(task)].push_back(bundle_head(cc));
      all.push_back(std::move(cc));
    }
  }
  {
    std::ofstream os(run.path("clusters/metrics.csv"));
    write_cluster_csv(os, all);
  }
  std::ofstream(run.path("clusters/curves.json")) << json({{"curves", curves}, {"warnings", warnings}}).dump(2) << '\n';
  save_bundle(run.path("clusters/correctors.bin"), partial);
  run.record_stage("cluster", {"clusters/metrics.csv", "clusters/curves.json", "clusters/correctors.bin"}, t.seconds());
}

inline InterventionBundle build_bundle(const PipelineConfig& c, const RecordStore& store, const Selection& sel,
                                       const InterventionBundle& correctors) {
  std::vector<const HeadActivationMap*> pos, neg;
  for (auto task : kAllTasks) {
    auto p = store.query(Dimension::Visual, task, Label::Pos);
    auto n = store.query(Dimension::Visual, task, Label::Neg);
    pos.insert(pos.end(), p.begin(), p.end());
    neg.insert(neg.end(), n.begin(), n.end());
  }
  auto field = compute_visual_offsets(pos, neg, sel.visual);
  InterventionBundle b = correctors;
  b.k = c.k;
  b.alpha = c.alpha;
  b.variant = Variant::Full;
  b.seed = c.seed;
  b.offset_samples = field.samples;
  b.visual_heads = field.heads;
  b.delta_v.clear();
  for (const auto& d : field.delta) b.delta_v.push_back(to_float(d));
  return b;
}

inline void stage_build_bundle(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto store = load_records(run.path("records/store.bin"));
  auto sel = load_selection(run);
  auto correctors = load_bundle(run.path("clusters/correctors.bin"));
  auto b = build_bundle(c, store, sel, correctors);
  validate_bundle(b, c.model_config());
  save_bundle(run.path("bundle/bundle.bin"), b);
  run.record_stage("build-bundle", {"bundle/bundle.bin"}, t.seconds());
}

inline InterventionBundle load_run_bundle(const PipelineConfig& c, RunDir& run) {
  if (!run.has("bundle/bundle.bin")) throw StateError("missing bundle; run build-bundle first");
  auto b = load_bundle(run.path("bundle/bundle.bin"));
  b.alpha = c.alpha;
  return truncate(b, c.k);
}

template <class T>
ResultGrid evaluate_variants(const Model<T>& model, const Dataset& eval, const InterventionBundle& base,
                             const std::vector<Variant>& variants) {
  ResultGrid g;
  for (auto v : variants) {
    auto b = base;
    b.variant = v;
    auto cells = evaluate(model, eval, Intervention(b, model.config()));
    GridRow row;
    row.variant = v;
    for (const auto& cell : cells) {
      const int k = static_cast<int>(cell.task);
      row.accuracy[k] = cell.accuracy;
      row.count[k] = cell.count;
      row.invalid[k] = cell.invalid;
    }
    g.rows.push_back(row);
  }
  return g;
}

inline void stage_evaluate(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto model = load_model(run);
  auto bundle = load_run_bundle(c, run);
  auto eval = load_split(run, kEvaluationFile, "evaluate");
  auto grid = evaluate_variants(model, eval, bundle, c.variants);
  grid.meta = {{"seed", c.seed},
               {"k", c.k},
               {"alpha", c.alpha},
               {"instances", eval.size()},
               {"model_hash", hex64(config_hash(model.config()))}};
  for (const auto* fmt : {"csv", "json", "markdown"})
    report(grid, fmt, run.path(std::string("results/grid.") + (std::string(fmt) == "markdown" ? "md" : fmt)));
  run.record_stage("evaluate", {"results/grid.csv", "results/grid.json", "results/grid.md"}, t.seconds());
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepCell>& cells) {
  os << "task,k,alpha,accuracy,count,invalid\n";
  for (const auto& s : cells)
    os << task_name(s.task) << ',' << s.k << ',' << fmt17(s.alpha) << ',' << fmt17(s.accuracy) << ',' << s.count << ','
       << s.invalid << '\n';
}

inline void stage_sweep(const PipelineConfig& c, RunDir& run) {
  StageTimer t;
  auto model = load_model(run);
  if (!run.has("bundle/bundle.bin")) throw StateError("missing bundle; run build-bundle first");
  auto bundle = truncate(load_bundle(run.path("bundle/bundle.bin")), *std::max_element(c.sweep_ks.begin(), c.sweep_ks.end()));
  bundle.variant = Variant::Full;
  auto eval = load_split(run, kEvaluationFile, "sweep");
  auto cells = sweep(model, eval, bundle, c.sweep_ks, c.sweep_alphas);
  std::ofstream os(run.path("results/sweep.csv"));
  write_sweep_csv(os, cells);
  os.close();
  run.record_stage("sweep", {"results/sweep.csv"}, t.seconds());
}

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> n = {"generate", "train-toy", "attack",   "capture",
                                             "probe",    "cluster",   "build-bundle", "evaluate", "sweep"};
  return n;
}

inline void run_stage(const std::string& name, const PipelineConfig& c, RunDir& run) {
  try {
    if (name == "generate") return stage_generate(c, run);
    if (name == "train-toy") return stage_train(c, run);
    if (name == "attack") return stage_attack(c, run);
    if (name == "capture") return stage_capture(c, run);
    if (name == "probe") return stage_probe(c, run);
    if (name == "cluster") return stage_cluster(c, run);
    if (name == "build-bundle") return stage_build_bundle(c, run);
    if (name == "evaluate") return stage_evaluate(c, run);
    if (name == "sweep") return stage_sweep(c, run);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw Error("stage " + name + " failed: " + e.what());
  }
  throw ConfigError("unknown stage: " + name);
}

inline void record_config(const PipelineConfig& c, RunDir& rd) {
  rd.provenance()["config"] = to_json(c);
  rd.provenance()["seeds"] = {{"global", c.seed}, {"model_init", c.model_config().seed}};
  rd.save();
}

// All stages in order; returns the evaluation grid.
inline ResultGrid run(const PipelineConfig& c, RunDir& rd) {
  c.validate();
  record_config(c, rd);
  for (const auto& s : stage_names()) run_stage(s, c, rd);
  std::ifstream is(rd.path("results/grid.json"));
  return grid_from_json(json::parse(is));
}

// ---------------------------------------------------------------------------------------------
// Audit

struct AuditResult {
  std::vector<std::string> violations;
  json summary = json::object();
  bool ok() const { return violations.empty(); }
};

inline AuditResult audit(const fs::path& dir) {
  AuditResult a;
  auto fail = [&](const std::string& m) { a.violations.push_back(m); };
  if (!fs::exists(dir / "provenance.json")) {
    fail("missing provenance.json");
    return a;
  }
  json prov;
  {
    std::ifstream is(dir / "provenance.json");
    try {
      prov = json::parse(is);
    } catch (const json::exception& e) {
      fail(std::string("unreadable provenance: ") + e.what());
      return a;
    }
  }
  // Recorded artifact hashes.
  int checked = 0;
  const json stages = prov.value("stages", json::object());
  for (auto& [stage, info] : stages.items())
    for (auto& [file, hash] : info.at("outputs").items()) {
      const auto p = dir / file;
      if (!fs::exists(p)) {
        fail("missing artifact " + file);
        continue;
      }
      ++checked;
      if (hex64(hash_file(p.string())) != hash.get<std::string>()) fail("hash mismatch: " + file);
    }
  a.summary["artifacts_checked"] = checked;

  // Seeds.
  if (!prov.contains("config") || !prov.contains("seeds"))
    fail("seed record missing");
  else if (prov["seeds"].value("global", std::uint64_t{0}) != prov["config"].value("seed", std::uint64_t{1}))
    fail("seed record does not match config");

  // Split disjointness by id and by frame content; records only from calibration instances.
  std::set<std::string> eval_ids;
  std::set<std::uint64_t> eval_frames;
  if (fs::exists(dir / kEvaluationFile) && fs::exists(dir / kCalibrationFile)) {
    auto ev = load_dataset((dir / kEvaluationFile).string()).second;
    auto cal = load_dataset((dir / kCalibrationFile).string()).second;
    for (const auto& d : ev) {
      eval_ids.insert(d.id);
      eval_frames.insert(hash_frames(d.frames));
    }
    for (const auto& d : cal) {
      if (eval_ids.count(d.id)) fail("instance " + d.id + " is in both calibration and evaluation splits");
      else if (eval_frames.count(hash_frames(d.frames))) fail("instance " + d.id + " duplicates an evaluation instance");
    }
    a.summary["calibration"] = cal.size();
    a.summary["evaluation"] = ev.size();
  } else {
    fail("missing split files");
  }
  if (fs::exists(dir / "records/store.bin")) {
    try {
      auto store = load_records((dir / "records/store.bin").string());
      std::set<std::string> bad;
      for (const auto& r : store.records())
        if (eval_ids.count(r.sample_id)) bad.insert(r.sample_id);
      for (const auto& id : bad) fail("evaluation instance " + id + " appears in calibration records");
      a.summary["records"] = store.size();
    } catch (const Error& e) {
      fail(std::string("record store unreadable: ") + e.what());
    }
  }

  // Bundle integrity and model binding.
  if (fs::exists(dir / "bundle/bundle.bin")) {
    try {
      auto b = load_bundle((dir / "bundle/bundle.bin").string());
      std::ifstream ms(dir / "bundle/bundle.bin.json");
      json m = json::parse(ms);
      if (m.at("hash").get<std::string>() != hex64(hash_file((dir / "bundle/bundle.bin").string())))
        fail("bundle manifest hash mismatch");
      if (fs::exists(dir / "model/toy.ckpt")) {
        auto w = load_checkpoint((dir / "model/toy.ckpt").string());
        if (b.model_hash != config_hash(w.cfg)) fail("bundle model hash does not match checkpoint");
      }
      a.summary["bundle_hash"] = m.at("hash");
    } catch (const std::exception& e) {
      fail(std::string("bundle unreadable: ") + e.what());
    }
  }

  // Label hygiene.
  const json access = prov.value("label_access", json::array());
  for (const auto& s : access)
    if (!may_read_eval_labels(s.get<std::string>())) fail("stage " + s.get<std::string>() + " read evaluation labels");
  a.summary["violations"] = a.violations;
  return a;
}

}  // namespace vtom
