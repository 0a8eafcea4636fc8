#include <gtest/gtest.h>

#include <sstream>

#include "visiontom/harness.hpp"

using namespace vtom;

namespace {

json tiny_json(const fs::path& out) {
  return {{"model", {{"layers", 2}, {"heads", 4}, {"head_dim", 8}}},
          {"train_per_task", 30},
          {"val_per_task", 0},
          {"train", {{"epochs", 1}}},
          {"bench_per_task", 40},
          {"attack", {{"iters", 2}}},
          {"probe", {{"steps", 20}}},
          {"encoder", {{"steps", 5}}},
          {"k", 2},
          {"sweep_ks", {1, 2}},
          {"sweep_alphas", {0.0, 1.0}},
          {"seed", 7},
          {"out_dir", out.string()}};
}

ResultGrid sample_grid() {
  ResultGrid g;
  GridRow a;
  a.variant = Variant::Full;
  a.accuracy = {0.1, 1.0 / 3.0, 0.123456789012345678};
  a.count = {10, 12, 9};
  a.invalid = {0, 1, 2};
  GridRow b;
  b.variant = Variant::Baseline;
  b.accuracy = {0.5, 0.25, 2.0 / 7.0};
  b.count = {10, 12, 9};
  g.rows = {a, b};
  return g;
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "vtom_pipeline_test";
    fs::remove_all(root_);
    auto cfg = pipeline_config_from_json(tiny_json(root_ / "clean"));
    RunDir rd(cfg.out_dir);
    grid_ = new ResultGrid(run(cfg, rd));
  }
  static void TearDownTestSuite() {
    delete grid_;
    fs::remove_all(root_);
  }

  // A fresh copy of the clean run to tamper with.
  static fs::path copy_run(const std::string& name) {
    const auto dst = root_ / name;
    fs::remove_all(dst);
    fs::copy(root_ / "clean", dst, fs::copy_options::recursive);
    return dst;
  }

  static fs::path root_;
  static ResultGrid* grid_;
};

fs::path Pipeline::root_;
ResultGrid* Pipeline::grid_ = nullptr;

bool mentions(const AuditResult& a, const std::string& what) {
  for (const auto& v : a.violations)
    if (v.find(what) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
  PipelineConfig c;
  EXPECT_EQ(c.k, 16);
  EXPECT_EQ(c.alpha, 1.0);
  EXPECT_EQ(c.split_ratio, 0.3);
  EXPECT_EQ(c.seed, 42u);
  auto back = pipeline_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(pipeline_config_from_json({{"alpah", 1.0}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json({{"attack", {{"eps", 3}}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json({{"k", "many"}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json({{"k", 0}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json({{"split_ratio", 1.0}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json({{"variants", {"full", "plus"}}}), ConfigError);
  EXPECT_THROW(pipeline_config_from_json(json::array()), ConfigError);
}

TEST(Config, SeedPropagates) {
  auto c = pipeline_config_from_json({{"seed", 99}});
  EXPECT_EQ(c.train.seed, 99u);
  EXPECT_EQ(c.attack.seed, 99u);
  EXPECT_EQ(c.encoder.seed, 99u);
  EXPECT_EQ(c.model_config().seed, 99u);
}

TEST(Config, DottedOverrides) {
  json j = json::object();
  set_config_key(j, "attack.iters", "60");
  set_config_key(j, "out_dir", "somewhere");
  set_config_key(j, "sweep_ks", "[2, 4]");
  EXPECT_EQ(j["attack"]["iters"], 60);
  EXPECT_EQ(j["out_dir"], "somewhere");
  auto c = pipeline_config_from_json(j);
  EXPECT_EQ(c.attack.iters, 60);
  EXPECT_EQ(c.sweep_ks, (std::vector<int>{2, 4}));
  EXPECT_THROW(set_config_key(j, "attack..iters", "1"), ConfigError);
}

TEST(Report, CsvParsesBackExactly) {
  auto g = sample_grid();
  std::ostringstream os;
  report(g, "csv", os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line.rfind("variant,goal,belief,action,", 0), 0u);
  for (const auto& row : g.rows) {
    ASSERT_TRUE(std::getline(is, line));
    std::stringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    EXPECT_EQ(parse_variant(cell), row.variant);
    for (double a : row.accuracy) {
      std::getline(ls, cell, ',');
      EXPECT_EQ(std::stod(cell), a);
    }
  }
}

TEST(Report, JsonRoundTrip) {
  auto g = sample_grid();
  g.meta = {{"k", 16}};
  std::ostringstream os;
  report(g, "json", os);
  EXPECT_EQ(grid_from_json(json::parse(os.str())), g);
}

TEST(Report, MarkdownTable) {
  std::ostringstream os;
  report(sample_grid(), "markdown", os);
  EXPECT_EQ(os.str(),
            "| Method | Goal | Belief | Action |\n|---|---|---|---|\n"
            "| +αΔ | 10.0 | 33.3 | 12.3 |\n"
            "| Baseline | 50.0 | 25.0 | 28.6 |\n");
}

TEST(Report, EmptyGridAndUnknownFormat) {
  std::ostringstream csv, md;
  report(ResultGrid{}, "csv", csv);
  report(ResultGrid{}, "markdown", md);
  const auto c = csv.str(), m = md.str();
  EXPECT_EQ(std::count(c.begin(), c.end(), '\n'), 1);
  EXPECT_EQ(std::count(m.begin(), m.end(), '\n'), 2);
  std::ostringstream os;
  EXPECT_THROW(report(ResultGrid{}, "xml", os), ConfigError);
}

TEST(Stages, OrderIsEnforced) {
  const auto dir = fs::temp_directory_path() / "vtom_stage_order";
  fs::remove_all(dir);
  auto cfg = pipeline_config_from_json(tiny_json(dir));
  RunDir rd(dir);
  EXPECT_THROW(run_stage("capture", cfg, rd), Error);
  EXPECT_THROW(run_stage("evaluate", cfg, rd), Error);
  EXPECT_THROW(run_stage("bogus", cfg, rd), ConfigError);
  fs::remove_all(dir);
}

TEST(Stages, OnlyScoringStagesReadEvaluationLabels) {
  EXPECT_TRUE(may_read_eval_labels("evaluate"));
  EXPECT_TRUE(may_read_eval_labels("sweep"));
  for (const auto& s : stage_names())
    if (s != "evaluate" && s != "sweep") EXPECT_FALSE(may_read_eval_labels(s)) << s;
}

TEST_F(Pipeline, ProducesFullGrid) {
  ASSERT_EQ(grid_->rows.size(), kAllVariants.size());
  for (const auto& r : grid_->rows)
    for (int t = 0; t < kNumTasks; ++t) {
      EXPECT_EQ(r.count[t], 28);
      EXPECT_GE(r.accuracy[t], 0.0);
      EXPECT_LE(r.accuracy[t], 1.0);
    }
  RunDir rd(root_ / "clean");
  for (const auto& s : stage_names()) EXPECT_TRUE(rd.provenance()["stages"].contains(s)) << s;
  EXPECT_TRUE(rd.has("results/sweep.csv"));
}

TEST_F(Pipeline, AuditPassesOnCleanRun) {
  auto a = audit(root_ / "clean");
  EXPECT_TRUE(a.ok()) << a.summary.dump();
  EXPECT_GT(a.summary["artifacts_checked"].get<int>(), 10);
}

TEST_F(Pipeline, RerunIsByteIdentical) {
  auto cfg = pipeline_config_from_json(tiny_json(root_ / "again"));
  RunDir rd(cfg.out_dir);
  EXPECT_EQ(run(cfg, rd), *grid_);
  RunDir clean(root_ / "clean");
  for (auto& [stage, info] : clean.provenance()["stages"].items())
    EXPECT_EQ(info["outputs"], rd.provenance()["stages"][stage]["outputs"]) << stage;
}

TEST_F(Pipeline, AuditCatchesTamperedArtifact) {
  const auto dir = copy_run("tampered");
  {
    std::fstream f(dir / "records/store.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-3, std::ios::end);
    f.put('\x7f');
  }
  auto a = audit(dir);
  EXPECT_FALSE(a.ok());
  EXPECT_TRUE(mentions(a, "hash mismatch: records/store.bin"));
}

TEST_F(Pipeline, AuditCatchesLeakedEvaluationInstance) {
  const auto dir = copy_run("leaked");
  auto [cfg, cal] = load_dataset((dir / kCalibrationFile).string());
  auto ev = load_dataset((dir / kEvaluationFile).string()).second;
  cal.push_back(ev.front());
  save_dataset((dir / kCalibrationFile).string(), cfg, cal);
  auto a = audit(dir);
  EXPECT_TRUE(mentions(a, "in both calibration and evaluation"));
  cal.back().id = "renamed";
  save_dataset((dir / kCalibrationFile).string(), cfg, cal);
  EXPECT_TRUE(mentions(audit(dir), "duplicates an evaluation instance"));
}

TEST_F(Pipeline, AuditCatchesLabelAccessAndSeedDrift) {
  const auto dir = copy_run("labels");
  {
    RunDir rd(dir);
    rd.note_label_access("probe");
    rd.provenance()["seeds"]["global"] = 8;
    rd.save();
  }
  auto a = audit(dir);
  EXPECT_TRUE(mentions(a, "stage probe read evaluation labels"));
  EXPECT_TRUE(mentions(a, "seed record does not match"));
}

TEST_F(Pipeline, AuditCatchesForeignBundle) {
  const auto dir = copy_run("foreign");
  auto b = load_bundle((dir / "bundle/bundle.bin").string());
  b.model_hash ^= 1;
  save_bundle((dir / "bundle/bundle.bin").string(), b);
  auto a = audit(dir);
  EXPECT_TRUE(mentions(a, "bundle model hash does not match checkpoint"));
  EXPECT_TRUE(mentions(a, "hash mismatch: bundle/bundle.bin"));
}

TEST(Audit, MissingProvenance) {
  const auto dir = fs::temp_directory_path() / "vtom_empty_run";
  fs::create_directories(dir);
  EXPECT_FALSE(audit(dir).ok());
  fs::remove_all(dir);
}
