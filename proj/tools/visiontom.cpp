#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "visiontom/harness.hpp"

namespace {

enum Exit { kOk = 0, kConfig = 2, kStage = 3, kAudit = 4 };

struct Options {
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> k;
  std::optional<double> alpha;
  std::optional<int> pgd_iters;
  std::string format = "markdown";
};

vtom::PipelineConfig load_config(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw vtom::ConfigError("cannot open config " + o.config);
    try {
      j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
      throw vtom::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
  }
  if (const char* root = std::getenv("VISIONTOM_OUT")) j["out_dir"] = root;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw vtom::ConfigError("--set expects key=value, got " + s);
    vtom::set_config_key(j, s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.k) j["k"] = *o.k;
  if (o.alpha) j["alpha"] = *o.alpha;
  if (o.pgd_iters) j["attack"]["iters"] = *o.pgd_iters;
  if (!o.out.empty()) j["out_dir"] = o.out;
  return vtom::pipeline_config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"visiontom: head-level intervention pipeline on a synthetic ToM benchmark"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("-c,--config", o.config, "JSON config file");
  app.add_option("-o,--out", o.out, "run directory (default: $VISIONTOM_OUT or config out_dir)");
  app.add_option("--set", o.sets, "override a config key, e.g. --set attack.iters=60");
  app.add_option("--seed", o.seed, "global seed");
  app.add_option("-k,--k", o.k, "heads per intervention set");
  app.add_option("--alpha", o.alpha, "intervention strength");
  app.add_option("--pgd-iters", o.pgd_iters, "PGD iterations");

  const std::vector<std::pair<std::string, std::string>> stages = {
      {"generate", "generate training data and the calibration/evaluation splits"},
      {"train-toy", "train the toy model"},
      {"attack", "PGD and Gaussian-noise attacks on the calibration split"},
      {"capture", "record head activations for visual and text pairs"},
      {"probe", "per-head probes, heatmaps and head selection"},
      {"cluster", "cluster negatives and train correction encoders"},
      {"build-bundle", "assemble the intervention bundle"},
      {"evaluate", "evaluate all variants on the evaluation split"},
      {"sweep", "accuracy over K and alpha"}};
  std::vector<CLI::App*> stage_cmds;
  for (const auto& [name, help] : stages) stage_cmds.push_back(app.add_subcommand(name, help));
  auto* run_cmd = app.add_subcommand("run", "all stages in order");
  auto* report_cmd = app.add_subcommand("report", "write the result grid in another format");
  report_cmd->add_option("-f,--format", o.format, "csv, json or markdown")->check(CLI::IsMember({"csv", "json", "markdown"}));
  std::string report_out;
  report_cmd->add_option("--to", report_out, "output file (default: stdout)");
  auto* audit_cmd = app.add_subcommand("audit", "verify provenance of a run directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  vtom::PipelineConfig cfg;
  try {
    cfg = load_config(o);
  } catch (const vtom::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  }

  try {
    if (audit_cmd->parsed()) {
      auto a = vtom::audit(cfg.out_dir);
      std::cout << a.summary.dump(2) << '\n';
      for (const auto& v : a.violations) std::cerr << "audit: " << v << '\n';
      return a.ok() ? kOk : kAudit;
    }
    vtom::RunDir rd(cfg.out_dir);
    if (report_cmd->parsed()) {
      if (!rd.has("results/grid.json")) throw vtom::StateError("no results in " + cfg.out_dir + "; run evaluate first");
      std::ifstream is(rd.path("results/grid.json"));
      auto grid = vtom::grid_from_json(nlohmann::json::parse(is));
      if (report_out.empty())
        vtom::report(grid, o.format, std::cout);
      else
        vtom::report(grid, o.format, report_out);
      return kOk;
    }
    vtom::record_config(cfg, rd);
    if (run_cmd->parsed()) {
      auto grid = vtom::run(cfg, rd);
      vtom::report(grid, "markdown", std::cout);
      return kOk;
    }
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (stage_cmds[i]->parsed()) {
        vtom::StageTimer t;
        vtom::run_stage(stages[i].first, cfg, rd);
        std::cerr << stages[i].first << " done in " << t.seconds() << " s\n";
      }
    return kOk;
  } catch (const vtom::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStage;
  }
}
