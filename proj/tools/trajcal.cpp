// trajcal: run the calibration pipeline one stage at a time, or end to end.
//
//   trajcal generate DIR              write the synthetic grid scenario
//   trajcal config-template           print a commented default config
//   trajcal <stage> --config FILE     ingest | cluster | estimate-flow | simulate |
//                                     calibrate | baseline | report
//   trajcal run-all --config FILE     every stage in order
//
// Exit codes: 0 ok, 1 runtime failure, 2 missing prerequisite, 3 invalid input.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "trajcal/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_run_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "pipeline configuration file")->required();
  cmd->add_option("--seed", o.seed, "override [run] seed");
  cmd->add_option("--out", o.out, "override [paths] out");
}

// Config plus command-line overrides; validation errors map to exit 3.
std::optional<trajcal::PipelineConfig> resolve(const Overrides& o, int& code) {
  try {
    auto cfg = trajcal::load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.out_dir = o.out;
    cfg.validate();
    return cfg;
  } catch (const trajcal::Error& e) {
    std::cerr << "config: " << e.what() << "\n";
    code = trajcal::kExitInvalid;
    return std::nullopt;
  }
}

int report(const trajcal::StageOutcome& r) {
  std::ostream& os = r.exit_code == trajcal::kExitOk ? std::cout : std::cerr;
  os << r.message << " (" << r.seconds << " s)\n";
  return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-driven demand estimation and simulator calibration"};
  app.require_subcommand(1);

  std::vector<std::pair<trajcal::Stage, CLI::App*>> stage_cmds;
  std::vector<Overrides> stage_opts(trajcal::all_stages().size());
  for (std::size_t i = 0; i < trajcal::all_stages().size(); ++i) {
    const auto s = trajcal::all_stages()[i];
    auto* cmd = app.add_subcommand(trajcal::stage_name(s), "run the " + trajcal::stage_name(s) + " stage");
    add_run_flags(cmd, stage_opts[i]);
    stage_cmds.emplace_back(s, cmd);
  }

  Overrides all_opts;
  auto* run_all = app.add_subcommand("run-all", "run every stage in order");
  add_run_flags(run_all, all_opts);

  std::string gen_dir;
  trajcal::ScenarioSpec spec;
  auto* gen = app.add_subcommand("generate", "write the synthetic grid scenario");
  gen->add_option("dir", gen_dir, "output directory")->required();
  gen->add_option("--seed", spec.seed, "scenario seed");
  gen->add_option("--days", spec.days, "observed days");
  gen->add_option("--measured-links", spec.measured_links, "links with a count prior");

  auto* tmpl = app.add_subcommand("config-template", "print a config with every default");

  CLI11_PARSE(app, argc, argv);

  try {
    for (std::size_t i = 0; i < stage_cmds.size(); ++i) {
      if (!*stage_cmds[i].second) continue;
      int code = 0;
      auto cfg = resolve(stage_opts[i], code);
      if (!cfg) return code;
      return report(trajcal::run_stage(stage_cmds[i].first, *cfg));
    }
    if (*run_all) {
      int code = 0;
      auto cfg = resolve(all_opts, code);
      if (!cfg) return code;
      return trajcal::run_all(*cfg, [](const trajcal::StageOutcome& r) { report(r); }).exit_code;
    }
    if (*gen) {
      if (spec.days < 1) {
        std::cerr << "generate: --days must be >= 1\n";
        return trajcal::kExitInvalid;
      }
      const auto sc = trajcal::write_scenario(gen_dir, spec);
      std::cout << "wrote " << gen_dir << ": " << sc.observed.size() << " observed trips over " << spec.days
                << " days; run with --config " << (std::filesystem::path(gen_dir) / "config.ini").string() << "\n";
      return trajcal::kExitOk;
    }
    if (*tmpl) {
      std::cout << trajcal::config_template();
      return trajcal::kExitOk;
    }
  } catch (const trajcal::ValidationError& e) {
    std::cerr << e.what() << "\n";
    return trajcal::kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return trajcal::kExitRuntime;
  }
  return trajcal::kExitOk;
}
