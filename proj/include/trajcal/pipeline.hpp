#pragma once

// Stage orchestration behind the command-line tool: configuration, per-stage
// artifacts, the run manifest and the final report.

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "trajcal/calibrate.hpp"
#include "trajcal/clustering.hpp"
#include "trajcal/flowest.hpp"
#include "trajcal/gmm.hpp"
#include "trajcal/ingest.hpp"
#include "trajcal/mesosim.hpp"
#include "trajcal/netmodel.hpp"
#include "trajcal/scenario.hpp"

namespace trajcal {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitMissing = 2;
inline constexpr int kExitInvalid = 3;

class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

// Artifacts in the run directory that do not descend from one another.
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

// --- Configuration ----------------------------------------------------------

struct SPSAConfig {
  int max_iter = 60;
  double a = 0.0;   // 0: first step moves 5% of the box
  double A = -1.0;  // negative: 10% of max_iter
  double alpha_exp = 0.602;
  double c = 0.0;   // 0: relative loss noise at theta0
  double gamma_exp = 0.101;
  double eps = -1.0;  // negative: 0.1% of the current total travel time
};

struct PipelineConfig {
  fs::path network_links;
  fs::path network_nodes;
  fs::path trajectories;
  fs::path link_counts;  // optional
  fs::path out_dir = "run";
  std::uint64_t seed = 1;
  std::string eval_day;  // empty: first day in sort order

  double penetration = 0.075;
  SpeedBounds speed_bounds;
  bool reestimate_speed_limits = true;
  SpeedLimitOptions speed_limits;
  TODSchedule schedule = TODSchedule::standard();

  int gmm_k = 0;  // 0: BIC over [gmm_k_min, gmm_k_max]
  int gmm_k_min = 2;
  int gmm_k_max = 12;
  int gmm_restarts = 2;
  double cut_threshold = 0.3;

  double gamma = 1.0;
  double rho = 1.0;
  double od_bound_scale = 1.0;  // alpha = scale * x~
  ADMMSettings admm;

  SimParams params;
  ParamBox box = ParamBox::standard();
  SPSAConfig spsa;

  // Numeric ranges only; input files are checked by the stage that reads them.
  void validate() const {
    if (!(penetration > 0.0 && penetration <= 1.0)) {
      throw ValidationError("ingest.penetration must be in (0, 1], got " + format_double(penetration));
    }
    if (!(speed_bounds.min_mph >= 0 && speed_bounds.max_mph > speed_bounds.min_mph)) {
      throw ValidationError("ingest: need 0 <= min_mph < max_mph");
    }
    if (!(speed_limits.percentile > 0 && speed_limits.percentile < 1)) {
      throw ValidationError("ingest.speed_percentile must be in (0, 1)");
    }
    if (gmm_k < 0 || gmm_restarts < 1 || (gmm_k == 0 && (gmm_k_min < 1 || gmm_k_max < gmm_k_min))) {
      throw ValidationError("cluster: invalid GMM K settings");
    }
    if (!(cut_threshold > 0 && cut_threshold < 1)) throw ValidationError("cluster.cut_threshold must be in (0, 1)");
    if (!(gamma >= 0 && rho >= 0)) throw ValidationError("flow.gamma and flow.rho must be non-negative");
    if (!(od_bound_scale > 0)) throw ValidationError("flow.od_bound_scale must be positive");
    admm.validate();
    validate_params(params);
    box.validate();
    if (!box.contains(params, 1e-9)) throw ValidationError("[simulator] parameters lie outside [box]");
    if (spsa.max_iter < 1) throw ValidationError("spsa.max_iter must be >= 1");
    if (spsa.a < 0 || spsa.c < 0) throw ValidationError("spsa.a and spsa.c must be non-negative");
    if (!(spsa.alpha_exp > 0.5 && spsa.alpha_exp <= 1)) throw ValidationError("spsa.alpha_exp must be in (0.5, 1]");
    if (!(spsa.gamma_exp > 0 && spsa.gamma_exp <= 0.5)) throw ValidationError("spsa.gamma_exp must be in (0, 0.5]");
  }
};

namespace detail {

inline std::string join(const std::vector<std::string>& v, const char* sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

inline double to_num(const std::string& key, const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ValidationError("config " + key + ": bad number '" + s + "'");
  return v;
}

inline double to_num(const std::string& key, const std::vector<std::string>& in) {
  if (in.size() != 1) throw ValidationError("config " + key + ": expected one number");
  return to_num(key, in.front());
}

inline int to_int(const std::string& key, const std::vector<std::string>& in) {
  const double v = to_num(key, in);
  if (v != std::floor(v)) throw ValidationError("config " + key + ": expected an integer");
  return static_cast<int>(v);
}

inline bool to_bool(const std::string& key, const std::vector<std::string>& in) {
  const std::string s = join(in);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ValidationError("config " + key + ": expected true or false");
}

inline double& param_field(SimParams& p, const std::string& name) {
  if (name == "capacity_scale") return p.capacity_scale;
  if (name == "junction_delay") return p.junction_delay;
  if (name == "min_headway") return p.min_headway;
  if (name == "speed_factor_mean") return p.speed_factor_mean;
  if (name == "speed_factor_std") return p.speed_factor_std;
  if (name == "departure_jitter") return p.departure_jitter;
  if (name == "reroute_period") return p.reroute_period;
  if (name == "reroute_prob") return p.reroute_prob;
  throw ValidationError("unknown simulator parameter '" + name + "'");
}

}  // namespace detail

// INI-style "key = value" text with [sections]. Relative paths resolve
// against base_dir, normally the directory holding the config file.
inline PipelineConfig parse_config(const std::string& text, const fs::path& base_dir = {}) {
  PipelineConfig c;
  std::istringstream in(text);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  std::vector<double> tod_hours;
  std::vector<std::string> tod_labels;
  auto path = [&](const std::vector<std::string>& v) -> fs::path {
    const std::string s = detail::join(v);
    if (s.empty()) return {};
    fs::path p = s;
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;  // section markers
    const std::string section = it.parents.empty() ? "" : it.parents.front();
    const std::string& name = it.name;
    const std::string key = section + "." + name;
    const auto& v = it.inputs;
    auto num = [&] { return detail::to_num(key, v); };
    auto integer = [&] { return detail::to_int(key, v); };
    auto unknown = [&] { throw ValidationError("unknown config key '" + key + "'"); };
    if (section == "paths") {
      if (name == "network_links") c.network_links = path(v);
      else if (name == "network_nodes") c.network_nodes = path(v);
      else if (name == "trajectories") c.trajectories = path(v);
      else if (name == "link_counts") c.link_counts = path(v);
      else if (name == "out") c.out_dir = path(v);
      else unknown();
    } else if (section == "run") {
      if (name == "seed") c.seed = static_cast<std::uint64_t>(integer());
      else if (name == "eval_day") c.eval_day = detail::join(v);
      else unknown();
    } else if (section == "ingest") {
      if (name == "penetration") c.penetration = num();
      else if (name == "min_mph") c.speed_bounds.min_mph = num();
      else if (name == "max_mph") c.speed_bounds.max_mph = num();
      else if (name == "reestimate_speed_limits") c.reestimate_speed_limits = detail::to_bool(key, v);
      else if (name == "speed_percentile") c.speed_limits.percentile = num();
      else if (name == "speed_min_obs") c.speed_limits.min_obs = static_cast<std::size_t>(integer());
      else if (name == "tod_hours") for (const auto& s : v) tod_hours.push_back(detail::to_num(key, s));
      else if (name == "tod_labels") tod_labels = v;
      else unknown();
    } else if (section == "cluster") {
      if (name == "gmm_k") c.gmm_k = integer();
      else if (name == "gmm_k_min") c.gmm_k_min = integer();
      else if (name == "gmm_k_max") c.gmm_k_max = integer();
      else if (name == "gmm_restarts") c.gmm_restarts = integer();
      else if (name == "cut_threshold") c.cut_threshold = num();
      else unknown();
    } else if (section == "flow") {
      if (name == "gamma") c.gamma = num();
      else if (name == "rho") c.rho = num();
      else if (name == "od_bound_scale") c.od_bound_scale = num();
      else if (name == "admm_eps_abs") c.admm.eps_abs = num();
      else if (name == "admm_eps_rel") c.admm.eps_rel = num();
      else if (name == "admm_max_iter") c.admm.max_iter = integer();
      else if (name == "admm_sigma") c.admm.sigma = num();
      else if (name == "admm_polish") c.admm.polish = detail::to_bool(key, v);
      else unknown();
    } else if (section == "simulator") {
      detail::param_field(c.params, name) = num();
    } else if (section == "box") {
      if (v.size() != 2) throw ValidationError("config " + key + ": expected 'lo, hi'");
      detail::param_field(c.box.lo, name) = detail::to_num(key, v[0]);
      detail::param_field(c.box.hi, name) = detail::to_num(key, v[1]);
    } else if (section == "spsa") {
      if (name == "max_iter") c.spsa.max_iter = integer();
      else if (name == "a") c.spsa.a = num();
      else if (name == "A") c.spsa.A = num();
      else if (name == "alpha_exp") c.spsa.alpha_exp = num();
      else if (name == "c") c.spsa.c = num();
      else if (name == "gamma_exp") c.spsa.gamma_exp = num();
      else if (name == "eps") c.spsa.eps = num();
      else unknown();
    } else {
      unknown();
    }
  }
  if (!tod_hours.empty() || !tod_labels.empty()) {
    if (tod_hours.size() != tod_labels.size() + 1) {
      throw ValidationError("ingest.tod_hours needs exactly one more entry than ingest.tod_labels");
    }
    std::vector<TODInterval> iv;
    for (std::size_t i = 0; i < tod_labels.size(); ++i) {
      iv.push_back({static_cast<int>(i) + 1, tod_labels[i], tod_hours[i], tod_hours[i + 1]});
    }
    c.schedule = TODSchedule(std::move(iv));
  }
  return c;
}

inline PipelineConfig load_config(const fs::path& file) {
  if (!fs::exists(file)) throw ValidationError("config file not found: " + file.string());
  return parse_config(read_file(file), file.parent_path());
}

// Every key with its default and a short note.
inline std::string config_template() {
  const PipelineConfig d;
  auto f = [](double v) { return format_double(v); };
  std::ostringstream o;
  o << "; trajcal pipeline configuration. Relative paths resolve against this file.\n"
    << "\n[paths]\n"
    << "network_links = links.csv         ; link_id,from,to,length_m,speed_limit_mps,lanes,capacity_vph\n"
    << "network_nodes = nodes.csv         ; node_id,x,y  or  node_id,lat,lon\n"
    << "trajectories = trajectories.csv   ; trip_id,day,link_id,entry_time_s,origin_x,origin_y,dest_x,dest_y[,exit_time_s]\n"
    << "link_counts =                     ; optional link_id,tod,count for one average day\n"
    << "out = run                         ; artifact directory (--out overrides)\n"
    << "\n[run]\n"
    << "seed = " << d.seed << "                          ; --seed overrides\n"
    << "eval_day =                        ; observation day used for the final comparison; empty = first\n"
    << "\n[ingest]\n"
    << "penetration = " << f(d.penetration) << "             ; sampled share of all trips, in (0, 1]\n"
    << "min_mph = " << f(d.speed_bounds.min_mph) << "                       ; trips outside [min_mph, max_mph] are dropped\n"
    << "max_mph = " << f(d.speed_bounds.max_mph) << "\n"
    << "reestimate_speed_limits = true    ; replace mapped limits by observed speed percentiles\n"
    << "speed_percentile = " << f(d.speed_limits.percentile) << "\n"
    << "speed_min_obs = " << d.speed_limits.min_obs << "                ; fewer traversals keep the mapped limit\n"
    << "tod_hours = 0, 7, 10, 15, 19, 22, 24   ; first and last intervals are warm-up and cool-down\n"
    << "tod_labels = \"AM early\", \"AM peak\", \"Midday\", \"PM peak\", \"PM late\", \"Night\"\n"
    << "\n[cluster]\n"
    << "gmm_k = " << d.gmm_k << "                         ; 0 = choose K by BIC in [gmm_k_min, gmm_k_max]\n"
    << "gmm_k_min = " << d.gmm_k_min << "\n"
    << "gmm_k_max = " << d.gmm_k_max << "\n"
    << "gmm_restarts = " << d.gmm_restarts << "\n"
    << "cut_threshold = " << f(d.cut_threshold) << "               ; Jaccard distance at which path merging stops\n"
    << "\n[flow]\n"
    << "gamma = " << f(d.gamma) << "                         ; assignment-map weight\n"
    << "rho = " << f(d.rho) << "                           ; link-count weight\n"
    << "od_bound_scale = " << f(d.od_bound_scale) << "                ; OD upper bound = scale * total trips\n"
    << "admm_eps_abs = " << f(d.admm.eps_abs) << "\n"
    << "admm_eps_rel = " << f(d.admm.eps_rel) << "\n"
    << "admm_max_iter = " << d.admm.max_iter << "\n"
    << "admm_sigma = " << f(d.admm.sigma) << "\n"
    << "admm_polish = true\n"
    << "\n; calibration starting point\n[simulator]\n";
  const ThetaVector v = to_theta(d.params), lo = to_theta(d.box.lo), hi = to_theta(d.box.hi);
  for (std::size_t i = 0; i < kThetaDim; ++i) o << theta_names()[i] << " = " << f(v[i]) << "\n";
  o << "reroute_period = " << f(d.params.reroute_period) << "                ; s; 0 disables en-route rerouting\n"
    << "reroute_prob = " << f(d.params.reroute_prob) << "\n"
    << "\n; lo, hi of each calibrated parameter\n[box]\n";
  for (std::size_t i = 0; i < kThetaDim; ++i) o << theta_names()[i] << " = " << f(lo[i]) << ", " << f(hi[i]) << "\n";
  o << "\n[spsa]\n"
    << "max_iter = " << d.spsa.max_iter << "\n"
    << "a = 0                             ; 0 = first step moves 5% of the box\n"
    << "A = -1                            ; negative = 10% of max_iter\n"
    << "alpha_exp = " << f(d.spsa.alpha_exp) << "\n"
    << "c = 0                             ; 0 = relative loss noise over 5 replicates, clamped to [0.02, 0.2]\n"
    << "gamma_exp = " << f(d.spsa.gamma_exp) << "\n"
    << "eps = -1                          ; negative = 0.1% of the current total travel time\n";
  return o.str();
}

// --- Stages and artifacts ---------------------------------------------------

enum class Stage { ingest, cluster, estimate_flow, simulate, calibrate, baseline, report };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::ingest,    Stage::cluster,  Stage::estimate_flow, Stage::simulate,
                                    Stage::calibrate, Stage::baseline, Stage::report};
  return s;
}

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::ingest: return "ingest";
    case Stage::cluster: return "cluster";
    case Stage::estimate_flow: return "estimate-flow";
    case Stage::simulate: return "simulate";
    case Stage::calibrate: return "calibrate";
    case Stage::baseline: return "baseline";
    case Stage::report: return "report";
  }
  return "?";
}

inline std::optional<Stage> parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (stage_name(s) == name) return s;
  }
  return std::nullopt;
}

namespace artifact {
inline constexpr const char* links = "network_links.csv";
inline constexpr const char* nodes = "network_nodes.csv";
inline constexpr const char* trajectories = "trajectories_filtered.csv";
inline constexpr const char* filter_report = "filter_report.csv";
inline constexpr const char* tod_totals = "tod_totals.csv";
inline constexpr const char* link_counts = "link_counts.csv";
inline constexpr const char* zones = "zones.csv";
inline constexpr const char* paths = "paths.csv";
inline constexpr const char* trip_labels = "trip_labels.csv";
inline constexpr const char* assignment = "assignment_maps.csv";
inline constexpr const char* gmm = "gmm_summary.json";
inline constexpr const char* path_flows = "path_flows.csv";
inline constexpr const char* od_flows = "od_flows.csv";
inline constexpr const char* link_flows = "link_flows.csv";
inline constexpr const char* flow_diag = "flow_diagnostics.csv";
inline constexpr const char* trip_table = "trip_table.csv";
inline constexpr const char* sim_trips = "sim_trips.csv";
inline constexpr const char* sim_links = "sim_link_flows.csv";
inline constexpr const char* sim_summary = "sim_summary.json";
inline constexpr const char* calib_log = "calibration_log.csv";
inline constexpr const char* theta = "theta.txt";
inline constexpr const char* calib_trips = "calibrated_sim_trips.csv";
inline constexpr const char* calib_summary = "calibration_summary.json";
inline constexpr const char* baselines = "baselines.json";
inline constexpr const char* baseline1_trips = "baseline1_sim_trips.csv";
inline constexpr const char* baseline2_trips = "baseline2_sim_trips.csv";
inline constexpr const char* report = "report.json";
inline constexpr const char* comparison = "comparison.csv";
inline constexpr const char* tod_breakdown = "tod_breakdown.csv";
inline constexpr const char* manifest = "manifest.json";
inline constexpr const char* timings = "timings.json";
}  // namespace artifact

// Stage that writes each run-directory artifact.
inline const std::map<std::string, Stage>& producers() {
  using namespace artifact;
  static const std::map<std::string, Stage> m{
      {links, Stage::ingest},            {nodes, Stage::ingest},
      {trajectories, Stage::ingest},     {filter_report, Stage::ingest},
      {tod_totals, Stage::ingest},       {link_counts, Stage::ingest},
      {zones, Stage::cluster},           {paths, Stage::cluster},
      {trip_labels, Stage::cluster},     {assignment, Stage::cluster},
      {gmm, Stage::cluster},             {path_flows, Stage::estimate_flow},
      {od_flows, Stage::estimate_flow},  {link_flows, Stage::estimate_flow},
      {flow_diag, Stage::estimate_flow}, {trip_table, Stage::estimate_flow},
      {sim_trips, Stage::simulate},      {sim_links, Stage::simulate},
      {sim_summary, Stage::simulate},    {calib_log, Stage::calibrate},
      {theta, Stage::calibrate},         {calib_trips, Stage::calibrate},
      {calib_summary, Stage::calibrate}, {baselines, Stage::baseline},
      {baseline1_trips, Stage::baseline}, {baseline2_trips, Stage::baseline},
      {report, Stage::report},           {comparison, Stage::report},
      {tod_breakdown, Stage::report}};
  return m;
}

// manifest.json: for each stage, the seed and the digests of what it read and
// wrote. Timings live in timings.json so that the manifest is reproducible.
class Manifest {
 public:
  explicit Manifest(fs::path dir) : dir_(std::move(dir)) {
    const auto file = dir_ / artifact::manifest;
    if (fs::exists(file)) {
      try {
        data_ = json::parse(read_file(file));
      } catch (const json::exception& e) {
        throw ValidationError("unreadable manifest " + file.string() + ": " + e.what());
      }
    }
    if (!data_.is_object() || !data_.contains("stages")) data_ = json{{"stages", json::object()}};
  }

  bool has(Stage s) const { return data_["stages"].contains(stage_name(s)); }
  const json& entry(Stage s) const { return data_["stages"].at(stage_name(s)); }
  const json& data() const { return data_; }

  void record(Stage s, const std::map<std::string, std::string>& inputs,
              const std::map<std::string, std::string>& outputs, std::uint64_t seed) {
    data_["stages"][stage_name(s)] = json{{"inputs", inputs}, {"outputs", outputs}, {"seed", seed}};
    write_file_atomic(dir_ / artifact::manifest, data_.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  json data_;
};

struct StageOutcome {
  int exit_code = kExitOk;
  std::string message;
  double seconds = 0.0;
};

namespace detail {

// Reads and writes for one stage run, with digests for the manifest.
struct StageIO {
  const PipelineConfig& cfg;
  Stage stage;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> outputs;

  fs::path at(const std::string& name) const { return cfg.out_dir / name; }

  std::string read(const std::string& name) {
    const auto p = at(name);
    if (!fs::exists(p)) {
      throw MissingArtifactError("missing artifact '" + name + "' in " + cfg.out_dir.string() + " (produced by '" +
                                 stage_name(producers().at(name)) + "')");
    }
    std::string text = read_file(p);
    inputs[name] = digest_bytes(text);
    return text;
  }

  csv::Table table(const std::string& name) { return csv::Table::parse(read(name), at(name).string()); }

  json read_json(const std::string& name) {
    try {
      return json::parse(read(name));
    } catch (const json::exception& e) {
      throw ValidationError("unreadable " + name + ": " + e.what());
    }
  }

  std::string read_external(const fs::path& p, const std::string& what) {
    if (p.empty()) throw ValidationError("config does not name the " + what + " file");
    if (!fs::exists(p)) throw ValidationError(what + " file not found: " + p.string());
    std::string text = read_file(p);
    inputs["external:" + what] = digest_bytes(text);
    return text;
  }

  void write(const std::string& name, const std::string& content) {
    write_file_atomic(at(name), content);
    outputs[name] = digest_bytes(content);
  }

  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
};

inline std::uint64_t stage_seed(const PipelineConfig& cfg, Stage s) {
  return mix_seed(cfg.seed, 0x7C000u + static_cast<std::uint64_t>(s));
}

// Seed shared by the calibrated run and both baselines, so the final
// comparison differs only in demand and parameters.
inline std::uint64_t comparison_seed(const PipelineConfig& cfg) { return mix_seed(cfg.seed, 0xC0FFEEu); }

inline Network run_network(StageIO& io) { return parse_network(io.table(artifact::links), io.table(artifact::nodes)); }

inline std::vector<TrajectoryRecord> run_trajectories(StageIO& io, const Network& net) {
  auto load = parse_trajectories(net, io.read(artifact::trajectories), io.at(artifact::trajectories).string());
  assign_tods(load.records, io.cfg.schedule);
  return std::move(load.records);
}

inline std::vector<Path> run_paths(StageIO& io, const Network& net) { return parse_paths(net, io.table(artifact::paths)); }

struct Observations {
  std::vector<ObservedTrip> trips;
  std::vector<std::string> day;  // parallel to trips
};

inline Observations run_observations(StageIO& io, const Network& net) {
  const auto recs = run_trajectories(io, net);
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < recs.size(); ++i) by_id.emplace(recs[i].trip_id, i);
  const auto t = io.table(artifact::trip_labels);
  Observations out;
  if (t.rows().empty()) return out;
  t.require({"trip_id", "path_id", "tod"});
  for (const auto& row : t.rows()) {
    auto it = by_id.find(t.str(row, "trip_id"));
    if (it == by_id.end()) throw ParseError(t.source(), row.line, "trip '" + t.str(row, "trip_id") + "' has no trajectory");
    const auto& r = recs[it->second];
    out.trips.push_back({r.trip_id, static_cast<PathId>(t.integer(row, "path_id")), static_cast<int>(t.integer(row, "tod")),
                         r.departure(), r.travel_time, r.links});
    out.day.push_back(r.day);
  }
  return out;
}

inline std::string pick_eval_day(const PipelineConfig& cfg, const Observations& obs) {
  const std::set<std::string> days(obs.day.begin(), obs.day.end());
  if (days.empty()) throw ValidationError("no labeled observations");
  if (cfg.eval_day.empty()) return *days.begin();
  if (!days.count(cfg.eval_day)) throw ValidationError("run.eval_day '" + cfg.eval_day + "' has no labeled observations");
  return cfg.eval_day;
}

inline std::vector<ObservedTrip> on_day(const Observations& obs, const std::string& day) {
  std::vector<ObservedTrip> out;
  for (std::size_t i = 0; i < obs.trips.size(); ++i) {
    if (obs.day[i] == day) out.push_back(obs.trips[i]);
  }
  return out;
}

inline json params_json(const SimParams& p) {
  json j;
  const ThetaVector v = to_theta(p);
  for (std::size_t i = 0; i < kThetaDim; ++i) j[theta_names()[i]] = v[i];
  j["reroute_period"] = p.reroute_period;
  j["reroute_prob"] = p.reroute_prob;
  return j;
}

}  // namespace detail

// Integer path flows to timed departures: y trips on a path are spread evenly
// over their interval at offsets (i + phase) / y, with a per-path phase so
// paths with equal counts do not depart in lockstep.
inline std::vector<SimTrip> trips_from_path_flows(const std::map<int, std::vector<long long>>& flows,
                                                  const IncidenceSet& inc, const TODSchedule& schedule) {
  std::vector<SimTrip> out;
  constexpr double kGolden = 0.6180339887498949;
  for (const auto& [tod, y] : flows) {
    const TODInterval& iv = schedule.at(tod);
    for (std::size_t m = 0; m < y.size(); ++m) {
      const double phase = std::fmod(static_cast<double>(m) * kGolden, 1.0);
      for (long long i = 0; i < y[m]; ++i) {
        const double t = iv.start_s() + (static_cast<double>(i) + phase) / static_cast<double>(y[m]) * (iv.end_s() - iv.start_s());
        out.push_back({"t" + std::to_string(tod) + "_p" + std::to_string(inc.path_ids[m]) + "_" + std::to_string(i),
                       inc.path_ids[m], t});
      }
    }
  }
  return out;
}

inline std::map<int, double> parse_tod_totals(const csv::Table& t) {
  t.require({"tod", "x_tilde"});
  std::map<int, double> out;
  for (const auto& row : t.rows()) out[static_cast<int>(t.integer(row, "tod"))] = t.num(row, "x_tilde");
  return out;
}

// Inverse of sim_result_csv. Rejected trips are not distinguished from
// incomplete ones in the export.
inline SimResult parse_sim_trips(const csv::Table& t) {
  SimResult r;
  if (t.rows().empty()) return r;
  t.require({"trip_id", "path_id", "tod", "departure_s", "travel_time_s", "completed"});
  for (const auto& row : t.rows()) {
    TripResult tr;
    tr.trip_id = t.str(row, "trip_id");
    tr.path = tr.final_path = static_cast<PathId>(t.integer(row, "path_id"));
    tr.tod = static_cast<int>(t.integer(row, "tod"));
    tr.departure = t.num(row, "departure_s");
    tr.travel_time = t.num(row, "travel_time_s");
    tr.completed = t.integer(row, "completed") != 0;
    ++r.requested;
    r.completed += tr.completed ? 1 : 0;
    r.trips.push_back(std::move(tr));
  }
  r.loaded_fraction = throughput(r);
  return r;
}

// --- TOD breakdown ------------------------------------------------------------

struct TODBreakdownRow {
  int tod = 0;
  std::string label;
  std::size_t observed = 0;
  std::size_t matched = 0;
  double mean_observed = 0.0;   // s, matched observations
  double mean_simulated = 0.0;  // s, their simulated partners
  double std_observed = 0.0;
  double std_simulated = 0.0;
  double mse = 0.0;             // s^2
};

// One row per main interval, using the matching rule of the loss.
inline std::vector<TODBreakdownRow> tod_breakdown(const SimResult& sim, const std::vector<ObservedTrip>& observed,
                                                  const TODSchedule& schedule) {
  const TripMatches m = match_observed(sim, observed, schedule);
  std::vector<TODBreakdownRow> rows;
  for (const auto& iv : schedule.intervals()) {
    if (!schedule.is_main(iv.index)) continue;
    TODBreakdownRow row;
    row.tod = iv.index;
    row.label = iv.label;
    double so = 0, ss = 0, so2 = 0, ss2 = 0, se = 0;
    for (std::size_t i = 0; i < observed.size(); ++i) {
      if (observed[i].tod != iv.index) continue;
      ++row.observed;
      if (!m.simulated[i]) continue;
      const double o = observed[i].travel_time, s = *m.simulated[i];
      ++row.matched;
      so += o;
      ss += s;
      so2 += o * o;
      ss2 += s * s;
      se += (s - o) * (s - o);
    }
    if (row.matched > 0) {
      const double n = static_cast<double>(row.matched);
      row.mean_observed = so / n;
      row.mean_simulated = ss / n;
      row.std_observed = std::sqrt(std::max(0.0, so2 / n - row.mean_observed * row.mean_observed));
      row.std_simulated = std::sqrt(std::max(0.0, ss2 / n - row.mean_simulated * row.mean_simulated));
      row.mse = se / n;
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string tod_breakdown_csv(const std::vector<TODBreakdownRow>& rows) {
  csv::Writer w{"tod",           "label",           "observed_trips", "matched",
                "mean_observed_s", "mean_simulated_s", "std_observed_s", "std_simulated_s", "mse_s2"};
  for (const auto& r : rows) {
    w.row(r.tod, r.label, r.observed, r.matched, r.mean_observed, r.mean_simulated, r.std_observed, r.std_simulated,
          r.mse);
  }
  return w.str();
}

// --- Stage bodies -------------------------------------------------------------

namespace detail {

inline void stage_ingest(StageIO& io) {
  const auto& cfg = io.cfg;
  const std::string links_text = io.read_external(cfg.network_links, "network links");
  const std::string nodes_text = io.read_external(cfg.network_nodes, "network nodes");
  const std::string traj_text = io.read_external(cfg.trajectories, "trajectories");
  const Network mapped = parse_network(csv::Table::parse(links_text, cfg.network_links.string()),
                                       csv::Table::parse(nodes_text, cfg.network_nodes.string()));
  auto load = parse_trajectories(mapped, traj_text, cfg.trajectories.string());
  auto filtered = filter_abnormal(std::move(load.records), cfg.speed_bounds);
  for (const auto& id : load.rejected) filtered.removed.push_back({id, "non-increasing timestamps", 0.0});
  if (filtered.kept.empty()) throw ValidationError("no trajectories left after filtering");
  const Network net = cfg.reestimate_speed_limits ? estimate_speed_limits(filtered.kept, mapped, cfg.speed_limits) : mapped;
  assign_tods(filtered.kept, cfg.schedule);

  const PenetrationEstimate pen(cfg.penetration);
  const auto totals = estimate_tod_totals(filtered.kept, cfg.schedule, pen);
  std::set<std::string> days;
  std::map<int, std::size_t> counts;
  for (const auto& r : filtered.kept) {
    days.insert(r.day);
    ++counts[r.tod];
  }
  csv::Writer tw{"tod", "label", "observed_trips", "days", "penetration", "x_tilde"};
  for (const auto& [tod, t] : totals) {
    tw.row(tod, cfg.schedule.at(tod).label, counts[tod], days.size(), cfg.penetration, t.trips);
  }

  std::map<std::pair<int, LinkIndex>, double> link_counts;
  if (!cfg.link_counts.empty()) {
    const std::string text = io.read_external(cfg.link_counts, "link counts");
    link_counts = parse_link_counts(net, csv::Table::parse(text, cfg.link_counts.string()));
    for (const auto& [key, v] : link_counts) {
      if (key.first < 1 || key.first > static_cast<int>(cfg.schedule.size())) {
        throw ValidationError("link counts name TOD " + std::to_string(key.first) + " outside the schedule");
      }
    }
  }

  io.write(artifact::links, links_to_csv(net));
  io.write(artifact::nodes, nodes_to_csv(net));
  io.write(artifact::trajectories, trajectories_to_csv(net, filtered.kept));
  io.write(artifact::filter_report, filter_report_csv(filtered.removed));
  io.write(artifact::tod_totals, tw.str());
  io.write(artifact::link_counts, link_counts_csv(net, link_counts));
}

inline void stage_cluster(StageIO& io) {
  const auto& cfg = io.cfg;
  const Network net = run_network(io);
  const auto recs = run_trajectories(io, net);
  const auto points = endpoint_points(recs);
  GMMOptions gopts;
  gopts.restarts = cfg.gmm_restarts;
  const std::uint64_t seed = stage_seed(cfg, Stage::cluster);
  const GMMModel model = cfg.gmm_k > 0 ? fit_gmm(points, cfg.gmm_k, seed, gopts)
                                       : fit_gmm_bic(points, cfg.gmm_k_min, cfg.gmm_k_max, seed, gopts);
  const auto zones = assign_zones(net, model, label_endpoints(model, recs));
  const PathSetResult ps = build_path_set(net, recs, zones, cfg.cut_threshold);
  if (ps.paths.empty()) throw ValidationError("no trip could be assigned to a zone pair");
  const IncidenceSet inc = build_incidence(net, ps.paths, zones);
  std::vector<AssignmentMap> maps;
  for (const auto& iv : cfg.schedule.intervals()) maps.push_back(build_assignment_map(ps.labels, inc, iv.index));

  json g;
  g["k"] = model.k;
  g["selection"] = cfg.gmm_k > 0 ? "fixed" : "bic";
  g["log_likelihood"] = model.log_likelihood();
  g["bic"] = model.bic(points.size());
  g["iterations"] = model.iterations;
  g["converged"] = model.converged;
  g["warnings"] = model.warnings;
  g["weights"] = model.weights;
  json means = json::array();
  for (const auto& mu : model.means) means.push_back({mu.x(), mu.y()});
  g["means"] = means;
  g["zones"] = zones.size();
  g["od_pairs"] = inc.num_od();
  g["paths"] = inc.num_paths();
  g["labeled_trips"] = ps.labels.size();
  g["unzoned_trips"] = ps.unzoned_trips;

  io.write(artifact::zones, zones_to_csv(net, zones));
  io.write(artifact::paths, paths_to_csv(net, ps.paths));
  io.write(artifact::trip_labels, trip_labels_to_csv(recs, ps.labels));
  io.write(artifact::assignment, assignment_maps_to_csv(maps, inc));
  io.write_json(artifact::gmm, g);
}

inline void stage_estimate_flow(StageIO& io) {
  const auto& cfg = io.cfg;
  const Network net = run_network(io);
  const auto zones = parse_zones(net, io.table(artifact::zones));
  const auto paths = run_paths(io, net);
  const IncidenceSet inc = build_incidence(net, paths, zones);
  const auto maps = parse_assignment_maps(io.table(artifact::assignment), inc);
  const auto totals = parse_tod_totals(io.table(artifact::tod_totals));
  const auto counts = parse_link_counts(net, io.table(artifact::link_counts));

  std::vector<std::pair<int, FlowProblem>> problems;
  for (const auto& iv : cfg.schedule.intervals()) {
    AssignmentMap map;
    map.tod = iv.index;
    map.g.resize(static_cast<Eigen::Index>(inc.num_paths()), static_cast<Eigen::Index>(inc.num_od()));
    for (const auto& m : maps) {
      if (m.tod == iv.index) map = m;
    }
    std::map<LinkIndex, double> z;
    for (const auto& [key, v] : counts) {
      if (key.first == iv.index) z[key.second] = v;
    }
    auto it = totals.find(iv.index);
    if (it == totals.end()) throw ValidationError("tod_totals has no row for TOD " + std::to_string(iv.index));
    FlowProblem p = make_flow_problem(inc, map, net, iv.hours(), it->second, z, cfg.gamma, cfg.rho);
    p.alpha *= cfg.od_bound_scale;
    for (Eigen::Index m = 0; m < p.num_paths(); ++m) {
      p.beta[m] = p.alpha[static_cast<Eigen::Index>(inc.od_of_path(static_cast<std::size_t>(m)))];
    }
    problems.emplace_back(iv.index, std::move(p));
  }
  const auto results = estimate_all_tods(problems, cfg.admm);

  std::vector<TODFlows> flows;
  std::map<int, std::vector<long long>> y_int;
  csv::Writer d{"tod",        "label",    "status",  "iterations",    "polished",    "objective",
                "primal_res", "dual_res", "x_tilde", "total_od_flow", "total_y_int", "rounding_drift"};
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (!r.error.empty() || r.solution.status == SolveStatus::infeasible) {
      throw Error("flow estimation failed for TOD " + std::to_string(r.tod) + ": " +
                  (r.error.empty() ? std::string("infeasible") : r.error));
    }
    TODFlows f{r.tod, r.solution, round_path_flows(r.solution, problems[i].second.beta)};
    long long total_int = 0;
    for (long long v : f.rounded.y) total_int += v;
    d.row(r.tod, cfg.schedule.at(r.tod).label, to_string(r.solution.status), r.solution.iterations,
          r.solution.polished ? 1 : 0, r.solution.objective, r.solution.primal_residual, r.solution.dual_residual,
          problems[i].second.x_tilde, r.solution.x.sum(), total_int, f.rounded.drift);
    y_int[r.tod] = f.rounded.y;
    flows.push_back(std::move(f));
  }

  io.write(artifact::path_flows, path_flows_csv(inc, flows));
  io.write(artifact::od_flows, od_flows_csv(inc, flows));
  io.write(artifact::link_flows, link_flows_csv(net, flows));
  io.write(artifact::flow_diag, d.str());
  io.write(artifact::trip_table, trip_table_csv(trips_from_path_flows(y_int, inc, cfg.schedule)));
}

inline json sim_json(const SimResult& r, const TODSchedule& schedule) {
  const SimResult main = apply_warmup_cooldown(r, schedule);
  return json{{"requested", r.requested},
              {"completed", r.completed},
              {"rejected", r.rejected},
              {"loaded_fraction_all", r.loaded_fraction},
              {"loaded_fraction_main", main.loaded_fraction},
              {"total_travel_time_s", r.total_travel_time()}};
}

inline void stage_simulate(StageIO& io) {
  const auto& cfg = io.cfg;
  const Network net = run_network(io);
  const auto paths = run_paths(io, net);
  const auto trips = parse_trip_table(io.table(artifact::trip_table));
  const std::uint64_t seed = stage_seed(cfg, Stage::simulate);
  const SimResult r = run_simulation(net, paths, trips, cfg.params, cfg.schedule, seed);
  json s = sim_json(r, cfg.schedule);
  s["seed"] = seed;
  s["params"] = params_json(cfg.params);
  io.write(artifact::sim_trips, sim_result_csv(r));
  io.write(artifact::sim_links, sim_link_flows_csv(net, r));
  io.write_json(artifact::sim_summary, s);
}

inline void stage_calibrate(StageIO& io) {
  const auto& cfg = io.cfg;
  const Network net = run_network(io);
  const auto paths = run_paths(io, net);
  const auto trips = parse_trip_table(io.table(artifact::trip_table));
  const Observations obs = run_observations(io, net);
  if (obs.trips.empty()) throw ValidationError("no labeled observations to calibrate against");
  const std::string day = pick_eval_day(cfg, obs);
  const std::uint64_t seed = stage_seed(cfg, Stage::calibrate);

  // All observed days are scored against the one simulated day.
  const Objective objective = simulation_objective(net, paths, trips, obs.trips, cfg.schedule);
  GainSchedule gains;
  gains.alpha_exp = cfg.spsa.alpha_exp;
  gains.gamma_exp = cfg.spsa.gamma_exp;
  gains.A = cfg.spsa.A >= 0 ? cfg.spsa.A : 0.1 * cfg.spsa.max_iter;
  gains.c = cfg.spsa.c > 0 ? cfg.spsa.c : estimate_noise_gain(objective, cfg.params, seed);
  gains.a = cfg.spsa.a > 0 ? cfg.spsa.a : 1.0;
  SPSAOptions opts;
  opts.max_iter = cfg.spsa.max_iter;
  opts.eps = cfg.spsa.eps;
  opts.auto_gain = cfg.spsa.a <= 0;
  opts.seed = seed;
  const CalibrationRun run = spsa_calibrate(objective, cfg.params, gains, cfg.box, opts);

  const SimResult final_sim = run_simulation(net, paths, trips, run.theta_opt, cfg.schedule, comparison_seed(cfg));
  const LossResult fl = travel_time_loss(final_sim, on_day(obs, day), cfg.schedule);

  json s;
  s["status"] = to_string(run.status);
  s["iterations"] = run.iterations();
  s["evaluations"] = run.evaluations;
  s["retries"] = run.retries;
  s["gains"] = {{"a", run.a}, {"A", gains.A}, {"alpha_exp", gains.alpha_exp}, {"c", gains.c}, {"gamma_exp", gains.gamma_exp}};
  s["theta0"] = params_json(cfg.params);
  s["theta_opt"] = params_json(run.theta_opt);
  s["initial_loss"] = run.loss_history.front();
  s["last_loss"] = run.loss_history.back();
  s["eval_day"] = day;
  s["seed"] = seed;
  s["final"] = sim_json(final_sim, cfg.schedule);
  s["final"]["mse_s2"] = fl.loss;
  s["final"]["matched"] = fl.matched;
  s["final"]["unmatched"] = fl.unmatched;
  s["final"]["seed"] = comparison_seed(cfg);

  io.write(artifact::calib_log, calibration_log_csv(run));
  io.write(artifact::theta, "[simulator]\n" + params_to_text(run.theta_opt));
  io.write(artifact::calib_trips, sim_result_csv(final_sim));
  io.write_json(artifact::calib_summary, s);
}

inline std::string baseline_label(BaselineKind k) {
  return k == BaselineKind::upsample_max_capacity ? "baseline 1: up-sampled at high capacity"
                                                  : "baseline 2: up-sampled with calibrated parameters";
}

inline void stage_baseline(StageIO& io) {
  const auto& cfg = io.cfg;
  const Network net = run_network(io);
  const Observations obs = run_observations(io, net);
  const std::string day = pick_eval_day(cfg, obs);
  const SimParams theta = parse_config(io.read(artifact::theta)).params;
  const auto observed = on_day(obs, day);
  json out = json::array();
  for (BaselineKind k : {BaselineKind::upsample_max_capacity, BaselineKind::upsample_calibrated}) {
    const BaselineResult b =
        run_baseline(k, net, observed, cfg.penetration, theta, cfg.box, cfg.schedule, comparison_seed(cfg));
    json j = sim_json(b.sim, cfg.schedule);
    j["kind"] = static_cast<int>(k);
    j["label"] = baseline_label(k);
    j["params"] = params_json(b.params);
    j["trips"] = b.trips;
    j["throughput"] = b.throughput;
    j["mse_s2"] = b.loss.loss;
    j["matched"] = b.loss.matched;
    j["unmatched"] = b.loss.unmatched;
    out.push_back(j);
    io.write(k == BaselineKind::upsample_max_capacity ? artifact::baseline1_trips : artifact::baseline2_trips,
             sim_result_csv(b.sim));
  }
  io.write_json(artifact::baselines, json{{"eval_day", day}, {"seed", comparison_seed(cfg)}, {"baselines", out}});
}

// Every recorded stage must have read exactly what its producers wrote, and
// every recorded output must still be on disk unchanged.
inline void check_provenance(const PipelineConfig& cfg, const Manifest& man) {
  for (Stage s : all_stages()) {
    if (s == Stage::report || !man.has(s)) continue;
    const json& e = man.entry(s);
    for (auto it = e["outputs"].begin(); it != e["outputs"].end(); ++it) {
      const fs::path p = cfg.out_dir / it.key();
      if (!fs::exists(p)) {
        throw MissingArtifactError("missing artifact '" + it.key() + "' (recorded by '" + stage_name(s) + "')");
      }
      if (digest_file(p) != it.value().get<std::string>()) {
        throw ProvenanceError("'" + it.key() + "' changed after '" + stage_name(s) + "' wrote it");
      }
    }
    for (auto it = e["inputs"].begin(); it != e["inputs"].end(); ++it) {
      auto prod = producers().find(it.key());
      if (prod == producers().end()) continue;  // external input
      if (!man.has(prod->second)) {
        throw ProvenanceError("'" + stage_name(s) + "' read '" + it.key() + "' but '" + stage_name(prod->second) +
                              "' has no manifest entry");
      }
      const json& po = man.entry(prod->second)["outputs"];
      if (!po.contains(it.key()) || po[it.key()] != it.value()) {
        throw ProvenanceError("mixed provenance: '" + stage_name(s) + "' used an older '" + it.key() +
                              "' than the current '" + stage_name(prod->second) + "' output; rerun '" +
                              stage_name(s) + "'");
      }
    }
  }
}

inline json flow_rows_json(const csv::Table& t) {
  json rows = json::array();
  for (const auto& row : t.rows()) {
    json r;
    for (const auto& col : t.header()) {
      const std::string& v = t.str(row, col);
      double x = 0;
      auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      r[col] = (ec == std::errc() && p == v.data() + v.size()) ? json(x) : json(v);
    }
    rows.push_back(r);
  }
  return rows;
}

inline void stage_report(StageIO& io) {
  const auto& cfg = io.cfg;
  // Prerequisites in pipeline order, so the first missing one is named.
  const json flow = flow_rows_json(io.table(artifact::flow_diag));
  const json calib = io.read_json(artifact::calib_summary);
  const SimResult sim = parse_sim_trips(io.table(artifact::calib_trips));
  const json base = io.read_json(artifact::baselines);
  const Network net = run_network(io);
  const Observations obs = run_observations(io, net);

  const Manifest man(cfg.out_dir);
  for (Stage s : all_stages()) {
    if (s != Stage::report && !man.has(s)) {
      throw MissingArtifactError("stage '" + stage_name(s) + "' has no manifest entry in " + cfg.out_dir.string());
    }
  }
  check_provenance(cfg, man);
  for (const auto& [name, digest] : io.inputs) {
    const json& po = man.entry(producers().at(name))["outputs"];
    if (!po.contains(name) || po[name].get<std::string>() != digest) {
      throw ProvenanceError("mixed provenance: '" + name + "' does not match the manifest");
    }
  }

  const std::string day = calib.at("eval_day").get<std::string>();
  if (base.at("eval_day").get<std::string>() != day) {
    throw ProvenanceError("calibration and baselines were evaluated on different days");
  }
  const auto rows = tod_breakdown(sim, on_day(obs, day), cfg.schedule);

  const json& fin = calib.at("final");
  json comparison = json::array();
  comparison.push_back({{"method", "calibrated pipeline"},
                        {"mse_s2", fin.at("mse_s2")},
                        {"throughput", fin.at("loaded_fraction_main")},
                        {"matched", fin.at("matched")},
                        {"unmatched", fin.at("unmatched")},
                        {"trips", fin.at("requested")}});
  for (const auto& b : base.at("baselines")) {
    comparison.push_back({{"method", b.at("label")},
                          {"mse_s2", b.at("mse_s2")},
                          {"throughput", b.at("throughput")},
                          {"matched", b.at("matched")},
                          {"unmatched", b.at("unmatched")},
                          {"trips", b.at("trips")}});
  }
  csv::Writer cw{"method", "mse_s2", "throughput", "matched", "unmatched", "trips"};
  for (const auto& c : comparison) {
    cw.row(c["method"].get<std::string>(), c["mse_s2"].get<double>(), c["throughput"].get<double>(),
           c["matched"].get<std::size_t>(), c["unmatched"].get<std::size_t>(), c["trips"].get<std::size_t>());
  }

  json tod = json::array();
  for (const auto& r : rows) {
    tod.push_back({{"tod", r.tod},
                   {"label", r.label},
                   {"observed_trips", r.observed},
                   {"matched", r.matched},
                   {"mean_observed_s", r.mean_observed},
                   {"mean_simulated_s", r.mean_simulated},
                   {"mse_s2", r.mse}});
  }

  json artifacts = json::object();
  for (Stage s : all_stages()) {
    if (s == Stage::report) continue;
    const json& outs = man.entry(s)["outputs"];
    for (auto it = outs.begin(); it != outs.end(); ++it) artifacts[it.key()] = it.value();
  }

  json rep;
  rep["eval_day"] = day;
  rep["flow_estimation"] = flow;
  rep["calibration"] = {{"status", calib.at("status")},
                        {"iterations", calib.at("iterations")},
                        {"theta_opt", calib.at("theta_opt")},
                        {"mse_s2", fin.at("mse_s2")},
                        {"throughput", fin.at("loaded_fraction_main")}};
  rep["comparison"] = comparison;
  rep["tod_breakdown"] = tod;
  rep["artifacts"] = artifacts;
  rep["timings"] = artifact::timings;

  io.write(artifact::comparison, cw.str());
  io.write(artifact::tod_breakdown, tod_breakdown_csv(rows));
  io.write_json(artifact::report, rep);
}

inline void record_timing(const fs::path& dir, Stage s, double seconds) {
  const fs::path file = dir / artifact::timings;
  json t = json::object();
  if (fs::exists(file)) {
    try {
      t = json::parse(read_file(file));
    } catch (const json::exception&) {
      t = json::object();
    }
  }
  t[stage_name(s)] = seconds;
  write_file_atomic(file, t.dump(2) + "\n");
}

}  // namespace detail

// Runs one stage and maps failures to exit codes.
inline StageOutcome run_stage(Stage stage, const PipelineConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  StageOutcome out;
  try {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    detail::StageIO io{cfg, stage, {}, {}};
    switch (stage) {
      case Stage::ingest: detail::stage_ingest(io); break;
      case Stage::cluster: detail::stage_cluster(io); break;
      case Stage::estimate_flow: detail::stage_estimate_flow(io); break;
      case Stage::simulate: detail::stage_simulate(io); break;
      case Stage::calibrate: detail::stage_calibrate(io); break;
      case Stage::baseline: detail::stage_baseline(io); break;
      case Stage::report: detail::stage_report(io); break;
    }
    Manifest(cfg.out_dir).record(stage, io.inputs, io.outputs, cfg.seed);
    out.message = stage_name(stage) + ": wrote " + std::to_string(io.outputs.size()) + " artifacts";
  } catch (const MissingArtifactError& e) {
    out = {kExitMissing, stage_name(stage) + ": " + e.what()};
  } catch (const ValidationError& e) {
    out = {kExitInvalid, stage_name(stage) + ": " + e.what()};
  } catch (const ParseError& e) {
    out = {kExitInvalid, stage_name(stage) + ": " + e.what()};
  } catch (const ProvenanceError& e) {
    out = {kExitInvalid, stage_name(stage) + ": " + e.what()};
  } catch (const std::exception& e) {
    out = {kExitRuntime, stage_name(stage) + ": " + e.what()};
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (out.exit_code == kExitOk) {
    try {
      detail::record_timing(cfg.out_dir, stage, out.seconds);
    } catch (const std::exception&) {
      // timings are informational
    }
  }
  return out;
}

// All stages in order; stops at the first failure.
inline StageOutcome run_all(const PipelineConfig& cfg, const std::function<void(const StageOutcome&)>& on_stage = {}) {
  StageOutcome last;
  for (Stage s : all_stages()) {
    last = run_stage(s, cfg);
    if (on_stage) on_stage(last);
    if (last.exit_code != kExitOk) return last;
  }
  return last;
}

// --- Bundled scenario ---------------------------------------------------------

// Writes the synthetic scenario's inputs, its ground truth and a config that
// runs the pipeline on it.
inline Scenario write_scenario(const fs::path& dir, const ScenarioSpec& spec = {}) {
  fs::create_directories(dir);
  Scenario sc = generate_scenario(spec);
  write_file_atomic(dir / "links.csv", links_to_csv(sc.mapped));
  write_file_atomic(dir / "nodes.csv", nodes_to_csv(sc.mapped));
  write_file_atomic(dir / "trajectories.csv", trajectories_to_csv(sc.mapped, sc.observed));
  write_file_atomic(dir / "link_counts.csv", link_counts_csv(sc.mapped, sc.link_counts));

  json truth;
  truth["theta_star"] = detail::params_json(spec.theta_star);
  for (const auto& [tod, v] : sc.planted_totals) truth["planted_totals"][std::to_string(tod)] = v;
  for (const auto& [tod, v] : sc.realized_totals) truth["realized_totals"][std::to_string(tod)] = v;
  truth["penetration"] = spec.penetration;
  truth["days"] = spec.days;
  truth["seed"] = spec.seed;
  truth["routes"] = sc.routes.size();
  truth["observed_trips"] = sc.observed.size();
  write_file_atomic(dir / "truth.json", truth.dump(2) + "\n");

  std::ostringstream c;
  c << "; synthetic grid scenario; planted values are in truth.json\n"
    << "[paths]\nnetwork_links = links.csv\nnetwork_nodes = nodes.csv\ntrajectories = trajectories.csv\n"
    << "link_counts = link_counts.csv\nout = run\n"
    << "\n[run]\nseed = 7\n"
    << "\n[ingest]\npenetration = " << format_double(spec.penetration) << "\n"
    << "\n[cluster]\ngmm_k = 0\ngmm_k_min = 6\ngmm_k_max = 12\ncut_threshold = 0.4\n"
    << "\n[spsa]\nmax_iter = 40\n";
  write_file_atomic(dir / "config.ini", c.str());
  return sc;
}

}  // namespace trajcal
