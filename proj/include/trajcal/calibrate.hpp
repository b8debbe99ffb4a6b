#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <future>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "trajcal/clustering.hpp"
#include "trajcal/csv.hpp"
#include "trajcal/ingest.hpp"
#include "trajcal/mesosim.hpp"

namespace trajcal {

class CalibrationError : public Error {
 public:
  using Error::Error;
};

// --- Parameter vector -------------------------------------------------------

// The six calibrated simulator parameters, in a fixed order.
inline constexpr std::size_t kThetaDim = 6;
using ThetaVector = std::array<double, kThetaDim>;

inline const std::array<const char*, kThetaDim>& theta_names() {
  static const std::array<const char*, kThetaDim> names{"capacity_scale",    "junction_delay",   "min_headway",
                                                        "speed_factor_mean", "speed_factor_std", "departure_jitter"};
  return names;
}

inline ThetaVector to_theta(const SimParams& p) {
  return {p.capacity_scale, p.junction_delay, p.min_headway, p.speed_factor_mean, p.speed_factor_std,
          p.departure_jitter};
}

// Calibrated entries from v, everything else from base.
inline SimParams from_theta(const ThetaVector& v, SimParams base = {}) {
  base.capacity_scale = v[0];
  base.junction_delay = v[1];
  base.min_headway = v[2];
  base.speed_factor_mean = v[3];
  base.speed_factor_std = v[4];
  base.departure_jitter = v[5];
  return base;
}

// Each dimension mapped to [0, 1] over the box; degenerate ranges map to 0.
inline ThetaVector normalize(const ParamBox& box, const SimParams& p) {
  const ThetaVector lo = to_theta(box.lo), hi = to_theta(box.hi), v = to_theta(p);
  ThetaVector u{};
  for (std::size_t i = 0; i < kThetaDim; ++i) u[i] = hi[i] > lo[i] ? (v[i] - lo[i]) / (hi[i] - lo[i]) : 0.0;
  return u;
}

inline SimParams denormalize(const ParamBox& box, const ThetaVector& u, const SimParams& base = {}) {
  const ThetaVector lo = to_theta(box.lo), hi = to_theta(box.hi);
  ThetaVector v{};
  for (std::size_t i = 0; i < kThetaDim; ++i) v[i] = lo[i] + std::clamp(u[i], 0.0, 1.0) * (hi[i] - lo[i]);
  return from_theta(v, base);
}

inline ThetaVector clip_unit(ThetaVector u) {
  for (double& x : u) x = std::clamp(x, 0.0, 1.0);
  return u;
}

// --- Loss ---------------------------------------------------------------------

// An observed trip resolved to its representative path.
struct ObservedTrip {
  std::string trip_id;
  PathId path = 0;
  int tod = 0;
  double departure = 0.0;
  double travel_time = 0.0;
  std::vector<LinkIndex> links;  // the observed link sequence
};

inline std::vector<ObservedTrip> observed_trips(const std::vector<TrajectoryRecord>& records,
                                                const std::vector<TripLabel>& labels) {
  std::vector<ObservedTrip> out;
  out.reserve(labels.size());
  for (const auto& l : labels) {
    const auto& r = records[l.record];
    out.push_back({r.trip_id, l.path, l.tod != 0 ? l.tod : r.tod, r.departure(), r.travel_time, r.links});
  }
  return out;
}

struct LossResult {
  double loss = 0.0;  // mean squared travel-time error, s^2
  std::size_t matched = 0;
  std::size_t unmatched = 0;
  double total_travel_time = 0.0;  // completed simulated trips, s
};

// Each observed trip in a main interval is paired with the completed simulated
// trip on the same path, in the same interval, whose departure is nearest;
// ties go to the earlier departure. Pairing is with replacement. Entry i is
// the matched simulated travel time of observed[i], if any.
struct TripMatches {
  std::vector<std::optional<double>> simulated;
  std::size_t unmatched = 0;  // main-interval observations without a partner
  double total_travel_time = 0.0;  // completed simulated trips, s
};

inline TripMatches match_observed(const SimResult& sim, const std::vector<ObservedTrip>& observed,
                                  const TODSchedule& schedule) {
  std::map<std::pair<PathId, int>, std::vector<std::pair<double, double>>> pool;
  TripMatches out;
  for (const auto& t : sim.trips) {
    if (!t.completed) continue;
    out.total_travel_time += t.travel_time;
    pool[{t.final_path, t.tod}].push_back({t.departure, t.travel_time});
  }
  for (auto& [key, v] : pool) std::sort(v.begin(), v.end());
  out.simulated.resize(observed.size());
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const auto& o = observed[i];
    if (!schedule.is_main(o.tod)) continue;
    auto it = pool.find({o.path, o.tod});
    if (it == pool.end()) {
      ++out.unmatched;
      continue;
    }
    const auto& v = it->second;
    auto hi = std::lower_bound(v.begin(), v.end(), std::pair<double, double>{o.departure, -1.0});
    auto best = hi;
    if (hi == v.end() || (hi != v.begin() && o.departure - std::prev(hi)->first <= hi->first - o.departure)) {
      best = std::prev(hi);
    }
    out.simulated[i] = best->second;
  }
  return out;
}

inline LossResult travel_time_loss(const SimResult& sim, const std::vector<ObservedTrip>& observed,
                                   const TODSchedule& schedule) {
  const TripMatches m = match_observed(sim, observed, schedule);
  LossResult out;
  out.unmatched = m.unmatched;
  out.total_travel_time = m.total_travel_time;
  double sse = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (!m.simulated[i]) continue;
    const double e = *m.simulated[i] - observed[i].travel_time;
    sse += e * e;
    ++out.matched;
  }
  if (out.matched == 0) {
    throw CalibrationError("no observed trip could be matched to a simulated trip (" + std::to_string(out.unmatched) +
                           " unmatched)");
  }
  out.loss = sse / static_cast<double>(out.matched);
  return out;
}

// --- SPSA ---------------------------------------------------------------------

// a_k = a / (k + 1 + A)^alpha_exp, c_k = c / (k + 1)^gamma_exp.
struct GainSchedule {
  double a = 0.1;
  double A = 0.0;
  double alpha_exp = 0.602;
  double c = 0.1;
  double gamma_exp = 0.101;

  void validate() const {
    if (!(a > 0 && c > 0)) throw ValidationError("SPSA gains a and c must be positive");
    if (!(A >= 0)) throw ValidationError("SPSA stability constant A must be non-negative");
    if (!(alpha_exp > 0.5 && alpha_exp <= 1.0)) throw ValidationError("SPSA alpha_exp must be in (0.5, 1]");
    if (!(gamma_exp > 0.0 && gamma_exp <= 0.5)) throw ValidationError("SPSA gamma_exp must be in (0, 0.5]");
  }
  double a_k(int k) const { return a / std::pow(k + 1 + A, alpha_exp); }
  double c_k(int k) const { return c / std::pow(k + 1, gamma_exp); }

  // Standard practice: A at 10% of the iteration budget.
  static GainSchedule standard(int max_iter, double c = 0.1) {
    GainSchedule g;
    g.A = 0.1 * max_iter;
    g.c = c;
    return g;
  }
};

struct Evaluation {
  double loss = 0.0;
  double total_travel_time = 0.0;
};

// Loss of a parameter set under a simulation seed.
using Objective = std::function<Evaluation(const SimParams&, std::uint64_t)>;

struct SPSAOptions {
  int max_iter = 100;
  double eps = -1.0;       // stop when |TTT_k - TTT_{k-1}| <= eps; negative: 0.1% of TTT_k
  bool auto_gain = false;  // rescale a so the first step moves 5% of the box
  bool parallel = true;    // evaluate the perturbed pair concurrently
  std::uint64_t seed = 0;
};

enum class CalibrationStatus { converged, max_iter };

inline const char* to_string(CalibrationStatus s) { return s == CalibrationStatus::converged ? "converged" : "max_iter"; }

struct CalibrationRun {
  std::vector<SimParams> theta_history;  // centre of iteration k
  std::vector<double> loss_history;      // (L+ + L-) / 2
  std::vector<double> total_travel_time_history;
  std::vector<double> loss_plus;
  std::vector<double> loss_minus;
  CalibrationStatus status = CalibrationStatus::max_iter;
  SimParams theta_opt;
  std::size_t evaluations = 0;
  std::size_t retries = 0;
  double a = 0.0;  // gain actually used

  std::size_t iterations() const { return theta_history.size(); }
};

namespace detail {

inline ThetaVector draw_delta(std::mt19937_64& rng) {
  ThetaVector d{};
  for (double& x : d) x = (rng() >> 63) ? 1.0 : -1.0;
  return d;
}

}  // namespace detail

// Box-projected SPSA in the normalized parameter space. Both perturbed points
// share the seed mix_seed(seed, k). A failed evaluation (exception or non-finite
// value) repeats the iteration once with a fresh perturbation, then aborts.
inline CalibrationRun spsa_calibrate(const Objective& objective, const SimParams& theta0, GainSchedule gains,
                                     const ParamBox& box, const SPSAOptions& opts) {
  box.validate();
  gains.validate();
  if (opts.max_iter < 1) throw ValidationError("SPSA needs max_iter >= 1");
  if (!box.contains(theta0, 1e-9)) throw ValidationError("initial parameters lie outside the parameter box");

  std::atomic<std::size_t> evaluations{0};
  auto evaluate = [&](const ThetaVector& u, std::uint64_t sim_seed) {
    ++evaluations;
    Evaluation e = objective(denormalize(box, u, theta0), sim_seed);
    if (!std::isfinite(e.loss) || !std::isfinite(e.total_travel_time)) {
      throw CalibrationError("evaluation returned a non-finite value");
    }
    return e;
  };

  CalibrationRun run;
  std::mt19937_64 rng(mix_seed(opts.seed, 0x5350u));
  ThetaVector u = normalize(box, theta0);
  bool gain_set = !opts.auto_gain;
  double prev_ttt = std::numeric_limits<double>::quiet_NaN();
  for (int k = 0; k < opts.max_iter; ++k) {
    const double ck = gains.c_k(k);
    const std::uint64_t sim_seed = mix_seed(opts.seed, static_cast<std::uint64_t>(k));
    ThetaVector delta{}, up{}, um{};
    Evaluation ep, em;
    bool clipped = false;
    for (int attempt = 0;; ++attempt) {
      delta = detail::draw_delta(rng);
      clipped = false;
      for (std::size_t i = 0; i < kThetaDim; ++i) {
        up[i] = std::clamp(u[i] + ck * delta[i], 0.0, 1.0);
        um[i] = std::clamp(u[i] - ck * delta[i], 0.0, 1.0);
        clipped = clipped || up[i] != u[i] + ck * delta[i] || um[i] != u[i] - ck * delta[i];
      }
      try {
        if (opts.parallel) {
          auto fp = std::async(std::launch::async, evaluate, up, sim_seed);
          std::exception_ptr err;
          try {
            em = evaluate(um, sim_seed);
          } catch (...) {
            err = std::current_exception();
          }
          ep = fp.get();
          if (err) std::rethrow_exception(err);
        } else {
          ep = evaluate(up, sim_seed);
          em = evaluate(um, sim_seed);
        }
        break;
      } catch (const std::exception& e) {
        if (attempt > 0) {
          run.evaluations = evaluations;
          throw CalibrationError("SPSA iteration " + std::to_string(k) + " failed twice: " + e.what());
        }
        ++run.retries;
      }
    }

    ThetaVector g{};
    for (std::size_t i = 0; i < kThetaDim; ++i) g[i] = (ep.loss - em.loss) / (2.0 * ck) * delta[i];
    if (!gain_set) {
      double gmax = 0;
      for (double x : g) gmax = std::max(gmax, std::abs(x));
      if (gmax > 0) {
        gains.a = 0.05 * std::pow(1.0 + gains.A, gains.alpha_exp) / gmax;
        gain_set = true;
      }
    }
    run.theta_history.push_back(denormalize(box, u, theta0));
    run.loss_plus.push_back(ep.loss);
    run.loss_minus.push_back(em.loss);
    run.loss_history.push_back(0.5 * (ep.loss + em.loss));
    const double ttt = 0.5 * (ep.total_travel_time + em.total_travel_time);
    run.total_travel_time_history.push_back(ttt);

    const double ak = gains.a_k(k);
    double step = 0;
    for (std::size_t i = 0; i < kThetaDim; ++i) {
      const double next = std::clamp(u[i] - ak * g[i], 0.0, 1.0);
      step = std::max(step, std::abs(next - u[i]));
      u[i] = next;
    }

    // A null step from an unclipped symmetric pair is a fixed point: under the
    // shared seed the next iteration would reproduce this one, so the
    // travel-time change is zero. Clipping at the box can cancel the
    // difference spuriously, so it does not count there.
    const double eps = opts.eps >= 0 ? opts.eps : 1e-3 * std::abs(ttt);
    if ((step <= 1e-12 && !clipped) || (k > 0 && std::abs(ttt - prev_ttt) <= eps)) {
      run.status = CalibrationStatus::converged;
      break;
    }
    prev_ttt = ttt;
  }
  run.theta_opt = denormalize(box, u, theta0);
  run.evaluations = evaluations;
  run.a = gains.a;
  return run;
}

// Relative simulation noise at theta0: std / mean of the loss over replicate
// seeds, clamped to [0.02, 0.2]. Used as the default perturbation size c.
inline double estimate_noise_gain(const Objective& objective, const SimParams& theta0, std::uint64_t seed,
                                  int replicates = 5) {
  std::vector<double> v;
  for (int r = 0; r < replicates; ++r) {
    v.push_back(objective(theta0, mix_seed(seed, 0x4e0000u + static_cast<std::uint64_t>(r))).loss);
  }
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= std::max<double>(1.0, static_cast<double>(v.size()) - 1.0);
  const double rel = mean > 0 ? std::sqrt(var) / mean : 0.0;
  return std::clamp(rel, 0.02, 0.2);
}

// Objective that simulates a fixed trip table and scores it against the
// observations.
inline Objective simulation_objective(const Network& net, const std::vector<Path>& paths,
                                      const std::vector<SimTrip>& trips, const std::vector<ObservedTrip>& observed,
                                      const TODSchedule& schedule, const SimOptions& sim_opts = {}) {
  return [&net, &paths, &trips, &observed, schedule, sim_opts](const SimParams& p, std::uint64_t seed) {
    const SimResult r = run_simulation(net, paths, trips, p, schedule, seed, sim_opts);
    const LossResult l = travel_time_loss(r, observed, schedule);
    return Evaluation{l.loss, l.total_travel_time};
  };
}

inline std::string calibration_log_csv(const CalibrationRun& run) {
  std::vector<std::string> header{"iteration", "L_plus", "L_minus", "total_travel_time"};
  for (const char* n : theta_names()) header.emplace_back(n);
  csv::Writer w(header);
  for (std::size_t k = 0; k < run.iterations(); ++k) {
    std::vector<std::string> row{std::to_string(k), format_double(run.loss_plus[k]), format_double(run.loss_minus[k]),
                                 format_double(run.total_travel_time_history[k])};
    for (double x : to_theta(run.theta_history[k])) row.push_back(format_double(x));
    w.row_strings(row);
  }
  return w.str();
}

// "key = value" lines, readable back as a [simulator] config section.
inline std::string params_to_text(const SimParams& p) {
  std::string out;
  auto line = [&](const char* k, double v) { out += std::string(k) + " = " + format_double(v) + "\n"; };
  const ThetaVector v = to_theta(p);
  for (std::size_t i = 0; i < kThetaDim; ++i) line(theta_names()[i], v[i]);
  line("reroute_period", p.reroute_period);
  line("reroute_prob", p.reroute_prob);
  return out;
}

// --- Up-sampling baselines ----------------------------------------------------

enum class BaselineKind { upsample_max_capacity = 1, upsample_calibrated = 2 };

// Each observed trip repeated round(1 / penetration) times at its observed
// departure; the simulator's departure jitter spreads the copies.
inline std::vector<SimTrip> upsample_trips(const std::vector<ObservedTrip>& observed, double penetration) {
  const PenetrationEstimate pen(penetration);
  const auto copies = static_cast<std::size_t>(std::llround(1.0 / pen.rate()));
  std::vector<SimTrip> out;
  out.reserve(observed.size() * copies);
  for (const auto& o : observed) {
    for (std::size_t r = 0; r < copies; ++r) {
      out.push_back({copies == 1 ? o.trip_id : o.trip_id + "#" + std::to_string(r), o.path, o.departure});
    }
  }
  return out;
}

// Upper-capacity corner of the box; the remaining parameters come from theta.
inline SimParams max_capacity_params(const ParamBox& box, SimParams theta) {
  theta.capacity_scale = box.hi.capacity_scale;
  theta.min_headway = box.lo.min_headway;
  theta.junction_delay = box.lo.junction_delay;
  theta.speed_factor_mean = box.hi.speed_factor_mean;
  return theta;
}

struct BaselineResult {
  BaselineKind kind = BaselineKind::upsample_calibrated;
  SimParams params;
  std::size_t trips = 0;
  double throughput = 0.0;  // loaded fraction over the main intervals
  LossResult loss;
  SimResult sim;
};

// Copies travel the observed link sequence, not the representative, so
// unusual routes are up-sampled with everything else. They are scored against
// the representative they were labeled with.
inline BaselineResult run_baseline(BaselineKind kind, const Network& net, const std::vector<ObservedTrip>& observed,
                                   double penetration, const SimParams& theta, const ParamBox& box,
                                   const TODSchedule& schedule, std::uint64_t seed, const SimOptions& sim_opts = {}) {
  std::vector<Path> raw;
  std::map<std::vector<LinkIndex>, PathId> raw_id;
  std::vector<PathId> label_of;
  std::vector<ObservedTrip> routed = observed;
  for (auto& o : routed) {
    auto [it, inserted] = raw_id.emplace(o.links, static_cast<PathId>(raw.size()));
    if (inserted) {
      raw.push_back({it->second, {0, 0}, o.links});
      label_of.push_back(o.path);
    }
    o.path = it->second;
  }
  BaselineResult out;
  out.kind = kind;
  out.params = kind == BaselineKind::upsample_max_capacity ? max_capacity_params(box, theta) : theta;
  const auto trips = upsample_trips(routed, penetration);
  out.trips = trips.size();
  out.sim = run_simulation(net, raw, trips, out.params, schedule, seed, sim_opts);
  for (auto& t : out.sim.trips) {
    if (!t.rejected) t.final_path = label_of[static_cast<std::size_t>(t.final_path)];
  }
  out.throughput = apply_warmup_cooldown(out.sim, schedule).loaded_fraction;
  out.loss = travel_time_loss(out.sim, observed, schedule);
  return out;
}

}  // namespace trajcal
