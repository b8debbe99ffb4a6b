#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <queue>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "trajcal/csv.hpp"
#include "trajcal/netmodel.hpp"

namespace trajcal {

// Simulator parameters. The first six are calibrated; the rerouting pair is
// configuration only.
struct SimParams {
  double capacity_scale = 1.0;
  double junction_delay = 2.0;     // s per junction crossing
  double min_headway = 2.0;        // s between exits, per lane
  double speed_factor_mean = 1.0;
  double speed_factor_std = 0.1;
  double departure_jitter = 60.0;  // s, full width of the uniform offset
  double reroute_period = 0.0;     // s, 0 disables rerouting
  double reroute_prob = 0.0;

  bool operator==(const SimParams&) const = default;
};

// Feasible box for the calibrated parameters.
struct ParamBox {
  SimParams lo{0.5, 0.0, 1.0, 0.8, 0.0, 0.0, 0.0, 0.0};
  SimParams hi{2.0, 10.0, 4.0, 1.2, 0.2, 300.0, 0.0, 0.0};

  static ParamBox standard() { return {}; }

  void validate() const {
    auto check = [](double l, double h, const char* name) {
      if (!(l <= h)) throw ValidationError(std::string("parameter box: empty range for ") + name);
    };
    check(lo.capacity_scale, hi.capacity_scale, "capacity_scale");
    check(lo.junction_delay, hi.junction_delay, "junction_delay");
    check(lo.min_headway, hi.min_headway, "min_headway");
    check(lo.speed_factor_mean, hi.speed_factor_mean, "speed_factor_mean");
    check(lo.speed_factor_std, hi.speed_factor_std, "speed_factor_std");
    check(lo.departure_jitter, hi.departure_jitter, "departure_jitter");
    if (!(lo.capacity_scale > 0 && lo.min_headway > 0 && lo.speed_factor_mean > 0)) {
      throw ValidationError("parameter box: capacity_scale, min_headway and speed_factor_mean must be positive");
    }
    if (lo.junction_delay < 0 || lo.speed_factor_std < 0 || lo.departure_jitter < 0) {
      throw ValidationError("parameter box: negative lower bound");
    }
  }

  bool contains(const SimParams& p, double slack = 1e-12) const {
    auto in = [slack](double v, double l, double h) { return v >= l - slack && v <= h + slack; };
    return in(p.capacity_scale, lo.capacity_scale, hi.capacity_scale) &&
           in(p.junction_delay, lo.junction_delay, hi.junction_delay) &&
           in(p.min_headway, lo.min_headway, hi.min_headway) &&
           in(p.speed_factor_mean, lo.speed_factor_mean, hi.speed_factor_mean) &&
           in(p.speed_factor_std, lo.speed_factor_std, hi.speed_factor_std) &&
           in(p.departure_jitter, lo.departure_jitter, hi.departure_jitter);
  }
};

inline void validate_params(const SimParams& p) {
  if (!(p.capacity_scale > 0)) throw ValidationError("capacity_scale must be positive");
  if (!(p.min_headway > 0)) throw ValidationError("min_headway must be positive");
  if (!(p.speed_factor_mean > 0)) throw ValidationError("speed_factor_mean must be positive");
  if (p.junction_delay < 0 || p.speed_factor_std < 0 || p.departure_jitter < 0 || p.reroute_period < 0) {
    throw ValidationError("simulator parameters must be non-negative");
  }
  if (!(p.reroute_prob >= 0 && p.reroute_prob <= 1)) throw ValidationError("reroute_prob must be in [0, 1]");
}

struct SimTrip {
  std::string trip_id;
  PathId path = 0;
  double departure_time = 0.0;  // s since midnight
};

struct SimOptions {
  double horizon = 26.0 * kSecondsPerHour;  // one day plus a two-hour drain
  bool record_traces = false;
};

struct TripResult {
  std::string trip_id;
  PathId path = 0;        // requested path
  PathId final_path = 0;  // differs only after rerouting
  int tod = 0;            // interval of the requested departure
  double departure = 0.0;  // actual, after jitter
  double travel_time = 0.0;
  double speed_factor = 1.0;
  bool completed = false;
  bool rejected = false;
  // Filled when SimOptions::record_traces is set.
  std::vector<LinkIndex> links;
  std::vector<double> entry_times;
  std::vector<double> exit_times;
};

struct LinkWindowStats {
  std::size_t entries = 0;
  std::size_t exits = 0;
  double speed_sum = 0.0;
  double mean_speed() const { return exits > 0 ? speed_sum / static_cast<double>(exits) : 0.0; }
};

struct SimResult {
  std::vector<TripResult> trips;
  // [link][window]; windows are the TOD intervals followed by the drain.
  std::vector<std::vector<LinkWindowStats>> link_stats;
  std::vector<std::size_t> link_entries;
  std::vector<std::size_t> link_exits;
  std::vector<std::size_t> link_on_link;  // still on the link at the horizon
  std::size_t requested = 0;
  std::size_t completed = 0;
  std::size_t rejected = 0;
  double loaded_fraction = 0.0;

  double total_travel_time() const {
    double t = 0;
    for (const auto& tr : trips) {
      if (tr.completed) t += tr.travel_time;
    }
    return t;
  }
};

// Completed over requested; an empty request set counts as nothing loaded.
inline double throughput(const SimResult& r) {
  return r.requested > 0 ? static_cast<double>(r.completed) / static_cast<double>(r.requested) : 0.0;
}

// Service interval of a link: the per-lane minimum headway or the scaled
// capacity rate, whichever is slower.
inline double service_headway(const Link& link, const SimParams& p) {
  return std::max(p.min_headway / link.lanes, kSecondsPerHour / (p.capacity_scale * link.capacity_vph));
}

// Truncated normal (+-2 sd), floored at 0.1.
inline double draw_speed_factor(std::mt19937_64& rng, double mean, double sd) {
  if (sd <= 0) return std::max(0.1, mean);
  std::normal_distribution<double> g(0.0, 1.0);
  double z = g(rng);
  while (std::abs(z) > 2.0) z = g(rng);
  return std::max(0.1, mean + sd * z);
}

namespace detail {

struct SimEvent {
  double time;
  std::uint64_t seq;
  std::uint32_t vehicle;
  bool operator>(const SimEvent& o) const { return time != o.time ? time > o.time : seq > o.seq; }
};

struct SimVehicle {
  std::size_t trip = 0;
  std::size_t path = 0;  // index into the path list
  std::size_t pos = 0;   // index of the next link to enter
  double speed_factor = 1.0;
  double depart = 0.0;
  long long epoch = -1;
  std::mt19937_64 rng;
};

struct SimLinkState {
  double last_exit = -std::numeric_limits<double>::infinity();
  std::vector<double> window_exits;
};

}  // namespace detail

// Event-driven point-queue simulation. Each link serves its vehicles in entry
// order: a vehicle is ready to leave after length / (speed_limit * factor),
// leaves no sooner than one service headway after its predecessor, and is
// pushed into the next interval when the current one has used up its
// capacity_scale * capacity exits. Crossing a junction node into the next link
// costs junction_delay.
inline SimResult run_simulation(const Network& net, const std::vector<Path>& paths, const std::vector<SimTrip>& trips,
                                const SimParams& params, const TODSchedule& schedule, std::uint64_t seed,
                                const SimOptions& opts = {}) {
  validate_params(params);
  const double horizon = opts.horizon;
  std::unordered_map<PathId, std::size_t> path_index;
  std::map<ODPair, std::vector<std::size_t>> od_paths;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    path_index.emplace(paths[i].id, i);
    od_paths[paths[i].od_pair].push_back(i);
  }
  std::vector<bool> path_ok(paths.size());
  for (std::size_t i = 0; i < paths.size(); ++i) path_ok[i] = validate_path(net, paths[i].links);

  // Capacity windows: the TOD intervals, then the drain up to the horizon.
  std::vector<double> win_start, win_end;
  for (const auto& iv : schedule.intervals()) {
    win_start.push_back(iv.start_s());
    win_end.push_back(iv.end_s());
  }
  win_start.push_back(kSecondsPerDay);
  win_end.push_back(std::max(horizon, kSecondsPerDay));
  const std::size_t n_win = win_start.size();
  auto window_of = [&](double t) -> std::size_t {
    if (t >= kSecondsPerDay) return n_win - 1;
    for (std::size_t w = 0; w + 1 < n_win; ++w) {
      if (t < win_end[w]) return w;
    }
    return n_win - 2;
  };

  SimResult res;
  res.requested = trips.size();
  res.link_stats.assign(net.num_links(), std::vector<LinkWindowStats>(n_win));
  res.link_entries.assign(net.num_links(), 0);
  res.link_exits.assign(net.num_links(), 0);
  res.link_on_link.assign(net.num_links(), 0);
  std::vector<detail::SimLinkState> links(net.num_links());
  for (auto& ls : links) ls.window_exits.assign(n_win, 0.0);
  std::vector<double> headway(net.num_links());
  for (LinkIndex l = 0; l < net.num_links(); ++l) headway[l] = service_headway(net.link(l), params);

  std::vector<detail::SimVehicle> vehicles;
  std::priority_queue<detail::SimEvent, std::vector<detail::SimEvent>, std::greater<>> events;
  std::uint64_t seq = 0;
  res.trips.resize(trips.size());
  for (std::size_t i = 0; i < trips.size(); ++i) {
    const SimTrip& t = trips[i];
    TripResult& tr = res.trips[i];
    tr.trip_id = t.trip_id;
    tr.path = tr.final_path = t.path;
    tr.tod = schedule.interval_of(t.departure_time);
    auto it = path_index.find(t.path);
    if (it == path_index.end() || !path_ok[it->second] || paths[it->second].links.empty()) {
      tr.rejected = true;
      ++res.rejected;
      continue;
    }
    detail::SimVehicle v;
    v.trip = i;
    v.path = it->second;
    v.rng.seed(mix_seed(seed, i));
    v.speed_factor = draw_speed_factor(v.rng, params.speed_factor_mean, params.speed_factor_std);
    const double jitter = params.departure_jitter > 0 ? (uniform01(v.rng) - 0.5) * params.departure_jitter : 0.0;
    v.depart = std::max(0.0, t.departure_time + jitter);
    tr.departure = v.depart;
    tr.speed_factor = v.speed_factor;
    events.push({v.depart, seq++, static_cast<std::uint32_t>(vehicles.size())});
    vehicles.push_back(std::move(v));
  }

  // Remaining-time estimate used by rerouting: free flow plus the current
  // queue backlog on each link.
  auto remaining_time = [&](const Path& p, std::size_t from, double now, double factor) {
    double t = now;
    for (std::size_t k = from; k < p.links.size(); ++k) {
      const Link& l = net.link(p.links[k]);
      t = std::max(t + l.length / (l.speed_limit * factor), links[p.links[k]].last_exit + headway[p.links[k]]);
      if (k + 1 < p.links.size() && net.node(l.to).is_junction) t += params.junction_delay;
    }
    return t - now;
  };

  while (!events.empty()) {
    const detail::SimEvent ev = events.top();
    events.pop();
    detail::SimVehicle& v = vehicles[ev.vehicle];
    TripResult& tr = res.trips[v.trip];
    if (ev.time > horizon) continue;  // never enters; stays incomplete

    if (params.reroute_period > 0 && params.reroute_prob > 0) {
      const auto epoch = static_cast<long long>(std::floor(ev.time / params.reroute_period));
      if (epoch > v.epoch) {
        v.epoch = epoch;
        if (uniform01(v.rng) < params.reroute_prob) {
          const std::size_t node = net.link(paths[v.path].links[v.pos]).from;
          double best = remaining_time(paths[v.path], v.pos, ev.time, v.speed_factor);
          for (std::size_t alt : od_paths[paths[v.path].od_pair]) {
            if (alt == v.path || !path_ok[alt]) continue;
            const auto& al = paths[alt].links;
            for (std::size_t k = 0; k < al.size(); ++k) {
              if (net.link(al[k]).from != node) continue;
              const double t = remaining_time(paths[alt], k, ev.time, v.speed_factor);
              if (t < best) {
                best = t;
                v.path = alt;
                v.pos = k;
              }
              break;
            }
          }
          tr.final_path = paths[v.path].id;
        }
      }
    }

    const LinkIndex li = paths[v.path].links[v.pos];
    const Link& link = net.link(li);
    detail::SimLinkState& ls = links[li];
    const double ready = ev.time + link.length / (link.speed_limit * v.speed_factor);
    double exit = std::max(ready, ls.last_exit + headway[li]);
    std::size_t w = window_of(exit);
    while (w + 1 < n_win &&
           ls.window_exits[w] + 1.0 > params.capacity_scale * link.capacity_vph * (win_end[w] - win_start[w]) /
                                          kSecondsPerHour) {
      ++w;
      exit = std::max(exit, win_start[w]);
    }
    ls.last_exit = exit;
    ls.window_exits[w] += 1.0;

    ++res.link_entries[li];
    ++res.link_stats[li][window_of(ev.time)].entries;
    if (opts.record_traces) {
      tr.links.push_back(li);
      tr.entry_times.push_back(ev.time);
      tr.exit_times.push_back(exit);
    }
    if (exit > horizon) {
      ++res.link_on_link[li];
      continue;
    }
    ++res.link_exits[li];
    auto& ws = res.link_stats[li][window_of(ev.time)];
    ++ws.exits;
    ws.speed_sum += link.length / (exit - ev.time);

    if (v.pos + 1 == paths[v.path].links.size()) {
      tr.completed = true;
      tr.travel_time = exit - v.depart;
      ++res.completed;
      continue;
    }
    ++v.pos;
    const double next = exit + (net.node(link.to).is_junction ? params.junction_delay : 0.0);
    events.push({next, seq++, ev.vehicle});
  }
  res.loaded_fraction = throughput(res);
  return res;
}

// Evaluation set: trips whose requested departure lies in a main interval.
inline SimResult apply_warmup_cooldown(const SimResult& r, const TODSchedule& schedule) {
  SimResult out;
  out.link_stats = r.link_stats;
  out.link_entries = r.link_entries;
  out.link_exits = r.link_exits;
  out.link_on_link = r.link_on_link;
  for (const auto& t : r.trips) {
    if (!schedule.is_main(t.tod)) continue;
    out.trips.push_back(t);
    ++out.requested;
    out.completed += t.completed;
    out.rejected += t.rejected;
  }
  out.loaded_fraction = throughput(out);
  return out;
}

// --- I/O --------------------------------------------------------------------

inline std::string trip_table_csv(const std::vector<SimTrip>& trips) {
  csv::Writer w{"trip_id", "path_id", "departure_time_s"};
  for (const auto& t : trips) w.row(t.trip_id, t.path, t.departure_time);
  return w.str();
}

inline std::vector<SimTrip> parse_trip_table(const csv::Table& table) {
  std::vector<SimTrip> out;
  if (table.rows().empty()) return out;
  table.require({"trip_id", "path_id", "departure_time_s"});
  for (const auto& row : table.rows()) {
    out.push_back({table.str(row, "trip_id"), static_cast<PathId>(table.integer(row, "path_id")),
                   table.num(row, "departure_time_s")});
  }
  return out;
}

inline std::string sim_result_csv(const SimResult& r) {
  csv::Writer w{"trip_id", "path_id", "tod", "departure_s", "travel_time_s", "completed"};
  for (const auto& t : r.trips) {
    w.row(t.trip_id, t.final_path, t.tod, t.departure, t.travel_time, t.completed ? 1 : 0);
  }
  return w.str();
}

inline std::string sim_link_flows_csv(const Network& net, const SimResult& r) {
  csv::Writer w{"link_id", "window", "entries", "exits", "mean_speed_mps"};
  for (LinkIndex l = 0; l < net.num_links(); ++l) {
    for (std::size_t k = 0; k < r.link_stats[l].size(); ++k) {
      const auto& s = r.link_stats[l][k];
      if (s.entries == 0) continue;
      w.row(net.link(l).id, k + 1, s.entries, s.exits, s.mean_speed());
    }
  }
  return w.str();
}

}  // namespace trajcal
