#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "trajcal/ingest.hpp"
#include "trajcal/mesosim.hpp"
#include "trajcal/netmodel.hpp"

namespace trajcal {

// Synthetic ground truth: a grid city with zones at a few nodes, planted
// routes per OD pair, a known parameter set, and a trajectory sample drawn
// from simulated days.
struct ScenarioSpec {
  int grid = 8;
  double spacing = 400.0;     // m
  double speed_limit = 13.4;  // m/s, about 30 mph
  double capacity_vph = 800.0;
  std::vector<int> zone_lines{1, 3, 6};  // zones at (r, c) for r, c in this set
  double penetration = 0.075;
  int days = 12;
  double noisy_share = 0.05;             // trips on a detour variant of their route
  double wrong_speed_fraction = 0.15;    // links whose mapped limit is off
  double wrong_speed_factor = 0.6;
  std::array<double, 6> utilization{0.15, 0.9, 0.6, 0.9, 0.5, 0.2};  // peak link load / service rate
  std::size_t measured_links = 12;
  double endpoint_scatter = 60.0;  // m
  SimParams theta_star{0.9, 3.0, 2.5, 0.95, 0.08, 60.0, 0.0, 0.0};
  std::uint64_t seed = 2024;
};

struct Scenario {
  ScenarioSpec spec;
  Network truth;   // true speed limits
  Network mapped;  // what the map says
  TODSchedule schedule = TODSchedule::standard();
  std::vector<std::size_t> zone_nodes;
  std::vector<Path> routes;                        // planted routes and their detour variants
  std::vector<std::vector<double>> rate;           // [tod-1][route] expected trips per hour
  std::map<int, double> planted_totals;            // expected daily trips per TOD
  std::map<int, double> realized_totals;           // mean over simulated days
  std::map<std::pair<int, LinkIndex>, double> link_counts;  // (tod, link) mean daily entries
  std::vector<TrajectoryRecord> observed;
};

namespace detail {

struct GridWalker {
  const Network& net;
  int n;

  std::size_t node(int r, int c) const { return static_cast<std::size_t>(r * n + c); }

  // Straight-line walk through a list of row/column-aligned waypoints.
  std::vector<LinkIndex> walk(const std::vector<std::pair<int, int>>& pts) const {
    std::vector<LinkIndex> out;
    for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
      auto [r, c] = pts[k];
      const auto [r2, c2] = pts[k + 1];
      while (r != r2 || c != c2) {
        const int nr = r + (r2 > r) - (r2 < r), nc = c + (c2 > c) - (c2 < c);
        out.push_back(link(node(r, c), node(nr, nc)));
        r = nr;
        c = nc;
      }
    }
    return out;
  }

  LinkIndex link(std::size_t a, std::size_t b) const {
    for (LinkIndex e : net.out_links(a)) {
      if (net.link(e).to == b) return e;
    }
    throw ValidationError("grid has no link between the given nodes");
  }

  std::pair<int, int> rc(std::size_t v) const { return {static_cast<int>(v) / n, static_cast<int>(v) % n}; }

  // Replace link k by a three-link detour around one block.
  std::vector<LinkIndex> detour(const std::vector<LinkIndex>& route, std::size_t k, int side) const {
    const auto [r1, c1] = rc(net.link(route[k]).from);
    const auto [r2, c2] = rc(net.link(route[k]).to);
    const int dr = r1 == r2 ? side : 0, dc = c1 == c2 ? side : 0;
    auto inside = [&](int r, int c) { return r >= 0 && r < n && c >= 0 && c < n; };
    int s = 1;
    if (!inside(r1 + dr, c1 + dc)) s = -1;
    std::vector<LinkIndex> out(route.begin(), route.begin() + static_cast<std::ptrdiff_t>(k));
    const auto mid = walk({{r1, c1}, {r1 + s * dr, c1 + s * dc}, {r2 + s * dr, c2 + s * dc}, {r2, c2}});
    out.insert(out.end(), mid.begin(), mid.end());
    out.insert(out.end(), route.begin() + static_cast<std::ptrdiff_t>(k) + 1, route.end());
    return out;
  }
};

}  // namespace detail

inline Scenario generate_scenario(const ScenarioSpec& spec) {
  if (!(spec.penetration > 0 && spec.penetration <= 1)) throw ValidationError("penetration must be in (0, 1]");
  if (spec.days < 1) throw ValidationError("scenario needs at least one day");
  validate_params(spec.theta_star);
  Scenario sc;
  sc.spec = spec;
  sc.truth = make_grid_network(spec.grid, spec.spacing, spec.speed_limit, 1, spec.capacity_vph);
  std::mt19937_64 rng(mix_seed(spec.seed, 1));
  auto unif = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };

  {
    std::vector<double> limits(sc.truth.num_links());
    for (LinkIndex e = 0; e < sc.truth.num_links(); ++e) {
      const bool wrong = unif(0, 1) < spec.wrong_speed_fraction;
      limits[e] = spec.speed_limit * (wrong ? spec.wrong_speed_factor : 1.0);
    }
    sc.mapped = sc.truth.with_speed_limits(limits);
  }

  const detail::GridWalker g{sc.truth, spec.grid};
  std::vector<std::pair<int, int>> zones;
  for (int r : spec.zone_lines) {
    for (int c : spec.zone_lines) {
      if (r < 0 || r >= spec.grid || c < 0 || c >= spec.grid) throw ValidationError("zone outside the grid");
      zones.emplace_back(r, c);
      sc.zone_nodes.push_back(g.node(r, c));
    }
  }

  // Routes per OD pair and their demand weights.
  std::vector<double> share;  // share of OD demand, per route
  std::vector<double> od_weight;
  std::vector<std::size_t> od_of;
  for (std::size_t a = 0; a < zones.size(); ++a) {
    for (std::size_t b = 0; b < zones.size(); ++b) {
      if (a == b) continue;
      const auto [r1, c1] = zones[a];
      const auto [r2, c2] = zones[b];
      std::vector<std::vector<LinkIndex>> base;
      if (r1 != r2 && c1 != c2) {
        base.push_back(g.walk({{r1, c1}, {r1, c2}, {r2, c2}}));
        base.push_back(g.walk({{r1, c1}, {r2, c1}, {r2, c2}}));
        if (std::abs(c2 - c1) >= 2) {
          const int cm = (c1 + c2) / 2;
          base.push_back(g.walk({{r1, c1}, {r1, cm}, {r2, cm}, {r2, c2}}));
        }
      } else {
        base.push_back(g.walk({{r1, c1}, {r2, c2}}));
        const int s = (r1 == r2 ? r1 : c1) + 1 < spec.grid ? 1 : -1;
        if (r1 == r2) {
          base.push_back(g.walk({{r1, c1}, {r1 + s, c1}, {r2 + s, c2}, {r2, c2}}));
        } else {
          base.push_back(g.walk({{r1, c1}, {r1, c1 + s}, {r2, c2 + s}, {r2, c2}}));
        }
      }
      const std::size_t od = od_weight.size();
      od_weight.push_back(unif(0.5, 1.5));
      std::vector<double> w;
      for (std::size_t i = 0; i < base.size(); ++i) w.push_back(unif(0.3, 1.0));
      double wsum = 0;
      for (double x : w) wsum += x;
      for (std::size_t i = 0; i < base.size(); ++i) {
        const double s = w[i] / wsum;
        const auto id = [&] { return static_cast<PathId>(sc.routes.size()); };
        sc.routes.push_back({id(), {static_cast<ZoneId>(a), static_cast<ZoneId>(b)}, base[i]});
        share.push_back(s * (1.0 - spec.noisy_share));
        od_of.push_back(od);
        const std::size_t len = base[i].size();
        const std::size_t k1 = len / 3, k2 = (2 * len) / 3;
        for (auto [k, side] : {std::pair<std::size_t, int>{k1, 1}, {k2, -1}}) {
          sc.routes.push_back({id(), {static_cast<ZoneId>(a), static_cast<ZoneId>(b)}, g.detour(base[i], k, side)});
          share.push_back(s * spec.noisy_share / 2.0);
          od_of.push_back(od);
        }
      }
    }
  }
  for (const auto& p : sc.routes) {
    if (!validate_path(sc.truth, p.links)) throw ValidationError("generated route is not connected");
  }

  // Scale each interval so its busiest link runs at the target utilization
  // of the true service rate.
  std::vector<double> load(sc.truth.num_links(), 0.0);
  for (std::size_t m = 0; m < sc.routes.size(); ++m) {
    for (LinkIndex e : sc.routes[m].links) load[e] += od_weight[od_of[m]] * share[m];
  }
  double scale = std::numeric_limits<double>::infinity();
  for (LinkIndex e = 0; e < sc.truth.num_links(); ++e) {
    if (load[e] > 0) scale = std::min(scale, kSecondsPerHour / service_headway(sc.truth.link(e), spec.theta_star) / load[e]);
  }
  for (const auto& iv : sc.schedule.intervals()) {
    std::vector<double> r(sc.routes.size());
    double total = 0;
    for (std::size_t m = 0; m < r.size(); ++m) {
      r[m] = spec.utilization[static_cast<std::size_t>(iv.index - 1)] * scale * od_weight[od_of[m]] * share[m];
      total += r[m] * iv.hours();
    }
    sc.rate.push_back(std::move(r));
    sc.planted_totals[iv.index] = total;
  }

  // Simulated days.
  std::vector<LinkIndex> measured;
  {
    std::vector<LinkIndex> used;
    for (LinkIndex e = 0; e < sc.truth.num_links(); ++e) {
      if (load[e] > 0) used.push_back(e);
    }
    std::shuffle(used.begin(), used.end(), rng);
    used.resize(std::min(spec.measured_links, used.size()));
    std::sort(used.begin(), used.end());
    measured = used;
  }
  for (const auto& iv : sc.schedule.intervals()) sc.realized_totals[iv.index] = 0.0;
  SimOptions opts;
  opts.record_traces = true;
  for (int day = 0; day < spec.days; ++day) {
    std::mt19937_64 drng(mix_seed(spec.seed, 100 + static_cast<std::uint64_t>(day)));
    std::vector<SimTrip> trips;
    for (const auto& iv : sc.schedule.intervals()) {
      for (std::size_t m = 0; m < sc.routes.size(); ++m) {
        std::poisson_distribution<int> count(sc.rate[static_cast<std::size_t>(iv.index - 1)][m] * iv.hours());
        const int n = count(drng);
        for (int i = 0; i < n; ++i) {
          const double t = std::uniform_real_distribution<double>(iv.start_s(), iv.end_s())(drng);
          trips.push_back({"", sc.routes[m].id, t});
        }
        sc.realized_totals[iv.index] += n;
      }
    }
    std::sort(trips.begin(), trips.end(),
              [](const SimTrip& a, const SimTrip& b) { return a.departure_time < b.departure_time; });
    char day_id[16];
    std::snprintf(day_id, sizeof(day_id), "d%02d", day);
    for (std::size_t i = 0; i < trips.size(); ++i) trips[i].trip_id = std::string(day_id) + "_" + std::to_string(i);
    const SimResult res = run_simulation(sc.truth, sc.routes, trips, spec.theta_star, sc.schedule,
                                         mix_seed(spec.seed, 200 + static_cast<std::uint64_t>(day)), opts);
    for (const auto& tr : res.trips) {
      for (std::size_t k = 0; k < tr.links.size(); ++k) {
        if (std::binary_search(measured.begin(), measured.end(), tr.links[k]) && tr.entry_times[k] < kSecondsPerDay) {
          sc.link_counts[{sc.schedule.interval_of(tr.entry_times[k]), tr.links[k]}] += 1.0 / spec.days;
        }
      }
      if (!tr.completed || uniform01(drng) >= spec.penetration) continue;
      TrajectoryRecord r;
      r.trip_id = tr.trip_id;
      r.day = day_id;
      r.links = tr.links;
      r.entry_times = tr.entry_times;
      r.exit_time = tr.exit_times.back();
      std::normal_distribution<double> scatter(0.0, spec.endpoint_scatter);
      const Node& o = sc.truth.node(sc.truth.link(r.links.front()).from);
      const Node& d = sc.truth.node(sc.truth.link(r.links.back()).to);
      r.origin = {o.x + scatter(drng), o.y + scatter(drng)};
      r.destination = {d.x + scatter(drng), d.y + scatter(drng)};
      r.travel_time = r.exit_time - r.entry_times.front();
      r.distance = path_length(sc.truth, r.links);
      sc.observed.push_back(std::move(r));
    }
  }
  for (auto& [tod, v] : sc.realized_totals) v /= spec.days;
  for (LinkIndex e : measured) {
    for (const auto& iv : sc.schedule.intervals()) sc.link_counts.try_emplace({iv.index, e}, 0.0);
  }
  return sc;
}

inline std::string link_counts_csv(const Network& net, const std::map<std::pair<int, LinkIndex>, double>& counts) {
  csv::Writer w{"link_id", "tod", "count"};
  for (const auto& [key, v] : counts) w.row(net.link(key.second).id, key.first, v);
  return w.str();
}

// (tod, link) -> full-scale count for one average day.
inline std::map<std::pair<int, LinkIndex>, double> parse_link_counts(const Network& net, const csv::Table& table) {
  std::map<std::pair<int, LinkIndex>, double> out;
  if (table.rows().empty()) return out;
  table.require({"link_id", "tod", "count"});
  for (const auto& row : table.rows()) {
    auto e = net.find_link(table.str(row, "link_id"));
    if (!e) throw ParseError(table.source(), row.line, "unknown link '" + table.str(row, "link_id") + "'");
    const double v = table.num(row, "count");
    if (v < 0) throw ParseError(table.source(), row.line, "negative link count");
    out[{static_cast<int>(table.integer(row, "tod")), *e}] = v;
  }
  return out;
}

}  // namespace trajcal
