#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "trajcal/csv.hpp"
#include "trajcal/netmodel.hpp"

namespace trajcal {

// One map-matched trip. entry_times[k] is the time the vehicle entered
// links[k]; exit_time is when it left the last link.
struct TrajectoryRecord {
  std::string trip_id;
  std::string day;
  std::vector<LinkIndex> links;
  std::vector<double> entry_times;
  double exit_time = 0.0;
  Point origin;
  Point destination;
  double travel_time = 0.0;  // s
  double distance = 0.0;     // m
  int tod = 0;               // 0 until assigned

  double departure() const { return entry_times.empty() ? 0.0 : entry_times.front(); }
  double average_speed() const { return distance / travel_time; }
};

struct TrajectoryLoad {
  std::vector<TrajectoryRecord> records;
  std::vector<std::string> rejected;  // trip ids with non-monotone timestamps
};

namespace detail {

inline bool strictly_increasing(const TrajectoryRecord& r) {
  for (std::size_t k = 1; k < r.entry_times.size(); ++k) {
    if (!(r.entry_times[k] > r.entry_times[k - 1])) return false;
  }
  return r.exit_time > r.entry_times.back();
}

}  // namespace detail

// Rows sharing a trip_id form one record, in file order. The optional
// exit_time_s column (last row of a trip) closes the final link; without it
// the last link is assumed traversed at its speed limit.
inline TrajectoryLoad parse_trajectories(const Network& net, const csv::Table& table) {
  TrajectoryLoad out;
  if (table.rows().empty()) return out;
  table.require({"trip_id", "day", "link_id", "entry_time_s", "origin_x", "origin_y", "dest_x", "dest_y"});
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::optional<double>> exits;
  for (const auto& row : table.rows()) {
    const std::string& id = table.str(row, "trip_id");
    auto [it, inserted] = index.emplace(id, out.records.size());
    if (inserted) {
      TrajectoryRecord r;
      r.trip_id = id;
      r.day = table.str(row, "day");
      r.origin = {table.num(row, "origin_x"), table.num(row, "origin_y")};
      out.records.push_back(std::move(r));
      exits.emplace_back();
    }
    TrajectoryRecord& r = out.records[it->second];
    auto link = net.find_link(table.str(row, "link_id"));
    if (!link) throw ParseError(table.source(), row.line, "unknown link id '" + table.str(row, "link_id") + "'");
    r.links.push_back(*link);
    r.entry_times.push_back(table.num(row, "entry_time_s"));
    r.destination = {table.num(row, "dest_x"), table.num(row, "dest_y")};
    if (auto ex = table.opt(row, "exit_time_s")) exits[it->second] = table.to_double(*ex, row.line, "exit_time_s");
  }

  std::vector<TrajectoryRecord> kept;
  kept.reserve(out.records.size());
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    TrajectoryRecord& r = out.records[i];
    r.exit_time = exits[i].value_or(r.entry_times.back() + net.link(r.links.back()).free_flow_time());
    if (!detail::strictly_increasing(r)) {
      out.rejected.push_back(r.trip_id);
      continue;
    }
    r.travel_time = r.exit_time - r.entry_times.front();
    r.distance = path_length(net, r.links);
    kept.push_back(std::move(r));
  }
  out.records = std::move(kept);
  return out;
}

// An entirely empty file is an empty trajectory set.
inline TrajectoryLoad parse_trajectories(const Network& net, std::string_view text, const std::string& source) {
  if (csv::trim(text).empty()) return {};
  return parse_trajectories(net, csv::Table::parse(text, source));
}

inline TrajectoryLoad load_trajectories(const Network& net, const std::filesystem::path& file) {
  return parse_trajectories(net, read_file(file), file.string());
}

inline std::string trajectories_to_csv(const Network& net, const std::vector<TrajectoryRecord>& records) {
  csv::Writer w{"trip_id", "day", "link_id", "entry_time_s", "origin_x", "origin_y", "dest_x", "dest_y", "exit_time_s"};
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.links.size(); ++k) {
      const bool last = k + 1 == r.links.size();
      w.row(r.trip_id, r.day, net.link(r.links[k]).id, r.entry_times[k], r.origin.x, r.origin.y, r.destination.x,
            r.destination.y, last ? format_double(r.exit_time) : std::string());
    }
  }
  return w.str();
}

// --- Abnormal trip filter ---------------------------------------------------

struct SpeedBounds {
  double min_mph = 5.0;
  double max_mph = 100.0;
};

struct RemovedTrip {
  std::string trip_id;
  std::string reason;
  double average_mph = 0.0;
};

struct FilterResult {
  std::vector<TrajectoryRecord> kept;
  std::vector<RemovedTrip> removed;
};

// Keeps trips whose average speed lies in [min_mph, max_mph], both ends
// inclusive. The comparison carries a 1e-12 relative slack so that a trip at
// exactly the bound is not lost to unit conversion rounding.
inline FilterResult filter_abnormal(std::vector<TrajectoryRecord> records, SpeedBounds bounds = {}) {
  FilterResult out;
  constexpr double kSlack = 1e-12;
  for (auto& r : records) {
    const double mph = r.average_speed() / kMetersPerSecondPerMph;
    if (mph < bounds.min_mph * (1.0 - kSlack)) {
      out.removed.push_back({r.trip_id, "below_min_speed", mph});
    } else if (mph > bounds.max_mph * (1.0 + kSlack)) {
      out.removed.push_back({r.trip_id, "above_max_speed", mph});
    } else {
      out.kept.push_back(std::move(r));
    }
  }
  return out;
}

inline std::string filter_report_csv(const std::vector<RemovedTrip>& removed) {
  csv::Writer w{"trip_id", "reason", "average_mph"};
  for (const auto& r : removed) w.row(r.trip_id, r.reason, r.average_mph);
  return w.str();
}

// --- Speed limit re-estimation ----------------------------------------------

// Linear interpolation between order statistics (position p * (n - 1)).
inline double percentile(std::vector<double> sample, double p) {
  if (sample.empty()) throw ValidationError("percentile of an empty sample");
  std::sort(sample.begin(), sample.end());
  const double pos = p * static_cast<double>(sample.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sample.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sample[lo] + frac * (sample[hi] - sample[lo]);
}

// Per-link traversal speeds: link length over the time between entering the
// link and entering the next one (or leaving the last).
inline std::vector<std::vector<double>> traversal_speeds(const Network& net,
                                                         const std::vector<TrajectoryRecord>& records) {
  std::vector<std::vector<double>> speeds(net.num_links());
  for (const auto& r : records) {
    for (std::size_t k = 0; k < r.links.size(); ++k) {
      const double leave = k + 1 < r.links.size() ? r.entry_times[k + 1] : r.exit_time;
      const double dt = leave - r.entry_times[k];
      if (dt > 0) speeds[r.links[k]].push_back(net.link(r.links[k]).length / dt);
    }
  }
  return speeds;
}

struct SpeedLimitOptions {
  double percentile = 0.80;
  std::size_t min_obs = 10;
};

inline Network estimate_speed_limits(const std::vector<TrajectoryRecord>& records, const Network& net,
                                     SpeedLimitOptions opts = {}) {
  if (!(opts.percentile > 0.0 && opts.percentile < 1.0)) throw ValidationError("percentile must be in (0, 1)");
  auto speeds = traversal_speeds(net, records);
  std::vector<double> limits(net.num_links());
  for (LinkIndex e = 0; e < net.num_links(); ++e) {
    limits[e] = speeds[e].size() >= opts.min_obs ? percentile(speeds[e], opts.percentile) : net.link(e).speed_limit;
  }
  return net.with_speed_limits(limits);
}

// --- Time of day ------------------------------------------------------------

inline int assign_tod(const TrajectoryRecord& record, const TODSchedule& schedule) {
  return schedule.interval_of(record.departure());
}

inline void assign_tods(std::vector<TrajectoryRecord>& records, const TODSchedule& schedule) {
  for (auto& r : records) r.tod = assign_tod(r, schedule);
}

// --- Penetration rate inversion --------------------------------------------

class PenetrationEstimate {
 public:
  explicit PenetrationEstimate(double rate) : rate_(rate) {
    if (!(rate > 0.0 && rate <= 1.0)) throw ValidationError("penetration rate must be in (0, 1]");
  }
  double rate() const { return rate_; }

 private:
  double rate_;
};

struct TotalTripsPrior {
  double trips = 0.0;
};

inline TotalTripsPrior estimate_total_trips(double observed_count, const PenetrationEstimate& penetration) {
  if (observed_count < 0) throw ValidationError("negative observed trip count");
  return {observed_count / penetration.rate()};
}

// Per-TOD full-scale totals for an average day: observed trips in each
// interval, averaged over the observed days, scaled by 1 / rate.
inline std::map<int, TotalTripsPrior> estimate_tod_totals(const std::vector<TrajectoryRecord>& records,
                                                          const TODSchedule& schedule,
                                                          const PenetrationEstimate& penetration) {
  std::map<int, double> counts;
  std::map<std::string, int> days;
  for (const auto& iv : schedule.intervals()) counts[iv.index] = 0.0;
  for (const auto& r : records) {
    counts[r.tod != 0 ? r.tod : assign_tod(r, schedule)] += 1.0;
    days[r.day] = 1;
  }
  const double n_days = std::max<double>(1.0, static_cast<double>(days.size()));
  std::map<int, TotalTripsPrior> out;
  for (auto [tod, count] : counts) out[tod] = estimate_total_trips(count / n_days, penetration);
  return out;
}

}  // namespace trajcal
