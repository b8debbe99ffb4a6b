#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "trajcal/gmm.hpp"
#include "trajcal/ingest.hpp"
#include "trajcal/netmodel.hpp"

namespace trajcal {

// --- Zoning -----------------------------------------------------------------

// A trip endpoint snapped to a link and labeled with its GMM component.
struct LabeledEndpoint {
  Point point;
  LinkIndex link = 0;
  int label = 0;
};

// Majority vote per link over endpoint labels; ties go to the lower label.
// Zone ids are component labels; links without endpoints stay unassigned.
inline std::vector<Zone> assign_zones(const Network& net, const GMMModel& model,
                                      const std::vector<LabeledEndpoint>& endpoints) {
  std::vector<std::map<int, std::size_t>> votes(net.num_links());
  for (const auto& ep : endpoints) {
    if (ep.link >= net.num_links()) throw ValidationError("endpoint snapped to an unknown link");
    if (ep.label < 0 || ep.label >= model.k) throw ValidationError("endpoint label outside the model");
    ++votes[ep.link][ep.label];
  }
  std::map<int, Zone> zones;
  for (LinkIndex e = 0; e < net.num_links(); ++e) {
    if (votes[e].empty()) continue;
    int best = -1;
    std::size_t best_count = 0;
    for (auto [label, count] : votes[e]) {  // ascending label order
      if (count > best_count) {
        best = label;
        best_count = count;
      }
    }
    auto& z = zones[best];
    z.id = best;
    z.member_links.push_back(e);
  }
  std::vector<Zone> out;
  for (auto& [id, z] : zones) out.push_back(std::move(z));
  return out;
}

// Origins snap to a trip's first link and destinations to its last.
inline std::vector<LabeledEndpoint> label_endpoints(const GMMModel& model,
                                                    const std::vector<TrajectoryRecord>& records) {
  std::vector<LabeledEndpoint> out;
  out.reserve(2 * records.size());
  for (const auto& r : records) {
    out.push_back({r.origin, r.links.front(), model.predict(r.origin)});
    out.push_back({r.destination, r.links.back(), model.predict(r.destination)});
  }
  return out;
}

inline std::vector<Point> endpoint_points(const std::vector<TrajectoryRecord>& records) {
  std::vector<Point> pts;
  pts.reserve(2 * records.size());
  for (const auto& r : records) {
    pts.push_back(r.origin);
    pts.push_back(r.destination);
  }
  return pts;
}

// --- Path similarity --------------------------------------------------------

// Length-weighted Jaccard similarity of two link sets: shared length over
// the length of the union. Repeated links count once.
inline double jaccard_similarity(const std::vector<LinkIndex>& a, const std::vector<LinkIndex>& b,
                                 std::span<const double> link_lengths) {
  std::vector<LinkIndex> sa(a), sb(b);
  std::sort(sa.begin(), sa.end());
  sa.erase(std::unique(sa.begin(), sa.end()), sa.end());
  std::sort(sb.begin(), sb.end());
  sb.erase(std::unique(sb.begin(), sb.end()), sb.end());
  double inter = 0;
  double uni = 0;
  std::size_t i = 0, j = 0;
  while (i < sa.size() || j < sb.size()) {
    if (j == sb.size() || (i < sa.size() && sa[i] < sb[j])) {
      uni += link_lengths[sa[i++]];
    } else if (i == sa.size() || sb[j] < sa[i]) {
      uni += link_lengths[sb[j++]];
    } else {
      inter += link_lengths[sa[i]];
      uni += link_lengths[sa[i]];
      ++i;
      ++j;
    }
  }
  return uni > 0 ? inter / uni : 0.0;
}

inline std::vector<double> link_lengths(const Network& net) {
  std::vector<double> out(net.num_links());
  for (LinkIndex e = 0; e < net.num_links(); ++e) out[e] = net.link(e).length;
  return out;
}

// --- Path clustering --------------------------------------------------------

// A distinct observed link sequence and how many trips used it.
struct ObservedPath {
  std::vector<LinkIndex> links;
  std::size_t count = 0;
};

struct PathCluster {
  std::vector<std::size_t> members;  // indices into ODPathClusters::paths
  std::size_t representative = 0;
  std::size_t observations = 0;
};

struct ODPathClusters {
  ODPair od;
  std::vector<ObservedPath> paths;
  std::vector<PathCluster> clusters;
};

using PathClusterSet = std::vector<ODPathClusters>;

namespace detail {

// Average-linkage agglomeration on distance 1 - J. Merges stop once the
// closest pair is farther than cut_threshold. The closest pair is the first
// in (i, j) order, so the merge sequence does not depend on the threshold.
inline std::vector<std::vector<std::size_t>> average_linkage(const std::vector<ObservedPath>& paths,
                                                             std::span<const double> lengths, double cut) {
  const std::size_t n = paths.size();
  std::vector<std::vector<std::size_t>> clusters(n);
  for (std::size_t i = 0; i < n; ++i) clusters[i] = {i};
  std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      d[i][j] = d[j][i] = 1.0 - jaccard_similarity(paths[i].links, paths[j].links, lengths);
    }
  }
  std::vector<char> alive(n, 1);
  while (true) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!alive[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (alive[j] && d[i][j] < best) {
          best = d[i][j];
          bi = i;
          bj = j;
        }
      }
    }
    if (!(best <= cut)) break;
    const double ni = static_cast<double>(clusters[bi].size());
    const double nj = static_cast<double>(clusters[bj].size());
    for (std::size_t k = 0; k < n; ++k) {
      if (!alive[k] || k == bi || k == bj) continue;
      d[bi][k] = d[k][bi] = (ni * d[bi][k] + nj * d[bj][k]) / (ni + nj);
    }
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(clusters[bi].begin(), clusters[bi].end());
    clusters[bj].clear();
    alive[bj] = 0;
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (alive[i]) out.push_back(std::move(clusters[i]));
  }
  return out;
}

}  // namespace detail

// Representative = most-observed member; ties go to the shorter path, then
// to the earlier one.
inline PathClusterSet cluster_paths(const std::map<ODPair, std::vector<ObservedPath>>& groups,
                                    std::span<const double> lengths, double cut_threshold = 0.3) {
  if (!(cut_threshold > 0.0 && cut_threshold < 1.0)) throw ValidationError("cut_threshold must be in (0, 1)");
  PathClusterSet out;
  for (const auto& [od, paths] : groups) {
    if (paths.empty()) throw ValidationError("empty path group");
    ODPathClusters g;
    g.od = od;
    g.paths = paths;
    for (auto& members : detail::average_linkage(paths, lengths, cut_threshold)) {
      PathCluster c;
      c.members = std::move(members);
      auto path_len = [&](std::size_t i) {
        double s = 0;
        for (LinkIndex e : paths[i].links) s += lengths[e];
        return s;
      };
      c.representative = c.members.front();
      for (std::size_t i : c.members) {
        c.observations += paths[i].count;
        const auto& r = paths[c.representative];
        if (paths[i].count > r.count || (paths[i].count == r.count && path_len(i) < path_len(c.representative))) {
          c.representative = i;
        }
      }
      g.clusters.push_back(std::move(c));
    }
    out.push_back(std::move(g));
  }
  return out;
}

// --- Trip labeling ----------------------------------------------------------

// A filtered trip resolved to its OD pair and representative path.
struct TripLabel {
  std::size_t record = 0;
  ODPair od{0, 0};
  PathId path = -1;
  int tod = 0;
};

struct PathSetResult {
  PathClusterSet clusters;
  std::vector<Path> paths;  // representatives, ids 0..M-1 in OD order
  std::vector<TripLabel> labels;
  std::size_t unzoned_trips = 0;  // endpoint link carried no zone
};

// Groups trips by OD pair, clusters distinct link sequences, and relabels each
// trip to its cluster's representative path.
inline PathSetResult build_path_set(const Network& net, const std::vector<TrajectoryRecord>& records,
                                    const std::vector<Zone>& zones, double cut_threshold) {
  const auto zone_of = zone_of_links(net, zones);
  std::map<ODPair, std::vector<ObservedPath>> groups;
  std::map<ODPair, std::map<std::vector<LinkIndex>, std::size_t>> seen;
  struct Pending {
    std::size_t record;
    ODPair od;
    std::size_t observed;
  };
  std::vector<Pending> pending;
  PathSetResult out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const ZoneId o = zone_of[r.links.front()];
    const ZoneId d = zone_of[r.links.back()];
    if (o < 0 || d < 0) {
      ++out.unzoned_trips;
      continue;
    }
    const ODPair od{o, d};
    auto& index = seen[od];
    auto [it, inserted] = index.emplace(r.links, groups[od].size());
    if (inserted) groups[od].push_back({r.links, 0});
    ++groups[od][it->second].count;
    pending.push_back({i, od, it->second});
  }
  const auto lengths = link_lengths(net);
  out.clusters = cluster_paths(groups, lengths, cut_threshold);

  std::map<ODPair, std::vector<PathId>> rep_of;  // observed index -> path id
  for (const auto& g : out.clusters) {
    auto& lookup = rep_of[g.od];
    lookup.assign(g.paths.size(), -1);
    for (const auto& c : g.clusters) {
      const auto id = static_cast<PathId>(out.paths.size());
      out.paths.push_back({id, g.od, g.paths[c.representative].links});
      for (std::size_t m : c.members) lookup[m] = id;
    }
  }
  for (const auto& p : pending) {
    out.labels.push_back({p.record, p.od, rep_of[p.od][p.observed], records[p.record].tod});
  }
  return out;
}

inline std::string trip_labels_to_csv(const std::vector<TrajectoryRecord>& records,
                                      const std::vector<TripLabel>& labels) {
  csv::Writer w{"trip_id", "od_origin", "od_dest", "path_id", "tod"};
  for (const auto& l : labels) w.row(records[l.record].trip_id, l.od.first, l.od.second, l.path, l.tod);
  return w.str();
}

// --- Assignment map ---------------------------------------------------------

// G (M x N) for one TOD interval.
struct AssignmentMap {
  int tod = 0;
  SparseMatrix g;
  std::vector<std::size_t> unobserved_od;  // OD indices with an all-zero column
};

// G[m, n] = trips of OD n on representative m / trips of OD n, pooled over
// all days of the TOD interval.
inline AssignmentMap build_assignment_map(const std::vector<TripLabel>& labels, const IncidenceSet& inc, int tod) {
  std::unordered_map<PathId, std::size_t> column;
  for (std::size_t m = 0; m < inc.path_ids.size(); ++m) column[inc.path_ids[m]] = m;
  std::vector<double> path_trips(inc.num_paths(), 0.0);
  std::vector<double> od_trips(inc.num_od(), 0.0);
  for (const auto& l : labels) {
    if (l.tod != tod) continue;
    auto it = column.find(l.path);
    if (it == column.end()) throw ValidationError("trip label references unknown path " + std::to_string(l.path));
    const std::size_t n = inc.od_of_path(it->second);
    path_trips[it->second] += 1.0;
    od_trips[n] += 1.0;
  }
  AssignmentMap out;
  out.tod = tod;
  std::vector<Eigen::Triplet<double>> trips;
  for (std::size_t m = 0; m < inc.num_paths(); ++m) {
    const std::size_t n = inc.od_of_path(m);
    if (path_trips[m] > 0) {
      trips.emplace_back(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n), path_trips[m] / od_trips[n]);
    }
  }
  for (std::size_t n = 0; n < inc.num_od(); ++n) {
    if (od_trips[n] == 0) out.unobserved_od.push_back(n);
  }
  out.g.resize(static_cast<Eigen::Index>(inc.num_paths()), static_cast<Eigen::Index>(inc.num_od()));
  out.g.setFromTriplets(trips.begin(), trips.end());
  return out;
}

inline std::string assignment_maps_to_csv(const std::vector<AssignmentMap>& maps, const IncidenceSet& inc) {
  csv::Writer w{"tod", "path_id", "od_id", "share"};
  for (const auto& map : maps) {
    for (Eigen::Index n = 0; n < map.g.outerSize(); ++n) {
      for (SparseMatrix::InnerIterator it(map.g, n); it; ++it) {
        w.row(map.tod, inc.path_ids[static_cast<std::size_t>(it.row())], n, it.value());
      }
    }
  }
  return w.str();
}

inline std::vector<AssignmentMap> parse_assignment_maps(const csv::Table& table, const IncidenceSet& inc) {
  table.require({"tod", "path_id", "od_id", "share"});
  std::unordered_map<PathId, std::size_t> column;
  for (std::size_t m = 0; m < inc.path_ids.size(); ++m) column[inc.path_ids[m]] = m;
  std::map<int, std::vector<Eigen::Triplet<double>>> by_tod;
  for (const auto& row : table.rows()) {
    const int tod = static_cast<int>(table.integer(row, "tod"));
    auto it = column.find(static_cast<PathId>(table.integer(row, "path_id")));
    if (it == column.end()) throw ParseError(table.source(), row.line, "unknown path id");
    const auto n = table.integer(row, "od_id");
    if (n < 0 || static_cast<std::size_t>(n) >= inc.num_od()) throw ParseError(table.source(), row.line, "bad od_id");
    by_tod[tod].emplace_back(static_cast<Eigen::Index>(it->second), static_cast<Eigen::Index>(n),
                             table.num(row, "share"));
  }
  std::vector<AssignmentMap> out;
  for (auto& [tod, trips] : by_tod) {
    AssignmentMap map;
    map.tod = tod;
    map.g.resize(static_cast<Eigen::Index>(inc.num_paths()), static_cast<Eigen::Index>(inc.num_od()));
    map.g.setFromTriplets(trips.begin(), trips.end());
    std::vector<double> colsum(inc.num_od(), 0.0);
    for (const auto& t : trips) colsum[static_cast<std::size_t>(t.col())] += t.value();
    for (std::size_t n = 0; n < inc.num_od(); ++n) {
      if (colsum[n] == 0) map.unobserved_od.push_back(n);
    }
    out.push_back(std::move(map));
  }
  return out;
}

}  // namespace trajcal
