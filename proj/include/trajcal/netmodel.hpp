#pragma once

#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trajcal/common.hpp"
#include "trajcal/csv.hpp"

namespace trajcal {

using LinkIndex = std::uint32_t;
using SparseMatrix = Eigen::SparseMatrix<double>;

constexpr double kSaturationFlowPerLane = 1800.0;  // veh/h

struct Node {
  NodeId id;
  double x = 0.0;
  double y = 0.0;
  bool is_junction = false;
};

struct Link {
  LinkId id;
  std::size_t from = 0;  // node index
  std::size_t to = 0;    // node index
  double length = 0.0;       // m
  double speed_limit = 0.0;  // m/s
  int lanes = 1;
  double capacity_vph = 0.0;  // veh/h; the per-interval bound scales with interval length

  double capacity_bound(double interval_hours) const { return capacity_vph * interval_hours; }
  double free_flow_time() const { return length / speed_limit; }
};

// Immutable road graph. Links and nodes are addressed by dense indices; string
// ids are kept for I/O.
class Network {
 public:
  Network() = default;

  Network(std::vector<Node> nodes, std::vector<Link> links) : nodes_(std::move(nodes)), links_(std::move(links)) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!node_index_.emplace(nodes_[i].id, i).second) {
        throw ValidationError("duplicate node id '" + nodes_[i].id + "'");
      }
    }
    out_links_.resize(nodes_.size());
    in_links_.resize(nodes_.size());
    for (std::size_t i = 0; i < links_.size(); ++i) {
      const Link& l = links_[i];
      if (!link_index_.emplace(l.id, static_cast<LinkIndex>(i)).second) {
        throw ValidationError("duplicate link id '" + l.id + "'");
      }
      if (l.from >= nodes_.size() || l.to >= nodes_.size()) {
        throw ValidationError("link '" + l.id + "' references a missing node");
      }
      if (!(l.length > 0.0)) throw ValidationError("link '" + l.id + "' has non-positive length");
      if (!(l.speed_limit > 0.0)) throw ValidationError("link '" + l.id + "' has non-positive speed limit");
      if (l.lanes < 1) throw ValidationError("link '" + l.id + "' has no lanes");
      if (!(l.capacity_vph >= 0.0)) throw ValidationError("link '" + l.id + "' has negative capacity");
      out_links_[l.from].push_back(static_cast<LinkIndex>(i));
      in_links_[l.to].push_back(static_cast<LinkIndex>(i));
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_links() const { return links_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Link>& links() const { return links_; }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  const Link& link(LinkIndex i) const { return links_[i]; }
  const std::vector<LinkIndex>& out_links(std::size_t node) const { return out_links_[node]; }
  const std::vector<LinkIndex>& in_links(std::size_t node) const { return in_links_[node]; }

  std::optional<LinkIndex> find_link(const LinkId& id) const {
    auto it = link_index_.find(id);
    if (it == link_index_.end()) return std::nullopt;
    return it->second;
  }

  LinkIndex link_index(const LinkId& id) const {
    auto idx = find_link(id);
    if (!idx) throw ValidationError("unknown link id '" + id + "'");
    return *idx;
  }

  std::optional<std::size_t> find_node(const NodeId& id) const {
    auto it = node_index_.find(id);
    if (it == node_index_.end()) return std::nullopt;
    return it->second;
  }

  // Copy with some speed limits replaced.
  Network with_speed_limits(const std::vector<double>& speed_limits) const {
    if (speed_limits.size() != links_.size()) throw DimensionError("speed limit vector size mismatch");
    std::vector<Link> links = links_;
    for (std::size_t i = 0; i < links.size(); ++i) links[i].speed_limit = speed_limits[i];
    return Network(nodes_, std::move(links));
  }

  // Midpoint distance from a point to a link's straight-line geometry.
  double distance_to_link(const Point& p, LinkIndex e) const {
    const Node& a = nodes_[links_[e].from];
    const Node& b = nodes_[links_[e].to];
    const double vx = b.x - a.x;
    const double vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return distance(p, Point{a.x + t * vx, a.y + t * vy});
  }

  LinkIndex nearest_link(const Point& p) const {
    LinkIndex best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (LinkIndex e = 0; e < links_.size(); ++e) {
      double d = distance_to_link(p, e);
      if (d < best_d) {
        best_d = d;
        best = e;
      }
    }
    return best;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<Link> links_;
  std::unordered_map<NodeId, std::size_t> node_index_;
  std::unordered_map<LinkId, LinkIndex> link_index_;
  std::vector<std::vector<LinkIndex>> out_links_;
  std::vector<std::vector<LinkIndex>> in_links_;
};

// --- Network I/O ------------------------------------------------------------

namespace detail {

// Local equirectangular projection around the dataset's mean latitude.
inline std::vector<Point> project_latlon(const std::vector<std::pair<double, double>>& latlon) {
  constexpr double kEarthRadius = 6371008.8;
  double lat0 = 0.0;
  double lon0 = 0.0;
  for (auto [lat, lon] : latlon) {
    lat0 += lat;
    lon0 += lon;
  }
  if (!latlon.empty()) {
    lat0 /= static_cast<double>(latlon.size());
    lon0 /= static_cast<double>(latlon.size());
  }
  const double deg = std::numbers::pi / 180.0;
  std::vector<Point> out;
  out.reserve(latlon.size());
  for (auto [lat, lon] : latlon) {
    out.push_back({kEarthRadius * (lon - lon0) * deg * std::cos(lat0 * deg), kEarthRadius * (lat - lat0) * deg});
  }
  return out;
}

}  // namespace detail

inline Network parse_network(const csv::Table& links_csv, const csv::Table& nodes_csv) {
  nodes_csv.require({"node_id"});
  const bool planar = nodes_csv.has("x") && nodes_csv.has("y");
  const bool geographic = nodes_csv.has("lat") && nodes_csv.has("lon");
  if (!planar && !geographic) throw ParseError(nodes_csv.source(), 1, "nodes need x,y or lat,lon columns");

  std::vector<Node> nodes;
  std::vector<std::pair<double, double>> latlon;
  for (const auto& row : nodes_csv.rows()) {
    Node n;
    n.id = nodes_csv.str(row, "node_id");
    if (n.id.empty()) throw ParseError(nodes_csv.source(), row.line, "empty node_id");
    if (planar) {
      n.x = nodes_csv.num(row, "x");
      n.y = nodes_csv.num(row, "y");
    } else {
      latlon.emplace_back(nodes_csv.num(row, "lat"), nodes_csv.num(row, "lon"));
    }
    if (auto j = nodes_csv.opt(row, "is_junction")) n.is_junction = (*j == "1" || *j == "true");
    nodes.push_back(std::move(n));
  }
  if (!planar) {
    auto pts = detail::project_latlon(latlon);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      nodes[i].x = pts[i].x;
      nodes[i].y = pts[i].y;
    }
  }

  std::unordered_map<NodeId, std::size_t> node_index;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!node_index.emplace(nodes[i].id, i).second) {
      throw ParseError(nodes_csv.source(), nodes_csv.rows()[i].line, "duplicate node id '" + nodes[i].id + "'");
    }
  }

  links_csv.require({"link_id", "from", "to", "length_m", "speed_mps"});
  std::vector<Link> links;
  std::set<LinkId> seen;
  for (const auto& row : links_csv.rows()) {
    Link l;
    l.id = links_csv.str(row, "link_id");
    if (l.id.empty()) throw ParseError(links_csv.source(), row.line, "empty link_id");
    if (!seen.insert(l.id).second) throw ParseError(links_csv.source(), row.line, "duplicate link id '" + l.id + "'");
    const std::string& from = links_csv.str(row, "from");
    const std::string& to = links_csv.str(row, "to");
    auto fi = node_index.find(from);
    auto ti = node_index.find(to);
    if (fi == node_index.end() || ti == node_index.end()) {
      throw ParseError(links_csv.source(), row.line,
                       "link '" + l.id + "' references missing node '" + (fi == node_index.end() ? from : to) + "'");
    }
    l.from = fi->second;
    l.to = ti->second;
    l.length = links_csv.num(row, "length_m");
    if (!(l.length > 0.0)) throw ParseError(links_csv.source(), row.line, "link '" + l.id + "': non-positive length");
    l.speed_limit = links_csv.num(row, "speed_mps");
    if (!(l.speed_limit > 0.0)) {
      throw ParseError(links_csv.source(), row.line, "link '" + l.id + "': non-positive speed");
    }
    l.lanes = links_csv.has("lanes") && links_csv.opt(row, "lanes")
                  ? static_cast<int>(links_csv.integer(row, "lanes"))
                  : 1;
    if (l.lanes < 1) throw ParseError(links_csv.source(), row.line, "link '" + l.id + "': lanes must be >= 1");
    if (auto cap = links_csv.opt(row, "capacity")) {
      l.capacity_vph = links_csv.to_double(*cap, row.line, "capacity");
      if (l.capacity_vph < 0.0) throw ParseError(links_csv.source(), row.line, "negative capacity");
    } else {
      l.capacity_vph = l.lanes * kSaturationFlowPerLane;
    }
    links.push_back(std::move(l));
  }
  return Network(std::move(nodes), std::move(links));
}

inline Network load_network(const std::filesystem::path& links_csv, const std::filesystem::path& nodes_csv) {
  return parse_network(csv::Table::read(links_csv), csv::Table::read(nodes_csv));
}

inline std::string links_to_csv(const Network& net) {
  csv::Writer w{"link_id", "from", "to", "length_m", "speed_mps", "lanes", "capacity"};
  for (const Link& l : net.links()) {
    w.row(l.id, net.node(l.from).id, net.node(l.to).id, l.length, l.speed_limit, l.lanes, l.capacity_vph);
  }
  return w.str();
}

inline std::string nodes_to_csv(const Network& net) {
  csv::Writer w{"node_id", "x", "y", "is_junction"};
  for (const Node& n : net.nodes()) w.row(n.id, n.x, n.y, n.is_junction ? 1 : 0);
  return w.str();
}

// n-by-n bidirectional grid. Interior and edge nodes with degree > 2 are
// junctions; the four corners are not.
inline Network make_grid_network(int n, double spacing, double speed_limit, int lanes = 1,
                                 std::optional<double> capacity_vph = std::nullopt) {
  if (n < 2) throw ValidationError("grid needs n >= 2");
  std::vector<Node> nodes;
  auto node_id = [n](int r, int c) { return static_cast<std::size_t>(r * n + c); };
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const bool corner = (r == 0 || r == n - 1) && (c == 0 || c == n - 1);
      nodes.push_back({"n" + std::to_string(r) + "_" + std::to_string(c), c * spacing, r * spacing, !corner});
    }
  }
  std::vector<Link> links;
  auto add = [&](std::size_t a, std::size_t b) {
    Link l;
    l.id = nodes[a].id + "-" + nodes[b].id;
    l.from = a;
    l.to = b;
    l.length = spacing;
    l.speed_limit = speed_limit;
    l.lanes = lanes;
    l.capacity_vph = capacity_vph.value_or(lanes * kSaturationFlowPerLane);
    links.push_back(std::move(l));
  };
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (c + 1 < n) {
        add(node_id(r, c), node_id(r, c + 1));
        add(node_id(r, c + 1), node_id(r, c));
      }
      if (r + 1 < n) {
        add(node_id(r, c), node_id(r + 1, c));
        add(node_id(r + 1, c), node_id(r, c));
      }
    }
  }
  return Network(std::move(nodes), std::move(links));
}

// --- Paths ------------------------------------------------------------------

struct Path {
  PathId id = 0;
  std::pair<ZoneId, ZoneId> od_pair{0, 0};
  std::vector<LinkIndex> links;
};

inline bool validate_path(const Network& net, const std::vector<LinkIndex>& links) {
  if (links.empty()) return false;
  for (std::size_t k = 0; k < links.size(); ++k) {
    if (links[k] >= net.num_links()) return false;
    if (k > 0 && net.link(links[k - 1]).to != net.link(links[k]).from) return false;
  }
  return true;
}

inline bool validate_path(const Network& net, const std::vector<LinkId>& ids) {
  std::vector<LinkIndex> links;
  links.reserve(ids.size());
  for (const auto& id : ids) {
    auto idx = net.find_link(id);
    if (!idx) return false;
    links.push_back(*idx);
  }
  return validate_path(net, links);
}

inline double path_length(const Network& net, const std::vector<LinkIndex>& links) {
  double total = 0.0;
  for (LinkIndex e : links) total += net.link(e).length;
  return total;
}

inline double path_free_flow_time(const Network& net, const std::vector<LinkIndex>& links) {
  double total = 0.0;
  for (LinkIndex e : links) total += net.link(e).free_flow_time();
  return total;
}

// Link sequences are stored as a single ';'-separated field.
inline std::string join_links(const Network& net, const std::vector<LinkIndex>& links) {
  std::string out;
  for (std::size_t k = 0; k < links.size(); ++k) {
    if (k) out += ';';
    out += net.link(links[k]).id;
  }
  return out;
}

inline std::vector<LinkIndex> split_links(const Network& net, const std::string& field) {
  std::vector<LinkIndex> out;
  for (const auto& id : csv::split(field, ';')) {
    if (!id.empty()) out.push_back(net.link_index(id));
  }
  return out;
}

// Breadth-first shortest path by link count; empty when unreachable.
inline std::vector<LinkIndex> bfs_path(const Network& net, std::size_t from_node, std::size_t to_node) {
  if (from_node == to_node) return {};
  std::vector<long> via(net.num_nodes(), -1);
  std::vector<char> seen(net.num_nodes(), 0);
  std::vector<std::size_t> frontier{from_node};
  seen[from_node] = 1;
  for (std::size_t head = 0; head < frontier.size(); ++head) {
    std::size_t u = frontier[head];
    for (LinkIndex e : net.out_links(u)) {
      std::size_t v = net.link(e).to;
      if (seen[v]) continue;
      seen[v] = 1;
      via[v] = e;
      if (v == to_node) {
        std::vector<LinkIndex> path;
        for (std::size_t w = v; w != from_node; w = net.link(static_cast<LinkIndex>(via[w])).from) {
          path.push_back(static_cast<LinkIndex>(via[w]));
        }
        std::reverse(path.begin(), path.end());
        return path;
      }
      frontier.push_back(v);
    }
  }
  return {};
}

// --- Zones ------------------------------------------------------------------

struct Zone {
  ZoneId id = 0;
  std::vector<LinkIndex> member_links;
};

// Link-to-zone lookup; -1 marks unassigned links.
inline std::vector<ZoneId> zone_of_links(const Network& net, const std::vector<Zone>& zones) {
  std::vector<ZoneId> out(net.num_links(), -1);
  for (const Zone& z : zones) {
    for (LinkIndex e : z.member_links) {
      if (e >= out.size()) throw ValidationError("zone " + std::to_string(z.id) + " references an unknown link");
      if (out[e] != -1) {
        throw ValidationError("link '" + net.link(e).id + "' belongs to more than one zone");
      }
      out[e] = z.id;
    }
  }
  return out;
}

inline std::string zones_to_csv(const Network& net, const std::vector<Zone>& zones) {
  std::vector<std::pair<LinkIndex, ZoneId>> rows;
  for (const Zone& z : zones) {
    for (LinkIndex e : z.member_links) rows.emplace_back(e, z.id);
  }
  std::sort(rows.begin(), rows.end());
  csv::Writer w{"link_id", "zone_id"};
  for (auto [e, z] : rows) w.row(net.link(e).id, z);
  return w.str();
}

inline std::vector<Zone> parse_zones(const Network& net, const csv::Table& table) {
  table.require({"link_id", "zone_id"});
  std::map<ZoneId, Zone> by_id;
  std::vector<char> assigned(net.num_links(), 0);
  for (const auto& row : table.rows()) {
    auto e = net.find_link(table.str(row, "link_id"));
    if (!e) throw ParseError(table.source(), row.line, "unknown link '" + table.str(row, "link_id") + "'");
    if (assigned[*e]) throw ParseError(table.source(), row.line, "link assigned to more than one zone");
    assigned[*e] = 1;
    const auto z = static_cast<ZoneId>(table.integer(row, "zone_id"));
    auto& zone = by_id[z];
    zone.id = z;
    zone.member_links.push_back(*e);
  }
  std::vector<Zone> zones;
  for (auto& [id, z] : by_id) zones.push_back(std::move(z));
  return zones;
}

// --- Time of day ------------------------------------------------------------

struct TODInterval {
  int index = 0;  // 1-based
  std::string label;
  double start_hour = 0.0;
  double end_hour = 0.0;

  double hours() const { return end_hour - start_hour; }
  double start_s() const { return start_hour * kSecondsPerHour; }
  double end_s() const { return end_hour * kSecondsPerHour; }
};

class TODSchedule {
 public:
  TODSchedule() = default;

  explicit TODSchedule(std::vector<TODInterval> intervals) : intervals_(std::move(intervals)) {
    if (intervals_.size() < 3) throw ValidationError("TOD schedule needs a warm-up, a main and a cool-down interval");
    if (intervals_.front().start_hour != 0.0) throw ValidationError("TOD schedule must start at 0:00");
    if (intervals_.back().end_hour != 24.0) throw ValidationError("TOD schedule must end at 24:00");
    for (std::size_t i = 0; i < intervals_.size(); ++i) {
      const auto& iv = intervals_[i];
      if (iv.index != static_cast<int>(i) + 1) throw ValidationError("TOD indices must be 1..n in order");
      if (!(iv.end_hour > iv.start_hour)) throw ValidationError("TOD interval '" + iv.label + "' is empty");
      if (i > 0 && iv.start_hour != intervals_[i - 1].end_hour) {
        throw ValidationError("TOD intervals must be contiguous");
      }
    }
  }

  // Six-interval weekday schedule.
  static TODSchedule standard() {
    return TODSchedule({{1, "AM early", 0, 7},
                        {2, "AM peak", 7, 10},
                        {3, "Midday", 10, 15},
                        {4, "PM peak", 15, 19},
                        {5, "PM late", 19, 22},
                        {6, "Night", 22, 24}});
  }

  const std::vector<TODInterval>& intervals() const { return intervals_; }
  std::size_t size() const { return intervals_.size(); }
  const TODInterval& at(int index) const { return intervals_.at(static_cast<std::size_t>(index - 1)); }

  // Interval containing a time of day; times outside [0, 24h) wrap.
  int interval_of(double seconds_since_midnight) const {
    double t = std::fmod(seconds_since_midnight, kSecondsPerDay);
    if (t < 0) t += kSecondsPerDay;
    const double h = t / kSecondsPerHour;
    for (const auto& iv : intervals_) {
      if (h >= iv.start_hour && h < iv.end_hour) return iv.index;
    }
    return intervals_.back().index;
  }

  bool is_main(int index) const { return index > 1 && index < static_cast<int>(intervals_.size()); }
  int warmup() const { return 1; }
  int cooldown() const { return static_cast<int>(intervals_.size()); }

 private:
  std::vector<TODInterval> intervals_;
};

// --- Incidence --------------------------------------------------------------

using ODPair = std::pair<ZoneId, ZoneId>;

// Phi (N x M), Omega (E x M) and the link-length structure Psi^L (M x E).
// Column m of Phi/Omega and row m of Psi^L refer to paths[m].
struct IncidenceSet {
  std::vector<ODPair> od_pairs;
  std::vector<PathId> path_ids;
  SparseMatrix phi;
  SparseMatrix omega;
  SparseMatrix psi_len;

  std::size_t num_od() const { return od_pairs.size(); }
  std::size_t num_paths() const { return path_ids.size(); }
  std::size_t num_links() const { return static_cast<std::size_t>(omega.rows()); }

  std::optional<std::size_t> od_index(const ODPair& od) const {
    auto it = std::lower_bound(od_pairs.begin(), od_pairs.end(), od);
    if (it == od_pairs.end() || *it != od) return std::nullopt;
    return static_cast<std::size_t>(it - od_pairs.begin());
  }

  // OD index of path column m.
  std::size_t od_of_path(std::size_t m) const {
    for (SparseMatrix::InnerIterator it(phi, static_cast<Eigen::Index>(m)); it; ++it) {
      return static_cast<std::size_t>(it.row());
    }
    throw ValidationError("path column without an OD pair");
  }
};

// OD pairs are the sorted distinct od_pair values of the paths. Paths keep
// their input order as columns.
inline IncidenceSet build_incidence(const Network& net, const std::vector<Path>& paths,
                                    const std::vector<Zone>& zones) {
  std::set<ZoneId> zone_ids;
  for (const Zone& z : zones) zone_ids.insert(z.id);
  std::set<ODPair> ods;
  for (const Path& p : paths) {
    if (!zone_ids.count(p.od_pair.first) || !zone_ids.count(p.od_pair.second)) {
      throw ValidationError("path " + std::to_string(p.id) + " references an unknown zone");
    }
    if (!validate_path(net, p.links)) throw ValidationError("path " + std::to_string(p.id) + " is not a valid path");
    ods.insert(p.od_pair);
  }
  IncidenceSet inc;
  inc.od_pairs.assign(ods.begin(), ods.end());
  const auto n = static_cast<Eigen::Index>(inc.od_pairs.size());
  const auto m = static_cast<Eigen::Index>(paths.size());
  const auto e = static_cast<Eigen::Index>(net.num_links());

  std::vector<Eigen::Triplet<double>> phi, omega, psi;
  for (Eigen::Index j = 0; j < m; ++j) {
    const Path& p = paths[static_cast<std::size_t>(j)];
    inc.path_ids.push_back(p.id);
    phi.emplace_back(static_cast<Eigen::Index>(*inc.od_index(p.od_pair)), j, 1.0);
    std::set<LinkIndex> members(p.links.begin(), p.links.end());
    for (LinkIndex l : members) {
      omega.emplace_back(static_cast<Eigen::Index>(l), j, 1.0);
      psi.emplace_back(j, static_cast<Eigen::Index>(l), net.link(l).length);
    }
  }
  inc.phi.resize(n, m);
  inc.phi.setFromTriplets(phi.begin(), phi.end());
  inc.omega.resize(e, m);
  inc.omega.setFromTriplets(omega.begin(), omega.end());
  inc.psi_len.resize(m, e);
  inc.psi_len.setFromTriplets(psi.begin(), psi.end());
  return inc;
}

inline std::string paths_to_csv(const Network& net, const std::vector<Path>& paths) {
  csv::Writer w{"path_id", "od_origin", "od_dest", "links"};
  for (const Path& p : paths) w.row(p.id, p.od_pair.first, p.od_pair.second, join_links(net, p.links));
  return w.str();
}

inline std::vector<Path> parse_paths(const Network& net, const csv::Table& table) {
  table.require({"path_id", "od_origin", "od_dest", "links"});
  std::vector<Path> out;
  for (const auto& row : table.rows()) {
    Path p;
    p.id = static_cast<PathId>(table.integer(row, "path_id"));
    p.od_pair = {static_cast<ZoneId>(table.integer(row, "od_origin")),
                 static_cast<ZoneId>(table.integer(row, "od_dest"))};
    try {
      p.links = split_links(net, table.str(row, "links"));
    } catch (const ValidationError& err) {
      throw ParseError(table.source(), row.line, err.what());
    }
    if (!validate_path(net, p.links)) throw ParseError(table.source(), row.line, "invalid link sequence");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace trajcal
