#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <random>

#include "trajcal/netmodel.hpp"

using namespace trajcal;

namespace {

const char* kTwoNodes = "node_id,x,y,is_junction\nA,0,0,0\nB,500,0,0\n";
const char* kOneLink = "link_id,from,to,length_m,speed_mps,lanes,capacity\ne1,A,B,500,13.9,1,\n";

Network parse(const std::string& links, const std::string& nodes) {
  return parse_network(csv::Table::parse(links, "links.csv"), csv::Table::parse(nodes, "nodes.csv"));
}

// Three links in a chain plus one that does not connect: A->B->C->D, X->Y.
Network chain() {
  return parse(
      "link_id,from,to,length_m,speed_mps,lanes,capacity\n"
      "e1,A,B,100,10,1,600\ne2,B,C,200,10,1,600\ne3,X,Y,300,10,1,600\ne4,C,D,300,10,1,600\n",
      "node_id,x,y\nA,0,0\nB,100,0\nC,300,0\nD,600,0\nX,0,50\nY,300,50\n");
}

}  // namespace

TEST(LoadNetwork, MinimalGraph) {
  Network net = parse(kOneLink, kTwoNodes);
  EXPECT_EQ(net.num_links(), 1u);
  EXPECT_EQ(net.num_nodes(), 2u);
  EXPECT_DOUBLE_EQ(net.link(0).length, 500.0);
  EXPECT_DOUBLE_EQ(net.link(0).speed_limit, 13.9);
  // Absent capacity falls back to lanes x saturation flow.
  EXPECT_DOUBLE_EQ(net.link(0).capacity_vph, 1800.0);
  EXPECT_DOUBLE_EQ(net.link(0).capacity_bound(3.0), 5400.0);
}

TEST(LoadNetwork, DanglingNodeReference) {
  try {
    parse("link_id,from,to,length_m,speed_mps\ne1,A,Z,500,13.9\n", kTwoNodes);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("missing node 'Z'"), std::string::npos);
  }
}

TEST(LoadNetwork, NonPositiveLengthRejected) {
  EXPECT_THROW(parse("link_id,from,to,length_m,speed_mps\ne1,A,B,0,13.9\n", kTwoNodes), ParseError);
  EXPECT_THROW(parse("link_id,from,to,length_m,speed_mps\ne1,A,B,-3,13.9\n", kTwoNodes), ParseError);
}

TEST(LoadNetwork, MalformedRecordReportsLine) {
  try {
    parse("link_id,from,to,length_m,speed_mps\ne1,A,B,500,13.9\ne2,B,A,abc,13.9\n", kTwoNodes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(LoadNetwork, LatLonIsProjected) {
  Network net = parse("link_id,from,to,length_m,speed_mps\ne1,A,B,100,10\n",
                      "node_id,lat,lon\nA,42.5460,-83.2110\nB,42.5460,-83.2098\n");
  // 0.0012 degrees of longitude at 42.546 N is about 98.4 m.
  const double dx = net.node(1).x - net.node(0).x;
  EXPECT_NEAR(dx, 98.35, 0.5);
  EXPECT_NEAR(net.node(1).y - net.node(0).y, 0.0, 1e-9);
}

TEST(LoadNetwork, RoundTripThroughCsv) {
  Network grid = make_grid_network(3, 250.0, 11.0, 2, 900.0);
  Network back = parse(links_to_csv(grid), nodes_to_csv(grid));
  ASSERT_EQ(back.num_links(), grid.num_links());
  for (LinkIndex e = 0; e < grid.num_links(); ++e) {
    EXPECT_EQ(back.link(e).id, grid.link(e).id);
    EXPECT_EQ(back.link(e).capacity_vph, grid.link(e).capacity_vph);
    EXPECT_EQ(back.link(e).lanes, 2);
  }
}

TEST(GridNetwork, LinkCountMatchesEnumeration) {
  Network net = make_grid_network(8, 400.0, 13.9);
  EXPECT_EQ(net.num_nodes(), 64u);
  // Enumerate ordered node pairs at unit grid distance.
  std::size_t adjacent = 0;
  for (const Node& a : net.nodes()) {
    for (const Node& b : net.nodes()) {
      if (std::abs(distance({a.x, a.y}, {b.x, b.y}) - 400.0) < 1e-9) ++adjacent;
    }
  }
  EXPECT_EQ(adjacent, 224u);
  EXPECT_EQ(net.num_links(), adjacent);
  EXPECT_EQ(net.num_links(), static_cast<std::size_t>(2 * 2 * 8 * 7));
}

TEST(ValidatePath, Examples) {
  Network net = chain();
  EXPECT_TRUE(validate_path(net, std::vector<LinkId>{"e1"}));
  EXPECT_TRUE(validate_path(net, std::vector<LinkId>{"e1", "e2", "e4"}));
  EXPECT_FALSE(validate_path(net, std::vector<LinkId>{"e1", "e3"}));
  EXPECT_FALSE(validate_path(net, std::vector<LinkId>{"e1", "nope"}));
  EXPECT_FALSE(validate_path(net, std::vector<LinkId>{}));
}

TEST(ValidatePath, BfsShortestPathOnGrid) {
  Network net = make_grid_network(8, 400.0, 13.9);
  auto path = bfs_path(net, *net.find_node("n0_0"), *net.find_node("n2_3"));
  ASSERT_EQ(path.size(), 5u);
  EXPECT_TRUE(validate_path(net, path));
  EXPECT_DOUBLE_EQ(path_length(net, path), 2000.0);
}

TEST(BuildIncidence, OneOdTwoPaths) {
  Network net = chain();
  std::vector<Zone> zones{{0, {}}, {1, {}}};
  std::vector<Path> paths{{10, {0, 1}, {0, 1}}, {11, {0, 1}, {0, 1, 3}}};
  IncidenceSet inc = build_incidence(net, paths, zones);
  Eigen::MatrixXd phi(inc.phi);
  ASSERT_EQ(phi.rows(), 1);
  ASSERT_EQ(phi.cols(), 2);
  EXPECT_EQ(phi(0, 0), 1.0);
  EXPECT_EQ(phi(0, 1), 1.0);
}

TEST(BuildIncidence, DisjointPathsSupport) {
  // Two disjoint 3-link chains over 6 links.
  Network net = parse(
      "link_id,from,to,length_m,speed_mps\n"
      "a1,A,B,10,1\na2,B,C,10,1\na3,C,D,10,1\nb1,P,Q,10,1\nb2,Q,R,10,1\nb3,R,S,10,1\n",
      "node_id,x,y\nA,0,0\nB,1,0\nC,2,0\nD,3,0\nP,0,1\nQ,1,1\nR,2,1\nS,3,1\n");
  std::vector<Zone> zones{{0, {}}, {1, {}}, {2, {}}};
  std::vector<Path> paths{{0, {0, 1}, {0, 1, 2}}, {1, {0, 2}, {3, 4, 5}}};
  IncidenceSet inc = build_incidence(net, paths, zones);
  EXPECT_EQ(inc.omega.nonZeros(), 6);
  EXPECT_EQ(inc.phi.rows(), 2);
}

TEST(BuildIncidence, UnknownZoneOrInvalidPath) {
  Network net = chain();
  std::vector<Zone> zones{{0, {}}};
  EXPECT_THROW(build_incidence(net, {{0, {0, 5}, {0}}}, zones), ValidationError);
  EXPECT_THROW(build_incidence(net, {{0, {0, 0}, {0, 2}}}, zones), ValidationError);
}

TEST(BuildIncidence, TenOdPairsFortyPaths) {
  Network net = make_grid_network(8, 400.0, 13.9);
  std::vector<Zone> zones;
  for (int z = 0; z < 11; ++z) zones.push_back({z, {}});
  std::vector<Path> paths;
  for (int m = 0; m < 40; ++m) {
    // OD pair (m % 10, m % 10 + 1); path is a BFS route between two nodes.
    auto links = bfs_path(net, static_cast<std::size_t>(m % 8), static_cast<std::size_t>(63 - m));
    paths.push_back({m, {m % 10, m % 10 + 1}, links});
  }
  IncidenceSet inc = build_incidence(net, paths, zones);
  ASSERT_EQ(inc.phi.rows(), 10);
  ASSERT_EQ(inc.phi.cols(), 40);
  Eigen::MatrixXd phi(inc.phi);
  for (int m = 0; m < 40; ++m) EXPECT_EQ(phi.col(m).sum(), 1.0);
}

TEST(IncidenceProperties, ConservationDenseEquivalenceAndLengths) {
  Network net = make_grid_network(4, 100.0, 10.0);  // E = 48
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<Zone> zones;
    for (int z = 0; z < 4; ++z) zones.push_back({z, {}});
    std::vector<Path> paths;
    std::uniform_int_distribution<std::size_t> node(0, net.num_nodes() - 1);
    std::uniform_int_distribution<int> zone(0, 3);
    while (paths.size() < 12) {
      auto a = node(rng), b = node(rng);
      if (a == b) continue;
      paths.push_back({static_cast<PathId>(paths.size()), {zone(rng), zone(rng)}, bfs_path(net, a, b)});
    }
    IncidenceSet inc = build_incidence(net, paths, zones);
    Eigen::VectorXd y(static_cast<Eigen::Index>(paths.size()));
    for (auto& v : y) v = std::uniform_real_distribution<double>(0, 50)(rng);

    Eigen::VectorXd x = inc.phi * y;
    EXPECT_NEAR(x.sum(), y.sum(), 1e-9);
    for (std::size_t n = 0; n < inc.num_od(); ++n) {
      double expected = 0;
      for (std::size_t m = 0; m < paths.size(); ++m) {
        if (paths[m].od_pair == inc.od_pairs[n]) expected += y[static_cast<Eigen::Index>(m)];
      }
      EXPECT_NEAR(x[static_cast<Eigen::Index>(n)], expected, 1e-9);
    }

    Eigen::MatrixXd omega_dense = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(net.num_links()), y.size());
    for (std::size_t m = 0; m < paths.size(); ++m) {
      for (LinkIndex e : paths[m].links) omega_dense(e, static_cast<Eigen::Index>(m)) = 1.0;
    }
    Eigen::VectorXd z_sparse = inc.omega * y;
    Eigen::VectorXd z_dense = omega_dense * y;
    EXPECT_LE((z_sparse - z_dense).cwiseAbs().maxCoeff(), 1e-12);

    for (std::size_t m = 0; m < paths.size(); ++m) {
      double from_psi = 0;
      const SparseMatrix by_path = inc.psi_len.transpose();
      for (SparseMatrix::InnerIterator it(by_path, static_cast<Eigen::Index>(m)); it; ++it) from_psi += it.value();
      EXPECT_EQ(from_psi, path_length(net, paths[m].links));
    }
  }
}

TEST(TODSchedule, StandardPartition) {
  TODSchedule tod = TODSchedule::standard();
  EXPECT_EQ(tod.size(), 6u);
  EXPECT_EQ(tod.interval_of(8.5 * 3600), 2);
  EXPECT_EQ(tod.interval_of(23 * 3600 + 59 * 60), 6);
  EXPECT_EQ(tod.interval_of(0), 1);
  EXPECT_EQ(tod.at(3).label, "Midday");
  EXPECT_THROW(TODSchedule({{1, "a", 0, 12}, {2, "b", 12, 24}}), ValidationError);
  EXPECT_THROW(TODSchedule({{1, "a", 0, 6}, {2, "b", 7, 12}, {3, "c", 12, 24}}), ValidationError);
}
