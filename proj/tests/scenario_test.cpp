#include <gtest/gtest.h>

#include <set>

#include "trajcal/scenario.hpp"

using namespace trajcal;

namespace {

ScenarioSpec small_spec() {
  ScenarioSpec s;
  s.days = 2;
  return s;
}

}  // namespace

TEST(Scenario, GridShapeAndZones) {
  const Scenario sc = generate_scenario(small_spec());
  // 8x8 grid, four directed links per interior adjacency: 2 * 2 * 8 * 7.
  EXPECT_EQ(sc.truth.num_links(), 224u);
  EXPECT_EQ(sc.mapped.num_links(), 224u);
  EXPECT_EQ(sc.zone_nodes.size(), 9u);
  ASSERT_EQ(sc.rate.size(), 6u);
}

TEST(Scenario, MappedSpeedsDifferOnlyWhereCorrupted) {
  const ScenarioSpec spec = small_spec();
  const Scenario sc = generate_scenario(spec);
  std::size_t wrong = 0;
  for (LinkIndex e = 0; e < sc.truth.num_links(); ++e) {
    const double t = sc.truth.link(e).speed_limit, m = sc.mapped.link(e).speed_limit;
    if (t != m) {
      ++wrong;
      EXPECT_NEAR(m, t * spec.wrong_speed_factor, 1e-9);
    }
    EXPECT_EQ(sc.truth.link(e).length, sc.mapped.link(e).length);
  }
  EXPECT_NEAR(static_cast<double>(wrong) / 224.0, spec.wrong_speed_fraction, 0.06);
}

TEST(Scenario, Deterministic) {
  const Scenario a = generate_scenario(small_spec());
  const Scenario b = generate_scenario(small_spec());
  ASSERT_EQ(a.observed.size(), b.observed.size());
  for (std::size_t i = 0; i < a.observed.size(); ++i) {
    EXPECT_EQ(a.observed[i].trip_id, b.observed[i].trip_id);
    EXPECT_EQ(a.observed[i].entry_times, b.observed[i].entry_times);
    EXPECT_EQ(a.observed[i].origin.x, b.observed[i].origin.x);
  }
  EXPECT_EQ(a.link_counts, b.link_counts);

  ScenarioSpec other = small_spec();
  other.seed = 99;
  EXPECT_NE(generate_scenario(other).observed.size(), a.observed.size());
}

TEST(Scenario, TotalsAndPenetrationAreConsistent) {
  const ScenarioSpec spec = small_spec();
  const Scenario sc = generate_scenario(spec);
  double planted = 0, realized = 0;
  for (const auto& [tod, v] : sc.planted_totals) planted += v;
  for (const auto& [tod, v] : sc.realized_totals) realized += v;
  // Poisson totals over two days: sd about sqrt(planted / 2).
  EXPECT_NEAR(realized, planted, 5.0 * std::sqrt(planted / spec.days));
  const double share = static_cast<double>(sc.observed.size()) / (realized * spec.days);
  EXPECT_NEAR(share, spec.penetration, 0.006);

  for (const auto& tr : sc.observed) {
    ASSERT_FALSE(tr.links.empty());
    EXPECT_EQ(tr.links.size(), tr.entry_times.size());
    EXPECT_TRUE(std::is_sorted(tr.entry_times.begin(), tr.entry_times.end()));
    EXPECT_NEAR(tr.travel_time, tr.exit_time - tr.entry_times.front(), 1e-9);
    EXPECT_TRUE(tr.day == "d00" || tr.day == "d01") << tr.day;
  }
}

TEST(Scenario, LinkCountsCoverOnlyMeasuredLinks) {
  ScenarioSpec spec = small_spec();
  spec.measured_links = 7;
  const Scenario sc = generate_scenario(spec);
  std::set<LinkIndex> links;
  std::set<int> tods;
  for (const auto& [key, v] : sc.link_counts) {
    links.insert(key.second);
    tods.insert(key.first);
    EXPECT_GE(v, 0.0);
  }
  EXPECT_EQ(links.size(), 7u);
  EXPECT_EQ(tods.size(), 6u);
  EXPECT_EQ(sc.link_counts.size(), 42u);

  const auto back = parse_link_counts(sc.mapped, csv::Table::parse(link_counts_csv(sc.mapped, sc.link_counts), "mem"));
  EXPECT_EQ(back, sc.link_counts);
}
