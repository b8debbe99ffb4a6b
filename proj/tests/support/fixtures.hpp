#pragma once

// Seeded instance generators shared by the unit tests and the acceptance run.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "trajcal/flowest.hpp"
#include "trajcal/mesosim.hpp"

namespace fixture {

using namespace trajcal;

// Random feasible flow QP: N <= 10 OD pairs, M <= 30 paths, E <= 40 links.
inline FlowProblem random_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto unif = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  auto pick = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };
  const int n = pick(1, 10);
  const int m = pick(n, 30);
  const int e = pick(5, 40);
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(n, m), omega = Eigen::MatrixXd::Zero(e, m), g = Eigen::MatrixXd::Zero(m, n);
  std::vector<int> od(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) {
    od[static_cast<std::size_t>(j)] = j < n ? j : pick(0, n - 1);
    phi(od[static_cast<std::size_t>(j)], j) = 1;
    const int len = pick(1, 6);
    for (int k = 0; k < len; ++k) omega(pick(0, e - 1), j) = 1;
  }
  for (int i = 0; i < n; ++i) {
    if (unif(0, 1) < 0.15) continue;  // unobserved OD
    double total = 0;
    for (int j = 0; j < m; ++j) {
      if (od[static_cast<std::size_t>(j)] == i) total += (g(j, i) = unif(0, 1) < 0.2 ? 0.0 : unif(0.1, 1));
    }
    if (total > 0) g.col(i) /= total;
  }
  FlowProblem p;
  p.phi = phi.sparseView();
  p.omega = omega.sparseView();
  p.g = g.sparseView();
  p.x_tilde = unif(10, 200);
  p.w = Eigen::VectorXd::Zero(e);
  p.z_tilde = Eigen::VectorXd::Zero(e);
  for (int l = 0; l < e; ++l) {
    if (unif(0, 1) < 0.4) {
      p.w[l] = unif(0.5, 2);
      p.z_tilde[l] = unif(0, 0.5 * p.x_tilde);
    }
  }
  p.gamma = unif(0, 3);
  p.rho = unif(0, 3);
  p.alpha.resize(n);
  for (int i = 0; i < n; ++i) p.alpha[i] = unif(0.1, 1.0) * p.x_tilde;
  p.beta.resize(m);
  for (int j = 0; j < m; ++j) p.beta[j] = unif(0.05, 0.6) * p.x_tilde;
  p.capacity.resize(e);
  for (int l = 0; l < e; ++l) p.capacity[l] = unif(0.1, 1.0) * p.x_tilde;
  return p;
}

// Small grid with random paths and departures.
struct SimScenario {
  Network net;
  std::vector<Path> paths;
  std::vector<SimTrip> trips;
};

inline SimScenario random_scenario(std::uint64_t seed, double max_departure) {
  std::mt19937_64 rng(seed);
  auto pick = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };
  const int n = pick(3, 6);
  SimScenario s{make_grid_network(n, std::uniform_real_distribution<double>(100, 400)(rng), 13.4, pick(1, 2),
                               std::uniform_real_distribution<double>(200, 900)(rng)),
             {},
             {}};
  const int n_paths = pick(3, 12);
  while (static_cast<int>(s.paths.size()) < n_paths) {
    const auto a = static_cast<std::size_t>(pick(0, n * n - 1));
    const auto b = static_cast<std::size_t>(pick(0, n * n - 1));
    if (a == b) continue;
    s.paths.push_back({static_cast<PathId>(s.paths.size()), {0, 1}, bfs_path(s.net, a, b)});
  }
  const int n_trips = pick(50, 600);
  for (int i = 0; i < n_trips; ++i) {
    s.trips.push_back({"t" + std::to_string(i), static_cast<PathId>(pick(0, n_paths - 1)),
                       std::uniform_real_distribution<double>(0, max_departure)(rng)});
  }
  std::sort(s.trips.begin(), s.trips.end(),
            [](const SimTrip& a, const SimTrip& b) { return a.departure_time < b.departure_time; });
  return s;
}

}  // namespace fixture
