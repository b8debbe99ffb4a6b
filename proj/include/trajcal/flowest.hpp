#pragma once

#include <cmath>
#include <future>
#include <map>
#include <string>
#include <vector>

#include "trajcal/admm.hpp"
#include "trajcal/clustering.hpp"
#include "trajcal/netmodel.hpp"

namespace trajcal {

// Path-flow estimation for one TOD interval:
//   min  w (1'Phi y - x~)^2 + gamma ||(I - G Phi) y||^2 + rho ||W (Omega y - z~)||^2
//   s.t. 0 <= y <= beta,  0 <= Phi y <= alpha,  0 <= Omega y <= C
struct FlowProblem {
  SparseMatrix phi;            // N x M
  SparseMatrix omega;          // E x M
  SparseMatrix g;              // M x N
  Eigen::VectorXd w;           // diagonal of W, E entries
  double x_tilde = 0.0;        // total trips
  Eigen::VectorXd z_tilde;     // zero-padded link flow prior, E entries
  double gamma = 1.0;
  double rho = 1.0;
  double total_weight = 1.0;   // weight of the total-trips term
  Eigen::VectorXd alpha;       // N
  Eigen::VectorXd beta;        // M
  Eigen::VectorXd capacity;    // E

  Eigen::Index num_paths() const { return phi.cols(); }
  Eigen::Index num_od() const { return phi.rows(); }
  Eigen::Index num_links() const { return omega.rows(); }
};

// Bounds left unset by data: alpha = x~ for every OD, beta = alpha of the
// path's OD, C = link capacity over the interval.
inline FlowProblem make_flow_problem(const IncidenceSet& inc, const AssignmentMap& map, const Network& net,
                                     double interval_hours, double x_tilde,
                                     const std::map<LinkIndex, double>& link_counts, double gamma = 1.0,
                                     double rho = 1.0) {
  FlowProblem p;
  p.phi = inc.phi;
  p.omega = inc.omega;
  p.g = map.g;
  p.x_tilde = x_tilde;
  p.gamma = gamma;
  p.rho = rho;
  const auto e = static_cast<Eigen::Index>(net.num_links());
  p.w = Eigen::VectorXd::Zero(e);
  p.z_tilde = Eigen::VectorXd::Zero(e);
  for (auto [link, count] : link_counts) {
    p.w[link] = 1.0;
    p.z_tilde[link] = count;
  }
  p.alpha = Eigen::VectorXd::Constant(p.num_od(), x_tilde);
  p.beta.resize(p.num_paths());
  for (Eigen::Index m = 0; m < p.num_paths(); ++m) {
    p.beta[m] = p.alpha[static_cast<Eigen::Index>(inc.od_of_path(static_cast<std::size_t>(m)))];
  }
  p.capacity.resize(e);
  for (LinkIndex l = 0; l < net.num_links(); ++l) p.capacity[l] = net.link(l).capacity_bound(interval_hours);
  return p;
}

// A = [I; Phi; Omega]; the row blocks give y, x and z.
struct FlowQP : CanonicalQP {
  Eigen::Index num_paths = 0;
  Eigen::Index num_od = 0;
  Eigen::Index num_links = 0;
};

namespace detail {

inline void check_flow_problem(const FlowProblem& p) {
  const Eigen::Index m = p.num_paths(), n = p.num_od(), e = p.num_links();
  if (p.omega.cols() != m || p.g.rows() != m || p.g.cols() != n || p.w.size() != e || p.z_tilde.size() != e ||
      p.alpha.size() != n || p.beta.size() != m || p.capacity.size() != e) {
    throw DimensionError("flow problem dimensions are inconsistent");
  }
  if (p.gamma < 0 || p.rho < 0 || p.total_weight < 0) throw ValidationError("objective weights must be >= 0");
  for (Eigen::Index i = 0; i < e; ++i) {
    if (p.w[i] < 0) throw ValidationError("link weights must be >= 0");
    if (p.w[i] == 0 && p.z_tilde[i] != 0) throw ValidationError("link prior set on an unweighted link");
  }
}

inline SparseMatrix ones_row(Eigen::Index n) {
  SparseMatrix r(1, n);
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index j = 0; j < n; ++j) t.emplace_back(0, j, 1.0);
  r.setFromTriplets(t.begin(), t.end());
  return r;
}

}  // namespace detail

inline FlowQP build_qp(const FlowProblem& p) {
  detail::check_flow_problem(p);
  const Eigen::Index m = p.num_paths(), n = p.num_od(), e = p.num_links();
  const SparseMatrix a = detail::ones_row(n) * p.phi;  // 1'Phi, 1 x M
  const SparseMatrix B = detail::identity(m) - SparseMatrix(p.g * p.phi);
  const SparseMatrix WO = p.w.asDiagonal() * p.omega;
  const Eigen::VectorXd Wz = p.w.cwiseProduct(p.z_tilde);

  FlowQP qp;
  qp.num_paths = m;
  qp.num_od = n;
  qp.num_links = e;
  qp.P = 2.0 * (p.total_weight * SparseMatrix(a.transpose() * a) + p.gamma * SparseMatrix(B.transpose() * B) +
                p.rho * SparseMatrix(WO.transpose() * WO));
  qp.P.prune(0.0);
  qp.q = -2.0 * (p.total_weight * p.x_tilde * Eigen::VectorXd(a.transpose()) + p.rho * (WO.transpose() * Wz));
  qp.constant = p.total_weight * p.x_tilde * p.x_tilde + p.rho * Wz.squaredNorm();

  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index j = 0; j < m; ++j) t.emplace_back(j, j, 1.0);
  for (Eigen::Index j = 0; j < p.phi.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(p.phi, j); it; ++it) t.emplace_back(m + it.row(), j, it.value());
  }
  for (Eigen::Index j = 0; j < p.omega.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(p.omega, j); it; ++it) t.emplace_back(m + n + it.row(), j, it.value());
  }
  qp.A.resize(m + n + e, m);
  qp.A.setFromTriplets(t.begin(), t.end());
  qp.l = Eigen::VectorXd::Zero(m + n + e);
  qp.u.resize(m + n + e);
  qp.u << p.beta, p.alpha, p.capacity;
  return qp;
}

// Direct evaluation of the three objective terms.
struct ObjectiveTerms {
  double total = 0.0;       // w (1'x - x~)^2
  double assignment = 0.0;  // gamma ||y - G x||^2
  double link = 0.0;        // rho ||W (z - z~)||^2
  double value() const { return total + assignment + link; }
};

inline ObjectiveTerms evaluate_objective(const FlowProblem& p, const Eigen::VectorXd& y) {
  const Eigen::VectorXd x = p.phi * y;
  const Eigen::VectorXd z = p.omega * y;
  ObjectiveTerms t;
  const double d = x.sum() - p.x_tilde;
  t.total = p.total_weight * d * d;
  t.assignment = p.gamma * (y - p.g * x).squaredNorm();
  t.link = p.rho * p.w.cwiseProduct(z - p.z_tilde).squaredNorm();
  return t;
}

struct FlowSolution {
  Eigen::VectorXd y;  // path flows
  Eigen::VectorXd x;  // OD flows, Phi y
  Eigen::VectorXd z;  // link flows, Omega y
  double objective = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  SolveStatus status = SolveStatus::max_iter;
  int iterations = 0;
  bool polished = false;
  Eigen::VectorXd duals;  // one per row of A
};

inline std::pair<Eigen::VectorXd, Eigen::VectorXd> recover_flows(const Eigen::VectorXd& y, const IncidenceSet& inc) {
  return {inc.phi * y, inc.omega * y};
}

namespace detail {

// Moves a near-feasible y into the feasible set. Every row of A is
// nonnegative and every lower bound is 0, so clamping to the path box and
// then shrinking y uniformly fixes any over-capacity row without breaking
// another.
inline void restore_feasibility(const FlowQP& qp, Eigen::VectorXd& y) {
  y = y.cwiseMax(0.0).cwiseMin(qp.u.head(qp.num_paths));
  for (Eigen::Index r = qp.num_paths; r < qp.A.rows(); ++r) {
    if (qp.u[r] > 0) continue;
    const SparseMatrix row = qp.A.row(r);
    for (Eigen::Index j = 0; j < row.outerSize(); ++j) {
      for (SparseMatrix::InnerIterator it(row, j); it; ++it) y[it.col()] = 0.0;
    }
  }
  const Eigen::VectorXd Ay = qp.A * y;
  double s = 1.0;
  for (Eigen::Index r = 0; r < Ay.size(); ++r) {
    if (Ay[r] > qp.u[r]) s = std::min(s, qp.u[r] / Ay[r]);
  }
  if (s < 1.0) y *= s;
}

}  // namespace detail

inline FlowSolution solve_admm(const FlowQP& qp, const ADMMSettings& settings = {}) {
  const ADMMResult r = admm_solve(qp, settings);
  FlowSolution sol;
  sol.status = r.status;
  sol.iterations = r.iterations;
  sol.primal_residual = r.primal_residual;
  sol.dual_residual = r.dual_residual;
  sol.polished = r.polished;
  sol.duals = r.y;
  sol.y = r.x;
  if (r.status != SolveStatus::infeasible) detail::restore_feasibility(qp, sol.y);
  const Eigen::VectorXd Ay = qp.A * sol.y;
  sol.x = Ay.segment(qp.num_paths, qp.num_od);
  sol.z = Ay.tail(qp.num_links);
  sol.objective = qp.objective(sol.y);
  return sol;
}

inline FlowSolution solve_flow_problem(const FlowProblem& p, const ADMMSettings& settings = {}) {
  return solve_admm(build_qp(p), settings);
}

// --- Rounding ---------------------------------------------------------------

struct RoundedFlows {
  std::vector<long long> y;
  double drift = 0.0;  // |1'y_int - 1'y|
};

inline RoundedFlows round_path_flows(const FlowSolution& sol, const Eigen::VectorXd& beta) {
  if (sol.status == SolveStatus::infeasible) throw ValidationError("cannot round an infeasible solution");
  if (beta.size() != sol.y.size()) throw DimensionError("beta does not match the path count");
  RoundedFlows out;
  double sum_int = 0.0;
  for (Eigen::Index i = 0; i < sol.y.size(); ++i) {
    double v = std::floor(sol.y[i] + 0.5);
    v = std::clamp(v, 0.0, std::floor(beta[i]));
    out.y.push_back(static_cast<long long>(v));
    sum_int += v;
  }
  out.drift = std::abs(sum_int - sol.y.sum());
  return out;
}

// --- All TOD intervals ------------------------------------------------------

struct TODFlowResult {
  int tod = 0;
  FlowSolution solution;
  std::string error;  // set when the solve threw
  bool ok() const { return error.empty() && solution.status == SolveStatus::solved; }
};

// Independent solves, one per interval, run concurrently. A failure in one
// interval is recorded against it and does not affect the others.
inline std::vector<TODFlowResult> estimate_all_tods(const std::vector<std::pair<int, FlowProblem>>& problems,
                                                    const ADMMSettings& settings = {}) {
  std::vector<std::future<FlowSolution>> jobs;
  for (const auto& [tod, p] : problems) {
    jobs.push_back(std::async(std::launch::async, [&p = p, &settings] { return solve_flow_problem(p, settings); }));
  }
  std::vector<TODFlowResult> out;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    TODFlowResult r;
    r.tod = problems[i].first;
    try {
      r.solution = jobs[i].get();
    } catch (const std::exception& err) {
      r.error = err.what();
      r.solution.status = SolveStatus::infeasible;
    }
    out.push_back(std::move(r));
  }
  return out;
}

// --- Export -----------------------------------------------------------------

struct TODFlows {
  int tod = 0;
  FlowSolution solution;
  RoundedFlows rounded;
};

inline std::string path_flows_csv(const IncidenceSet& inc, const std::vector<TODFlows>& flows) {
  csv::Writer w{"tod", "path_id", "y_float", "y_int"};
  for (const auto& f : flows) {
    for (std::size_t m = 0; m < inc.num_paths(); ++m) {
      w.row(f.tod, inc.path_ids[m], f.solution.y[static_cast<Eigen::Index>(m)], f.rounded.y[m]);
    }
  }
  return w.str();
}

inline std::string od_flows_csv(const IncidenceSet& inc, const std::vector<TODFlows>& flows) {
  csv::Writer w{"tod", "zone_o", "zone_d", "x"};
  for (const auto& f : flows) {
    for (std::size_t n = 0; n < inc.num_od(); ++n) {
      w.row(f.tod, inc.od_pairs[n].first, inc.od_pairs[n].second, f.solution.x[static_cast<Eigen::Index>(n)]);
    }
  }
  return w.str();
}

inline std::string link_flows_csv(const Network& net, const std::vector<TODFlows>& flows) {
  csv::Writer w{"tod", "link_id", "z"};
  for (const auto& f : flows) {
    for (LinkIndex l = 0; l < net.num_links(); ++l) w.row(f.tod, net.link(l).id, f.solution.z[l]);
  }
  return w.str();
}

// Integer path flows back from path_flows_csv, keyed by TOD.
inline std::map<int, std::vector<long long>> parse_path_flows(const csv::Table& table, const IncidenceSet& inc) {
  table.require({"tod", "path_id", "y_int"});
  std::unordered_map<PathId, std::size_t> column;
  for (std::size_t m = 0; m < inc.path_ids.size(); ++m) column[inc.path_ids[m]] = m;
  std::map<int, std::vector<long long>> out;
  for (const auto& row : table.rows()) {
    const int tod = static_cast<int>(table.integer(row, "tod"));
    auto it = column.find(static_cast<PathId>(table.integer(row, "path_id")));
    if (it == column.end()) throw ParseError(table.source(), row.line, "unknown path id");
    auto& v = out[tod];
    v.resize(inc.num_paths(), 0);
    v[it->second] = table.integer(row, "y_int");
  }
  return out;
}

}  // namespace trajcal
