#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "trajcal/common.hpp"

namespace trajcal {

using SparseMatrix = Eigen::SparseMatrix<double>;

// minimize 1/2 y'Py + q'y + constant  subject to  l <= Ay <= u
struct CanonicalQP {
  SparseMatrix P;  // full symmetric storage
  Eigen::VectorXd q;
  SparseMatrix A;
  Eigen::VectorXd l;
  Eigen::VectorXd u;
  double constant = 0.0;

  double objective(const Eigen::VectorXd& y) const { return 0.5 * y.dot(P * y) + q.dot(y) + constant; }
};

enum class SolveStatus { solved, max_iter, infeasible };

inline std::string to_string(SolveStatus s) {
  switch (s) {
    case SolveStatus::solved: return "solved";
    case SolveStatus::max_iter: return "max_iter";
    case SolveStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

struct ADMMSettings {
  double sigma = 0.1;           // initial ADMM penalty
  double regularization = 1e-6;  // proximal term on the primal variable
  double relaxation = 1.6;
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  int max_iter = 20000;
  int scaling_iters = 10;
  int adapt_interval = 50;
  int check_interval = 5;
  bool polish = true;

  void validate() const {
    if (!(sigma > 0)) throw ValidationError("ADMM penalty must be positive");
    if (!(eps_abs > 0 && eps_rel > 0)) throw ValidationError("ADMM tolerances must be positive");
    if (max_iter < 1) throw ValidationError("ADMM max_iter must be >= 1");
    if (scaling_iters < 0) throw ValidationError("ADMM scaling_iters must be >= 0");
    if (!(relaxation > 0 && relaxation < 2)) throw ValidationError("ADMM relaxation must be in (0, 2)");
  }
};

struct ADMMResult {
  Eigen::VectorXd x;  // primal
  Eigen::VectorXd z;  // constraint values, projected onto [l, u]
  Eigen::VectorXd y;  // constraint duals (negative at lower, positive at upper bounds)
  SolveStatus status = SolveStatus::max_iter;
  int iterations = 0;
  double primal_residual = 0.0;  // ||Ax - z||_inf
  double dual_residual = 0.0;    // ||Px + q + A'y||_inf
  bool polished = false;
};

namespace detail {

inline Eigen::VectorXd col_inf_norms(const SparseMatrix& m) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m.cols());
  for (Eigen::Index j = 0; j < m.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(m, j); it; ++it) out[j] = std::max(out[j], std::abs(it.value()));
  }
  return out;
}

inline Eigen::VectorXd row_inf_norms(const SparseMatrix& m) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m.rows());
  for (Eigen::Index j = 0; j < m.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(m, j); it; ++it) out[it.row()] = std::max(out[it.row()], std::abs(it.value()));
  }
  return out;
}

inline double limit_scaling(double v) {
  constexpr double kMin = 1e-4, kMax = 1e4;
  if (v < kMin) return 1.0;
  return std::min(v, kMax);
}

inline double inf_norm(const Eigen::VectorXd& v) { return v.size() == 0 ? 0.0 : v.lpNorm<Eigen::Infinity>(); }

// Scaled copy of the problem: Pbar = c D P D, qbar = c D q, Abar = E A D.
struct ScaledQP {
  SparseMatrix P, A;
  Eigen::VectorXd q, l, u, D, E;
  double c = 1.0;
};

inline ScaledQP ruiz_equilibrate(const CanonicalQP& qp, int passes) {
  ScaledQP s;
  s.P = qp.P;
  s.A = qp.A;
  s.q = qp.q;
  s.D = Eigen::VectorXd::Ones(qp.P.rows());
  s.E = Eigen::VectorXd::Ones(qp.A.rows());
  for (int it = 0; it < passes; ++it) {
    Eigen::VectorXd dt = col_inf_norms(s.P).cwiseMax(col_inf_norms(s.A));
    Eigen::VectorXd et = row_inf_norms(s.A);
    for (auto& v : dt) v = 1.0 / std::sqrt(limit_scaling(v));
    for (auto& v : et) v = 1.0 / std::sqrt(limit_scaling(v));
    s.P = dt.asDiagonal() * s.P * dt.asDiagonal();
    s.A = et.asDiagonal() * s.A * dt.asDiagonal();
    s.q = dt.cwiseProduct(s.q);
    s.D = s.D.cwiseProduct(dt);
    s.E = s.E.cwiseProduct(et);

    const double mean_p = s.P.cols() > 0 ? col_inf_norms(s.P).mean() : 0.0;
    const double ct = 1.0 / limit_scaling(std::max(mean_p, inf_norm(s.q)));
    s.P *= ct;
    s.q *= ct;
    s.c *= ct;
  }
  s.l = s.E.cwiseProduct(qp.l);
  s.u = s.E.cwiseProduct(qp.u);
  for (Eigen::Index i = 0; i < qp.l.size(); ++i) {
    if (std::isinf(qp.l[i])) s.l[i] = qp.l[i];
    if (std::isinf(qp.u[i])) s.u[i] = qp.u[i];
  }
  return s;
}

inline SparseMatrix identity(Eigen::Index n) {
  SparseMatrix I(n, n);
  I.setIdentity();
  return I;
}

// Equality rows get a stiffer penalty, free rows a negligible one.
inline Eigen::VectorXd penalty_vector(const ScaledQP& s, double rho) {
  Eigen::VectorXd r(s.l.size());
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    if (std::isinf(s.l[i]) && std::isinf(s.u[i])) {
      r[i] = 1e-6;
    } else if (std::abs(s.u[i] - s.l[i]) < 1e-4) {
      r[i] = 1e3 * rho;
    } else {
      r[i] = rho;
    }
  }
  return r;
}

struct Residuals {
  double prim = 0, dual = 0, eps_prim = 0, eps_dual = 0;
  // Normalized quantities used by penalty adaptation, in the scaled space.
  double prim_scaled_ratio = 0, dual_scaled_ratio = 0;

  bool converged() const { return prim <= eps_prim && dual <= eps_dual; }
  double merit() const { return std::max(prim / eps_prim, dual / eps_dual); }
};

inline Residuals residuals(const ScaledQP& s, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                           const Eigen::VectorXd& y, const ADMMSettings& st) {
  Residuals r;
  const Eigen::VectorXd Ax = s.A * x;
  const Eigen::VectorXd Px = s.P * x;
  const Eigen::VectorXd Aty = s.A.transpose() * y;
  const Eigen::VectorXd Einv = s.E.cwiseInverse();
  const Eigen::VectorXd Dinv = s.D.cwiseInverse();
  r.prim = inf_norm(Einv.cwiseProduct(Ax - z));
  r.dual = inf_norm(Dinv.cwiseProduct(Px + s.q + Aty)) / s.c;
  r.eps_prim = st.eps_abs + st.eps_rel * std::max(inf_norm(Einv.cwiseProduct(Ax)), inf_norm(Einv.cwiseProduct(z)));
  r.eps_dual = st.eps_abs + st.eps_rel / s.c *
                                std::max({inf_norm(Dinv.cwiseProduct(Px)), inf_norm(Dinv.cwiseProduct(Aty)),
                                          inf_norm(Dinv.cwiseProduct(s.q))});
  const double tiny = 1e-30;
  r.prim_scaled_ratio = inf_norm(Ax - z) / std::max({inf_norm(Ax), inf_norm(z), tiny});
  r.dual_scaled_ratio = inf_norm(Px + s.q + Aty) / std::max({inf_norm(Px), inf_norm(Aty), inf_norm(s.q), tiny});
  return r;
}

inline Eigen::VectorXd project(const Eigen::VectorXd& v, const Eigen::VectorXd& l, const Eigen::VectorXd& u) {
  return v.cwiseMax(l).cwiseMin(u);
}

// Solves the equality-constrained problem on the guessed active set, with
// iterative refinement against the unregularized KKT system.
inline bool polish(const ScaledQP& s, const ADMMSettings& st, Eigen::VectorXd& x, Eigen::VectorXd& z,
                   Eigen::VectorXd& y) {
  const Eigen::Index n = s.P.rows();
  std::vector<Eigen::Index> rows;
  std::vector<double> rhs_b;
  for (Eigen::Index i = 0; i < s.A.rows(); ++i) {
    if (z[i] - s.l[i] < -y[i]) {
      rows.push_back(i);
      rhs_b.push_back(s.l[i]);
    } else if (s.u[i] - z[i] < y[i]) {
      rows.push_back(i);
      rhs_b.push_back(s.u[i]);
    }
  }
  const auto m = static_cast<Eigen::Index>(rows.size());
  const SparseMatrix At = s.A.transpose();
  std::vector<Eigen::Triplet<double>> trip;
  std::vector<Eigen::Triplet<double>> trip0;
  for (Eigen::Index j = 0; j < s.P.outerSize(); ++j) {
    for (SparseMatrix::InnerIterator it(s.P, j); it; ++it) {
      trip.emplace_back(it.row(), it.col(), it.value());
      trip0.emplace_back(it.row(), it.col(), it.value());
    }
  }
  const double delta = st.regularization;
  for (Eigen::Index j = 0; j < n; ++j) trip.emplace_back(j, j, delta);
  for (Eigen::Index k = 0; k < m; ++k) {
    for (SparseMatrix::InnerIterator it(At, rows[static_cast<std::size_t>(k)]); it; ++it) {
      for (auto* t : {&trip, &trip0}) {
        t->emplace_back(n + k, it.row(), it.value());
        t->emplace_back(it.row(), n + k, it.value());
      }
    }
    trip.emplace_back(n + k, n + k, -delta);
  }
  SparseMatrix K(n + m, n + m), K0(n + m, n + m);
  K.setFromTriplets(trip.begin(), trip.end());
  K0.setFromTriplets(trip0.begin(), trip0.end());
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(K);
  if (ldlt.info() != Eigen::Success) return false;

  Eigen::VectorXd rhs(n + m);
  rhs.head(n) = -s.q;
  for (Eigen::Index k = 0; k < m; ++k) rhs[n + k] = rhs_b[static_cast<std::size_t>(k)];
  Eigen::VectorXd sol = ldlt.solve(rhs);
  for (int r = 0; r < 5; ++r) sol += ldlt.solve(rhs - K0 * sol);
  if (!sol.allFinite()) return false;

  Eigen::VectorXd xp = sol.head(n);
  Eigen::VectorXd yp = Eigen::VectorXd::Zero(s.A.rows());
  for (Eigen::Index k = 0; k < m; ++k) yp[rows[static_cast<std::size_t>(k)]] = sol[n + k];
  Eigen::VectorXd zp = project(s.A * xp, s.l, s.u);

  const Residuals before = residuals(s, x, z, y, st);
  const Residuals after = residuals(s, xp, zp, yp, st);
  const bool prim_ok = after.prim <= std::max(before.prim, before.eps_prim);
  const bool dual_ok = after.dual <= std::max(before.dual, before.eps_dual);
  if (!(prim_ok && dual_ok)) return false;
  x = std::move(xp);
  z = std::move(zp);
  y = std::move(yp);
  return true;
}

}  // namespace detail

// Operator-splitting ADMM for convex QPs: Ruiz equilibration, a cached
// sparse LDL' factorization of P + reg I + A' R A, over-relaxation, penalty
// adaptation by residual balancing, and optional solution polishing.
// Single-threaded and deterministic.
inline ADMMResult admm_solve(const CanonicalQP& qp, const ADMMSettings& st = {}) {
  st.validate();
  const Eigen::Index n = qp.P.rows();
  const Eigen::Index m = qp.A.rows();
  if (qp.P.cols() != n || qp.q.size() != n || qp.A.cols() != n || qp.l.size() != m || qp.u.size() != m) {
    throw DimensionError("QP dimensions are inconsistent");
  }
  ADMMResult res;
  res.x = Eigen::VectorXd::Zero(n);
  res.y = Eigen::VectorXd::Zero(m);
  res.z = Eigen::VectorXd::Zero(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (qp.l[i] > qp.u[i]) {
      res.status = SolveStatus::infeasible;
      return res;
    }
  }

  const detail::ScaledQP s = detail::ruiz_equilibrate(qp, st.scaling_iters);
  const SparseMatrix At = s.A.transpose();
  const SparseMatrix I = detail::identity(n);
  double rho = st.sigma;
  Eigen::VectorXd rvec = detail::penalty_vector(s, rho);
  Eigen::SimplicialLDLT<SparseMatrix> ldlt;
  auto factor = [&] {
    SparseMatrix K = s.P + st.regularization * I + SparseMatrix(At * rvec.asDiagonal() * s.A);
    ldlt.compute(K);
    if (ldlt.info() != Eigen::Success) throw Error("ADMM linear system factorization failed");
  };
  factor();

  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd z = detail::project(Eigen::VectorXd::Zero(m), s.l, s.u);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd best_x = x, best_z = z, best_y = y;
  double best_merit = std::numeric_limits<double>::infinity();
  const double a = st.relaxation;

  int iter = 0;
  bool converged = false;
  for (iter = 1; iter <= st.max_iter; ++iter) {
    const Eigen::VectorXd rhs = st.regularization * x - s.q + At * (rvec.cwiseProduct(z) - y);
    const Eigen::VectorXd xt = ldlt.solve(rhs);
    const Eigen::VectorXd zt = s.A * xt;
    x = a * xt + (1.0 - a) * x;
    const Eigen::VectorXd zr = a * zt + (1.0 - a) * z;
    const Eigen::VectorXd zn = detail::project(zr + y.cwiseQuotient(rvec), s.l, s.u);
    y += rvec.cwiseProduct(zr - zn);
    z = zn;

    const bool check = iter % st.check_interval == 0 || iter == st.max_iter;
    const bool adapt = st.adapt_interval > 0 && iter % st.adapt_interval == 0;
    if (!check && !adapt) continue;
    const detail::Residuals r = detail::residuals(s, x, z, y, st);
    if (r.merit() < best_merit) {
      best_merit = r.merit();
      best_x = x;
      best_z = z;
      best_y = y;
    }
    if (r.converged()) {
      converged = true;
      break;
    }
    if (adapt && r.dual_scaled_ratio > 0) {
      const double proposed =
          std::clamp(rho * std::sqrt(r.prim_scaled_ratio / std::max(r.dual_scaled_ratio, 1e-30)), 1e-6, 1e6);
      if (proposed > 5.0 * rho || proposed < 0.2 * rho) {
        rho = proposed;
        rvec = detail::penalty_vector(s, rho);
        factor();
      }
    }
  }
  res.iterations = std::min(iter, st.max_iter);
  if (converged) {
    res.status = SolveStatus::solved;
    if (st.polish) res.polished = detail::polish(s, st, x, z, y);
  } else {
    res.status = SolveStatus::max_iter;
    x = best_x;
    z = best_z;
    y = best_y;
  }
  const detail::Residuals r = detail::residuals(s, x, z, y, st);
  res.primal_residual = r.prim;
  res.dual_residual = r.dual;
  res.x = s.D.cwiseProduct(x);
  res.z = s.E.cwiseInverse().cwiseProduct(z);
  res.y = s.E.cwiseProduct(y) / s.c;
  return res;
}

}  // namespace trajcal
