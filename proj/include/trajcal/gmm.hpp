#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "trajcal/common.hpp"

namespace trajcal {

// Two-dimensional Gaussian mixture with full covariances.
struct GMMModel {
  int k = 0;
  std::vector<Eigen::Vector2d> means;
  std::vector<Eigen::Matrix2d> covariances;
  std::vector<double> weights;

  std::vector<double> log_likelihood_history;  // initial value, then one per EM iteration
  int iterations = 0;
  bool converged = false;
  std::vector<std::string> warnings;

  double log_likelihood() const {
    return log_likelihood_history.empty() ? -std::numeric_limits<double>::infinity()
                                          : log_likelihood_history.back();
  }

  // log(w_k N(p | mu_k, Sigma_k)) for every component.
  void component_log_densities(const Point& p, std::vector<double>& out) const {
    out.resize(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
      const auto& s = covariances[static_cast<std::size_t>(c)];
      const double det = s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0);
      const double dx = p.x - means[static_cast<std::size_t>(c)].x();
      const double dy = p.y - means[static_cast<std::size_t>(c)].y();
      // Inverse of a symmetric 2x2 written out.
      const double maha = (s(1, 1) * dx * dx - 2.0 * s(0, 1) * dx * dy + s(0, 0) * dy * dy) / det;
      const double w = weights[static_cast<std::size_t>(c)];
      out[static_cast<std::size_t>(c)] = (w > 0 ? std::log(w) : -std::numeric_limits<double>::infinity()) -
                                         std::log(2.0 * std::numbers::pi) - 0.5 * std::log(det) - 0.5 * maha;
    }
  }

  // Index of the most responsible component; ties go to the lower index.
  int predict(const Point& p) const {
    std::vector<double> lp;
    component_log_densities(p, lp);
    int best = 0;
    for (int c = 1; c < k; ++c) {
      if (lp[static_cast<std::size_t>(c)] > lp[static_cast<std::size_t>(best)]) best = c;
    }
    return best;
  }

  std::vector<double> responsibilities(const Point& p) const {
    std::vector<double> lp;
    component_log_densities(p, lp);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : lp) mx = std::max(mx, v);
    double total = 0;
    for (double& v : lp) total += (v = std::exp(v - mx));
    for (double& v : lp) v /= total;
    return lp;
  }

  // Free parameters: 2 mean + 3 covariance entries per component, K-1 weights.
  int parameter_count() const { return 6 * k - 1; }

  double bic(std::size_t n_points) const {
    return -2.0 * log_likelihood() + parameter_count() * std::log(static_cast<double>(n_points));
  }
};

struct GMMOptions {
  int max_iter = 500;
  double tolerance = 1e-6;         // relative log-likelihood change
  double covariance_floor = 1e-6;  // minimum eigenvalue
  int restarts = 1;                // best final log-likelihood wins
};

namespace detail {

// k-means++ seeding.
inline std::vector<Eigen::Vector2d> kmeanspp(const std::vector<Point>& pts, int k, std::mt19937_64& rng) {
  std::vector<Eigen::Vector2d> centers;
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  const Point& first = pts[pick(rng)];
  centers.emplace_back(first.x, first.y);
  std::vector<double> d2(pts.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    const auto& c = centers.back();
    double total = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double dx = pts[i].x - c.x();
      const double dy = pts[i].y - c.y();
      d2[i] = std::min(d2[i], dx * dx + dy * dy);
      total += d2[i];
    }
    std::size_t chosen = 0;
    if (total > 0) {
      double r = uniform01(rng) * total;
      for (chosen = 0; chosen + 1 < pts.size(); ++chosen) {
        r -= d2[chosen];
        if (r <= 0) break;
      }
    } else {
      chosen = pick(rng);
    }
    centers.emplace_back(pts[chosen].x, pts[chosen].y);
  }
  return centers;
}

// Eigenvalue clamp; the constrained covariance maximizer under lambda >= floor.
inline bool floor_covariance(Eigen::Matrix2d& s, double floor) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(s);
  Eigen::Vector2d ev = es.eigenvalues();
  if (ev.minCoeff() >= floor) return false;
  ev = ev.cwiseMax(floor);
  s = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  s(0, 1) = s(1, 0) = 0.5 * (s(0, 1) + s(1, 0));
  return true;
}

inline double e_step(const GMMModel& m, const std::vector<Point>& pts, Eigen::MatrixXd& resp) {
  resp.resize(static_cast<Eigen::Index>(pts.size()), m.k);
  std::vector<double> lp;
  double ll = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    m.component_log_densities(pts[i], lp);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : lp) mx = std::max(mx, v);
    double total = 0;
    for (double v : lp) total += std::exp(v - mx);
    const double log_norm = mx + std::log(total);
    ll += log_norm;
    for (int c = 0; c < m.k; ++c) {
      resp(static_cast<Eigen::Index>(i), c) = std::exp(lp[static_cast<std::size_t>(c)] - log_norm);
    }
  }
  return ll;
}

inline bool m_step(GMMModel& m, const std::vector<Point>& pts, const Eigen::MatrixXd& resp, double floor) {
  bool floored = false;
  const double n = static_cast<double>(pts.size());
  for (int c = 0; c < m.k; ++c) {
    const auto cs = static_cast<std::size_t>(c);
    double nk = 0;
    Eigen::Vector2d mu = Eigen::Vector2d::Zero();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double r = resp(static_cast<Eigen::Index>(i), c);
      nk += r;
      mu += r * Eigen::Vector2d(pts[i].x, pts[i].y);
    }
    m.weights[cs] = nk / n;
    if (nk <= std::numeric_limits<double>::min()) continue;  // empty component keeps its shape
    mu /= nk;
    Eigen::Matrix2d s = Eigen::Matrix2d::Zero();
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double r = resp(static_cast<Eigen::Index>(i), c);
      Eigen::Vector2d d(pts[i].x - mu.x(), pts[i].y - mu.y());
      s += r * d * d.transpose();
    }
    s /= nk;
    floored |= floor_covariance(s, floor);
    m.means[cs] = mu;
    m.covariances[cs] = s;
  }
  return floored;
}

inline GMMModel fit_gmm_once(const std::vector<Point>& pts, int k, std::uint64_t seed, const GMMOptions& opts) {
  std::mt19937_64 rng(seed);
  GMMModel m;
  m.k = k;
  m.means = kmeanspp(pts, k, rng);

  // Initial shapes from the hard nearest-center partition.
  Eigen::Matrix2d global = Eigen::Matrix2d::Zero();
  {
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& p : pts) mean += Eigen::Vector2d(p.x, p.y);
    mean /= static_cast<double>(pts.size());
    for (const auto& p : pts) {
      Eigen::Vector2d d(p.x - mean.x(), p.y - mean.y());
      global += d * d.transpose();
    }
    global /= static_cast<double>(pts.size());
    floor_covariance(global, opts.covariance_floor);
  }
  std::vector<int> owner(pts.size());
  std::vector<double> count(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      const double d = (Eigen::Vector2d(pts[i].x, pts[i].y) - m.means[static_cast<std::size_t>(c)]).squaredNorm();
      if (d < best) {
        best = d;
        owner[i] = c;
      }
    }
    count[static_cast<std::size_t>(owner[i])] += 1.0;
  }
  m.covariances.assign(static_cast<std::size_t>(k), Eigen::Matrix2d::Zero());
  m.weights.assign(static_cast<std::size_t>(k), 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = static_cast<std::size_t>(owner[i]);
    Eigen::Vector2d d(pts[i].x - m.means[c].x(), pts[i].y - m.means[c].y());
    m.covariances[c] += d * d.transpose();
  }
  for (std::size_t c = 0; c < static_cast<std::size_t>(k); ++c) {
    if (count[c] >= 2) {
      m.covariances[c] /= count[c];
    } else {
      m.covariances[c] = global;
    }
    floor_covariance(m.covariances[c], opts.covariance_floor);
    m.weights[c] = std::max(count[c], 1.0);
  }
  double wsum = 0;
  for (double w : m.weights) wsum += w;
  for (double& w : m.weights) w /= wsum;

  Eigen::MatrixXd resp;
  double ll = e_step(m, pts, resp);
  m.log_likelihood_history.push_back(ll);
  bool warned = false;
  for (m.iterations = 1; m.iterations <= opts.max_iter; ++m.iterations) {
    if (m_step(m, pts, resp, opts.covariance_floor) && !warned) {
      m.warnings.push_back("degenerate component: covariance floored at " + format_double(opts.covariance_floor));
      warned = true;
    }
    const double next = e_step(m, pts, resp);
    m.log_likelihood_history.push_back(next);
    const double change = std::abs(next - ll) / std::max(std::abs(ll), 1e-300);
    ll = next;
    if (change < opts.tolerance) {
      m.converged = true;
      break;
    }
  }
  m.iterations = std::min(m.iterations, opts.max_iter);
  return m;
}

}  // namespace detail

inline GMMModel fit_gmm(const std::vector<Point>& points, int k, std::uint64_t seed, const GMMOptions& opts = {}) {
  if (k < 1) throw ValidationError("GMM needs K >= 1");
  if (static_cast<std::size_t>(k) > points.size()) throw ValidationError("GMM needs at least K points");
  GMMModel best;
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    GMMModel m = detail::fit_gmm_once(points, k, mix_seed(seed, static_cast<std::uint64_t>(r)), opts);
    if (r == 0 || m.log_likelihood() > best.log_likelihood()) best = std::move(m);
  }
  return best;
}

// K with the smallest Bayesian information criterion over [k_min, k_max].
inline GMMModel fit_gmm_bic(const std::vector<Point>& points, int k_min, int k_max, std::uint64_t seed,
                            const GMMOptions& opts = {}) {
  if (k_min < 1 || k_max < k_min) throw ValidationError("invalid GMM K range");
  GMMModel best;
  double best_bic = std::numeric_limits<double>::infinity();
  for (int k = k_min; k <= k_max && static_cast<std::size_t>(k) <= points.size(); ++k) {
    GMMModel m = fit_gmm(points, k, seed, opts);
    const double b = m.bic(points.size());
    if (b < best_bic) {
      best_bic = b;
      best = std::move(m);
    }
  }
  if (best.k == 0) throw ValidationError("GMM K range exceeds the number of points");
  return best;
}

}  // namespace trajcal
