#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/rng.hpp"

namespace mona::theory {

/// Finite-basis function class: f = sum_j c_j phi_j with |c_j| <= C_j and
/// sup|phi_j| <= V_j, observed on n samples.
struct BasisSpec {
  std::vector<double> C;
  std::vector<double> V;
  int n = 1;
};

/// (sum_j C_j) * max_j V_j / sqrt(n); constants and log factors set to 1.
inline double rademacher_bound(const BasisSpec& s) {
  if (s.C.empty() || s.C.size() != s.V.size()) throw std::invalid_argument("rademacher_bound: C and V must have equal length m >= 1");
  if (s.n < 1) throw std::invalid_argument("rademacher_bound: n must be >= 1");
  for (double c : s.C)
    if (!(c > 0)) throw std::invalid_argument("rademacher_bound: C entries must be positive");
  for (double v : s.V)
    if (!(v > 0)) throw std::invalid_argument("rademacher_bound: V entries must be positive");
  const double sum_c = std::accumulate(s.C.begin(), s.C.end(), 0.0);
  const double max_v = *std::max_element(s.V.begin(), s.V.end());
  return sum_c * max_v / std::sqrt(static_cast<double>(s.n));
}

struct DistillProblem {
  std::vector<double> x;   // 1-D inputs
  std::vector<double> y0;  // initial targets
  double width = 0.07;     // Gaussian kernel width
  double epsilon = 1e-3;   // training-MSE budget per step
  int steps = 10;
};

/// Jittered-grid instance: x_i = (i + U(-0.3, 0.3)) / n, smooth targets plus
/// noise, epsilon = eps_rel * |Y0|^2 / n.
inline DistillProblem make_problem(int n, std::uint64_t seed, int steps = 10, double width = 0.07,
                                   double eps_rel = 1e-3, double noise = 0.1) {
  if (n < 2) throw std::invalid_argument("make_problem: n must be >= 2");
  Rng rng(seed);
  DistillProblem p;
  p.width = width;
  p.steps = steps;
  double sq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = (i + rng.uniform(-0.3, 0.3)) / n;
    const double y = std::sin(2 * M_PI * x) + 0.3 * std::sin(10 * M_PI * x) + noise * rng.normal();
    p.x.push_back(x);
    p.y0.push_back(y);
    sq += y * y;
  }
  p.epsilon = eps_rel * sq / n;
  return p;
}

inline Eigen::MatrixXd gram_matrix(const std::vector<double>& x, double width) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd K(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) K(i, j) = std::exp(-(x[i] - x[j]) * (x[i] - x[j]) / (2 * width * width));
  return K;
}

struct Eigenbasis {
  Eigen::VectorXd d;  // eigenvalues, descending
  Eigen::MatrixXd V;  // matching orthonormal eigenvectors in columns
};

inline Eigenbasis eigenbasis(const Eigen::MatrixXd& K) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
  if (es.info() != Eigen::Success) throw std::runtime_error("eigenbasis: decomposition failed");
  return Eigenbasis{es.eigenvalues().reverse(), es.eigenvectors().rowwise().reverse()};
}

struct DistillStep {
  double eta = 0;                  // ridge parameter (infinite when collapsed)
  double train_mse = 0;
  std::vector<double> alpha_coef;  // V^T (K + eta I)^-1 y_t
  std::vector<double> func_coef;   // V^T f_t = D * alpha_coef
  bool collapsed = false;          // |y_t|^2 / n < 0.9 eps: solution is zero
};

struct DistillHistory {
  std::vector<double> eigenvalues;  // descending
  std::vector<DistillStep> steps;
};

namespace detail {

inline double ridge_mse(const Eigen::VectorXd& d, const Eigen::VectorXd& b, double eta) {
  double s = 0;
  for (int i = 0; i < d.size(); ++i) {
    const double r = eta / (d[i] + eta);
    s += r * r * b[i] * b[i];
  }
  return s / static_cast<double>(d.size());
}

}  // namespace detail

/// Iterated kernel ridge regression: each step fits the current targets with
/// the ridge parameter that puts the training MSE in [0.9 eps, eps] (bisection
/// on log eta), then the fitted values become the next targets.
inline DistillHistory self_distill_simulate(const DistillProblem& p) {
  const int n = static_cast<int>(p.x.size());
  if (n < 1 || p.y0.size() != p.x.size()) throw std::invalid_argument("self_distill_simulate: x and y0 must match");
  if (p.steps < 1 || !(p.epsilon > 0) || !(p.width > 0)) throw std::invalid_argument("self_distill_simulate: bad parameters");
  const auto K = gram_matrix(p.x, p.width);
  const auto eb = eigenbasis(K);
  if (eb.d.minCoeff() <= 1e-10) throw std::runtime_error("self_distill_simulate: singular Gram matrix (min eigenvalue <= 1e-10)");

  DistillHistory h;
  h.eigenvalues.assign(eb.d.data(), eb.d.data() + n);
  Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(p.y0.data(), n);
  const double eta_lo = 1e-14, eta_hi = 1e14;
  for (int t = 0; t < p.steps; ++t) {
    const Eigen::VectorXd b = eb.V.transpose() * y;
    DistillStep st;
    st.alpha_coef.assign(n, 0.0);
    st.func_coef.assign(n, 0.0);
    if (y.squaredNorm() == 0.0) {
      h.steps.push_back(st);
      continue;
    }
    if (y.squaredNorm() / n < 0.9 * p.epsilon) {
      st.collapsed = true;
      st.eta = INFINITY;
      st.train_mse = y.squaredNorm() / n;
      h.steps.push_back(st);
      y.setZero();
      continue;
    }
    if (detail::ridge_mse(eb.d, b, eta_lo) > p.epsilon) {
      throw std::runtime_error("self_distill_simulate: infeasible, no ridge parameter reaches training MSE <= eps");
    }
    double lo = std::log(eta_lo), hi = std::log(eta_hi), eta = 0, mse = 0;
    for (int it = 0; it < 400; ++it) {
      const double mid = 0.5 * (lo + hi);
      eta = std::exp(mid);
      mse = detail::ridge_mse(eb.d, b, eta);
      if (mse > p.epsilon) hi = mid;
      else if (mse < 0.9 * p.epsilon) lo = mid;
      else break;
    }
    st.eta = eta;
    st.train_mse = mse;
    for (int i = 0; i < n; ++i) {
      st.alpha_coef[i] = b[i] / (eb.d[i] + eta);
      st.func_coef[i] = eb.d[i] * st.alpha_coef[i];
    }
    h.steps.push_back(st);
    y = eb.V * Eigen::Map<const Eigen::VectorXd>(st.func_coef.data(), n);
  }
  return h;
}

/// (sum |a|)^2 / (n sum a^2); 1 for a flat vector, 1/n for a one-hot one.
/// NaN for the zero vector.
inline double participation_ratio(const std::vector<double>& a) {
  double s1 = 0, s2 = 0;
  for (double v : a) {
    s1 += std::abs(v);
    s2 += v * v;
  }
  if (s2 == 0) return NAN;
  return s1 * s1 / (static_cast<double>(a.size()) * s2);
}

struct SparsificationReport {
  std::vector<double> participation;  // per step, function coefficients
  std::vector<double> alpha_participation;
  std::vector<double> top_share;      // |c_1| / sum |c| per step
  std::vector<double> max_over_median;
  std::vector<std::vector<double>> dominance;  // [step][pair] |c_j| / |c_l|, j < l
  std::vector<std::pair<int, int>> pairs;
  double coefficient_norm_first = 0, coefficient_norm_last = 0;
  bool participation_nonincreasing = true;
  bool top_share_nondecreasing = true;
  bool dominance_growing = true;  // every pair ratio nondecreasing over steps
};

/// `pairs` index eigen-directions in descending-eigenvalue order; empty means
/// all (j, l) with j < l.
inline SparsificationReport sparsification_report(const DistillHistory& h, double tol = 1e-8,
                                                  std::vector<std::pair<int, int>> pairs = {}) {
  if (h.steps.size() < 2) throw std::invalid_argument("sparsification_report: need at least 2 steps");
  const int n = static_cast<int>(h.eigenvalues.size());
  if (pairs.empty())
    for (int j = 0; j < n; ++j)
      for (int l = j + 1; l < n; ++l) pairs.emplace_back(j, l);
  SparsificationReport r;
  r.pairs = pairs;
  for (const auto& st : h.steps) {
    const auto& c = st.func_coef;
    r.participation.push_back(participation_ratio(c));
    r.alpha_participation.push_back(participation_ratio(st.alpha_coef));
    double s = 0;
    std::vector<double> mags(n);
    for (int i = 0; i < n; ++i) s += mags[i] = std::abs(c[i]);
    r.top_share.push_back(s > 0 ? mags[0] / s : NAN);
    std::vector<double> sorted = mags;
    std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
    const double med = sorted[n / 2];
    r.max_over_median.push_back(med > 0 ? *std::max_element(mags.begin(), mags.end()) / med : INFINITY);
    std::vector<double> dom;
    for (auto [j, l] : pairs) dom.push_back(mags[l] > 0 ? mags[j] / mags[l] : INFINITY);
    r.dominance.push_back(std::move(dom));
  }
  auto norm = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  r.coefficient_norm_first = norm(h.steps.front().func_coef);
  r.coefficient_norm_last = norm(h.steps.back().func_coef);
  for (std::size_t t = 1; t < h.steps.size(); ++t) {
    if (r.participation[t] > r.participation[t - 1] + tol) r.participation_nonincreasing = false;
    if (r.top_share[t] < r.top_share[t - 1] - tol) r.top_share_nondecreasing = false;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const double a = r.dominance[t - 1][k], b = r.dominance[t][k];
      if (std::isfinite(a) && std::isfinite(b) && b < a * (1 - tol)) r.dominance_growing = false;
    }
  }
  return r;
}

}  // namespace mona::theory
