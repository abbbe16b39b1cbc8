#pragma once

// Brute-force reference implementations. None of these call into the
// library code they are compared against.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <vector>

namespace mona::oracle {

/// -log( e^{q.k+/tau} / (e^{q.k+/tau} + sum_j e^{q.k_j/tau}) ), summed term by term.
inline double contrastive_term(const std::vector<double>& q, const std::vector<double>& kpos,
                               const std::vector<std::vector<double>>& negs, double tau) {
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  const double pos = std::exp(dot(q, kpos) / tau);
  double den = pos;
  for (const auto& n : negs) den += std::exp(dot(q, n) / tau);
  return -std::log(pos / den);
}

inline double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (auto& v : p) v /= s;
  return p;
}

/// Masks as row-major 0/1 vectors of an h x w grid.
inline double dice(const std::vector<int>& p, const std::vector<int>& g) {
  int inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] && g[i];
    sp += p[i];
    sg += g[i];
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * inter / (sp + sg);
}

/// Boundary = foreground cells with a 4-neighbour that is background or off-grid.
inline std::vector<std::pair<int, int>> boundary(const std::vector<int>& m, int h, int w) {
  std::vector<std::pair<int, int>> b;
  const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      for (int k = 0; k < 4; ++k) {
        const int yy = y + dy[k], xx = x + dx[k];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w || !m[yy * w + xx]) {
          b.emplace_back(y, x);
          break;
        }
      }
    }
  return b;
}

inline double asd(const std::vector<int>& p, const std::vector<int>& g, int h, int w, double spacing = 1.0) {
  const auto bp = boundary(p, h, w), bg = boundary(g, h, w);
  if (bp.empty() || bg.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0;
  auto nearest = [&](std::pair<int, int> a, const std::vector<std::pair<int, int>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (auto b : set) {
      const double dy = (a.first - b.first) * spacing, dx = (a.second - b.second) * spacing;
      best = std::min(best, std::sqrt(dy * dy + dx * dx));
    }
    return best;
  };
  double back = 0;
  for (auto a : bp) total += nearest(a, bg);
  for (auto b : bg) back += nearest(b, bp);
  return (total + back) / static_cast<double>(bp.size() + bg.size());
}

/// Plain per-class FIFO with explicit front erasure.
struct ReferenceFifo {
  int capacity;
  std::vector<std::vector<std::vector<double>>> buf;
  ReferenceFifo(int classes, int cap) : capacity(cap), buf(classes) {}
  void push(int c, std::vector<double> v) {
    buf[c].push_back(std::move(v));
    if (static_cast<int>(buf[c].size()) > capacity) buf[c].erase(buf[c].begin());
  }
};

/// Ridge coefficients V^T (K + eta I)^{-1} y from a direct LU solve.
inline Eigen::VectorXd ridge_alpha_eigen(const Eigen::MatrixXd& K, const Eigen::VectorXd& y, double eta,
                                         const Eigen::MatrixXd& V) {
  const Eigen::MatrixXd A = K + eta * Eigen::MatrixXd::Identity(K.rows(), K.cols());
  const Eigen::VectorXd alpha = A.partialPivLu().solve(y);
  return V.transpose() * alpha;
}

}  // namespace mona::oracle
