#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "mona/ops.hpp"

namespace mona {

/// Channel softmax of a [C,H,W] logit map (value only).
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  const int c = logits.dim(0);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
  Tensor<T> p(logits.shape());
  for (std::size_t i = 0; i < hw; ++i) {
    T mx = logits[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits[k * hw + i]);
    T s = 0;
    for (int k = 0; k < c; ++k) {
      const T e = std::exp(logits[k * hw + i] - mx);
      p[k * hw + i] = e;
      s += e;
    }
    for (int k = 0; k < c; ++k) p[k * hw + i] /= s;
  }
  return p;
}

template <class T>
Tensor<T> log_softmax_channels(const Tensor<T>& logits) {
  const int c = logits.dim(0);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
  Tensor<T> lp(logits.shape());
  for (std::size_t i = 0; i < hw; ++i) {
    T mx = logits[i];
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits[k * hw + i]);
    T s = 0;
    for (int k = 0; k < c; ++k) s += std::exp(logits[k * hw + i] - mx);
    const T lse = mx + std::log(s);
    for (int k = 0; k < c; ++k) lp[k * hw + i] = logits[k * hw + i] - lse;
  }
  return lp;
}

/// Mean pixelwise cross-entropy over pixels with mask != 0 and label >= 0.
/// Returns a constant zero when no pixel qualifies.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels,
                             std::span<const unsigned char> mask = {}) {
  const int c = logits.dim(0);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
  if (labels.size() != hw || (!mask.empty() && mask.size() != hw)) {
    throw std::invalid_argument("softmax_cross_entropy: label/mask size mismatch");
  }
  const auto& z = logits.value();
  Tensor<T> lp = log_softmax_channels(z);
  T total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    if ((!mask.empty() && !mask[i]) || labels[i] < 0) continue;
    if (labels[i] >= c) throw std::out_of_range("softmax_cross_entropy: label >= classes");
    total -= lp[labels[i] * hw + i];
    ++count;
  }
  if (count == 0) return Var<T>::constant(Tensor<T>({1}, T(0)));
  const T inv = T(1) / static_cast<T>(count);
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<unsigned char> msk(mask.begin(), mask.end());
  return make_op(Tensor<T>({1}, total * inv), {logits},
                 [logits, lp = std::move(lp), lab = std::move(lab), msk = std::move(msk), c, hw,
                  inv](const Tensor<T>& g) {
                   auto& d = logits.grad_buffer();
                   const T s = g[0] * inv;
                   for (std::size_t i = 0; i < hw; ++i) {
                     if ((!msk.empty() && !msk[i]) || lab[i] < 0) continue;
                     for (int k = 0; k < c; ++k) {
                       d[k * hw + i] += s * (std::exp(lp[k * hw + i]) - (k == lab[i] ? T(1) : T(0)));
                     }
                   }
                 });
}

/// Soft Dice loss averaged over all channels:
/// mean_c [1 - (2 sum p g + eps) / (sum p + sum g + eps)]. Pixels labelled < 0
/// are ignored.
template <class T>
Var<T> soft_dice_loss(const Var<T>& logits, std::span<const int> labels, T eps = T(1e-5)) {
  const int c = logits.dim(0);
  const std::size_t hw = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
  if (labels.size() != hw) throw std::invalid_argument("soft_dice_loss: label size mismatch");
  Tensor<T> p = softmax_channels(logits.value());
  std::vector<T> inter(c, T(0)), denom(c, T(0));
  for (int k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      if (labels[i] < 0) continue;
      const T g = labels[i] == k ? T(1) : T(0);
      inter[k] += p[k * hw + i] * g;
      denom[k] += p[k * hw + i] + g;
    }
  }
  T loss = 0;
  for (int k = 0; k < c; ++k) loss += T(1) - (T(2) * inter[k] + eps) / (denom[k] + eps);
  loss /= static_cast<T>(c);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op(Tensor<T>({1}, loss), {logits},
                 [logits, p = std::move(p), lab = std::move(lab), inter = std::move(inter),
                  denom = std::move(denom), c, hw, eps](const Tensor<T>& g) {
                   auto& d = logits.grad_buffer();
                   const T s = g[0] / static_cast<T>(c);
                   std::vector<T> dp(c);
                   for (std::size_t i = 0; i < hw; ++i) {
                     if (lab[i] < 0) continue;
                     T dot = 0;
                     for (int k = 0; k < c; ++k) {
                       const T gk = lab[i] == k ? T(1) : T(0);
                       const T den = denom[k] + eps;
                       dp[k] = -s * (T(2) * gk * den - (T(2) * inter[k] + eps)) / (den * den);
                       dot += dp[k] * p[k * hw + i];
                     }
                     for (int k = 0; k < c; ++k) d[k * hw + i] += p[k * hw + i] * (dp[k] - dot);
                   }
                 });
}

/// Mean over rows of KL(exp(s) || exp(t)) where s, t are row log-probabilities.
/// The target t is constant.
template <class T>
Var<T> kl_divergence_rows(const Var<T>& s, const Tensor<T>& t) {
  require_same_shape(s.value(), t, "kl_divergence_rows");
  const int n = s.dim(0), k = s.dim(1);
  T total = 0;
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < k; ++j) {
      const T lp = s.value().at(r, j);
      total += std::exp(lp) * (lp - t.at(r, j));
    }
  const T inv = T(1) / static_cast<T>(n);
  return make_op(Tensor<T>({1}, total * inv), {s}, [s, t, n, k, inv](const Tensor<T>& g) {
    auto& d = s.grad_buffer();
    for (int r = 0; r < n; ++r)
      for (int j = 0; j < k; ++j) {
        const T lp = s.value().at(r, j);
        d.at(r, j) += g[0] * inv * std::exp(lp) * (lp - t.at(r, j) + T(1));
      }
  });
}

/// InfoNCE with one shared positive key and negative set per query row:
/// mean_q -log( e^{q.k+/tau} / (e^{q.k+/tau} + sum_n e^{q.k-_n/tau}) ).
/// Keys are constants.
template <class T>
Var<T> info_nce(const Var<T>& queries, const Tensor<T>& positive, const Tensor<T>& negatives,
                T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("info_nce: temperature must be > 0");
  const int n = queries.dim(0), d = queries.dim(1);
  if (positive.size() != static_cast<std::size_t>(d) || negatives.rank() != 2 ||
      negatives.dim(1) != d || negatives.dim(0) < 1) {
    throw std::invalid_argument("info_nce: key shapes incompatible with queries");
  }
  const int m = negatives.dim(0);
  // Keys stacked as [positive; negatives].
  Tensor<T> keys({m + 1, d});
  std::copy(positive.data(), positive.data() + d, keys.data());
  std::copy(negatives.data(), negatives.data() + negatives.size(), keys.data() + d);
  Tensor<T> probs({n, m + 1});
  {
    ConstMatMap<T> Q(queries.value().data(), n, d);
    ConstMatMap<T> K(keys.data(), m + 1, d);
    MatMap<T>(probs.data(), n, m + 1).noalias() = (Q * K.transpose()) / tau;
  }
  T total = 0;
  for (int r = 0; r < n; ++r) {
    auto row = probs.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T s = 0;
    for (auto& v : row) s += std::exp(v - mx);
    const T lse = mx + std::log(s);
    total += lse - row[0];
    for (auto& v : row) v = std::exp(v - lse);
  }
  const T inv = T(1) / static_cast<T>(n);
  return make_op(Tensor<T>({1}, total * inv), {queries},
                 [queries, keys = std::move(keys), probs = std::move(probs), n, d, m, tau,
                  inv](const Tensor<T>& g) {
                   Tensor<T> coef = probs;
                   for (int r = 0; r < n; ++r) coef.at(r, 0) -= T(1);
                   ConstMatMap<T> P(coef.data(), n, m + 1);
                   ConstMatMap<T> K(keys.data(), m + 1, d);
                   MatMap<T>(queries.grad_buffer().data(), n, d).noalias() +=
                       (g[0] * inv / tau) * (P * K);
                 });
}

/// Pixel-mean of KL(p||q) + KL(q||p) with p = softmax(a), q = softmax(b) over
/// channels. Pixels with mask == 0 are skipped.
template <class T>
Var<T> symmetric_kl_maps(const Var<T>& a, const Var<T>& b, std::span<const unsigned char> mask = {}) {
  require_same_shape(a.value(), b.value(), "symmetric_kl_maps");
  const int c = a.dim(0);
  const std::size_t hw = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
  if (!mask.empty() && mask.size() != hw) throw std::invalid_argument("symmetric_kl_maps: mask size");
  Tensor<T> la = log_softmax_channels(a.value());
  Tensor<T> lb = log_softmax_channels(b.value());
  T total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    for (int k = 0; k < c; ++k) {
      const std::size_t j = k * hw + i;
      total += (std::exp(la[j]) - std::exp(lb[j])) * (la[j] - lb[j]);
    }
    ++count;
  }
  if (count == 0) return Var<T>::constant(Tensor<T>({1}, T(0)));
  const T inv = T(1) / static_cast<T>(count);
  std::vector<unsigned char> msk(mask.begin(), mask.end());
  return make_op(Tensor<T>({1}, total * inv), {a, b},
                 [a, b, la = std::move(la), lb = std::move(lb), msk = std::move(msk), c, hw,
                  inv](const Tensor<T>& g) {
                   const T s = g[0] * inv;
                   for (std::size_t i = 0; i < hw; ++i) {
                     if (!msk.empty() && !msk[i]) continue;
                     T kl_pq = 0, kl_qp = 0;
                     for (int k = 0; k < c; ++k) {
                       const std::size_t j = k * hw + i;
                       kl_pq += std::exp(la[j]) * (la[j] - lb[j]);
                       kl_qp += std::exp(lb[j]) * (lb[j] - la[j]);
                     }
                     for (int k = 0; k < c; ++k) {
                       const std::size_t j = k * hw + i;
                       const T p = std::exp(la[j]), q = std::exp(lb[j]);
                       if (a.requires_grad())
                         a.grad_buffer()[j] += s * (p * (la[j] - lb[j] - kl_pq) + p - q);
                       if (b.requires_grad())
                         b.grad_buffer()[j] += s * (q * (lb[j] - la[j] - kl_qp) + q - p);
                     }
                   }
                 });
}

/// Indices of the k largest dot products of `query` against bank rows,
/// ties broken by lower index.
template <class T>
std::vector<int> nearest_neighbors(std::span<const T> query, const Tensor<T>& bank, int k) {
  const int b = bank.dim(0), d = bank.dim(1);
  std::vector<std::pair<T, int>> sims(b);
  for (int j = 0; j < b; ++j) {
    T s = 0;
    for (int t = 0; t < d; ++t) s += query[t] * bank.at(j, t);
    sims[j] = {s, j};
  }
  k = std::min(k, b);
  std::partial_sort(sims.begin(), sims.begin() + k, sims.end(), [](const auto& x, const auto& y) {
    return x.first > y.first || (x.first == y.first && x.second < y.second);
  });
  std::vector<int> out(k);
  for (int i = 0; i < k; ++i) out[i] = sims[i].second;
  return out;
}

/// mean over rows and their k nearest bank entries of (1 - r.b). Rows and
/// bank entries are expected unit-norm; the bank is constant.
template <class T>
Var<T> nearest_neighbor_cosine_loss(const Var<T>& reps, const Tensor<T>& bank, int k) {
  if (bank.rank() != 2 || bank.dim(0) == 0) {
    throw std::invalid_argument("nearest_neighbor_loss: empty bank");
  }
  if (k < 1) throw std::invalid_argument("nearest_neighbor_loss: K must be >= 1");
  const int n = reps.dim(0), d = reps.dim(1);
  if (bank.dim(1) != d) throw std::invalid_argument("nearest_neighbor_loss: width mismatch");
  const int kk = std::min(k, bank.dim(0));
  // Per row, the sum of its neighbours: the loss gradient is -(1/(n kk)) * that sum.
  Tensor<T> neighbor_sum({n, d});
  T total = 0;
  for (int r = 0; r < n; ++r) {
    auto q = reps.value().row(r);
    for (int j : nearest_neighbors<T>(q, bank, kk)) {
      T dot = 0;
      for (int t = 0; t < d; ++t) {
        dot += q[t] * bank.at(j, t);
        neighbor_sum.at(r, t) += bank.at(j, t);
      }
      total += T(1) - dot;
    }
  }
  const T inv = T(1) / static_cast<T>(n * kk);
  return make_op(Tensor<T>({1}, total * inv), {reps},
                 [reps, neighbor_sum = std::move(neighbor_sum), inv](const Tensor<T>& g) {
                   auto& dr = reps.grad_buffer();
                   for (std::size_t i = 0; i < dr.size(); ++i) dr[i] -= g[0] * inv * neighbor_sum[i];
                 });
}

}  // namespace mona
