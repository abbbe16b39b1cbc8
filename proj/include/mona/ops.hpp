#pragma once

#include <Eigen/Core>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/autograd.hpp"

namespace mona {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <class T>
void accumulate(const Var<T>& v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  auto& buf = v.grad_buffer();
  const T* src = g.data();
  T* dst = buf.data();
  for (std::size_t i = 0, n = buf.size(); i < n; ++i) dst[i] += src[i];
}

template <class T>
void expect_rank(const Var<T>& v, std::size_t r, const char* op) {
  if (v.value().rank() != r) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                ", got " + Tensor<T>::shape_string(v.shape()));
  }
}

// col layout: [(c*k + ky)*k + kx, y*W + x]
template <class T>
void im2col(const T* x, int cin, int h, int w, int k, T* col) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < cin; ++c) {
    const T* xc = x + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          T* out = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, T(0));
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(sy) * w + dx;
          for (int xx = 0; xx < x_lo; ++xx) out[xx] = T(0);
          for (int xx = x_lo; xx < x_hi; ++xx) out[xx] = src[xx];
          for (int xx = std::max(x_hi, x_lo); xx < w; ++xx) out[xx] = T(0);
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, int cin, int h, int w, int k, T* dx_out) {
  const int pad = k / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < cin; ++c) {
    T* xc = dx_out + c * hw;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c * k + ky) * k + kx) * hw;
        const int dx = kx - pad;
        const int x_lo = std::max(0, -dx);
        const int x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          const T* in = row + static_cast<std::size_t>(y) * w;
          T* dst = xc + static_cast<std::size_t>(sy) * w + dx;
          for (int xx = x_lo; xx < x_hi; ++xx) dst[xx] += in[xx];
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    detail::accumulate(a, g);
    detail::accumulate(b, g);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    detail::accumulate(a, g);
    if (b.requires_grad()) {
      auto& buf = b.grad_buffer();
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] -= g[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_op(std::move(out), {a}, [a, s](const Tensor<T>& g) {
    auto& buf = a.grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += s * g[i];
  });
}

/// Sum of a list of scalars (or same-shape tensors).
template <class T>
Var<T> add_n(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw std::invalid_argument("add_n: empty");
  Tensor<T> out = terms.front().value();
  for (std::size_t t = 1; t < terms.size(); ++t) {
    require_same_shape(out, terms[t].value(), "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += terms[t].value()[i];
  }
  return make_op(std::move(out), terms, [terms](const Tensor<T>& g) {
    for (const auto& t : terms) detail::accumulate(t, g);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return make_op(Tensor<T>({1}, s), {a}, [a](const Tensor<T>& g) {
    auto& buf = a.grad_buffer();
    for (auto& v : buf.values()) v += g[0];
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <class T>
Var<T> silu(const Var<T>& a) {
  const auto& x = a.value();
  Tensor<T> out(x.shape());
  Tensor<T> sig(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    sig[i] = s;
    out[i] = x[i] * s;
  }
  return make_op(std::move(out), {a}, [a, sig = std::move(sig)](const Tensor<T>& g) {
    const auto& x = a.value();
    auto& buf = a.grad_buffer();
    for (std::size_t i = 0; i < buf.size(); ++i) {
      buf[i] += g[i] * sig[i] * (T(1) + x[i] * (T(1) - sig[i]));
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and resolution changes on [C,H,W] maps

/// Same-padded stride-1 convolution. w: [Cout,Cin,k,k] (k odd), b: [Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::expect_rank(x, 3, "conv2d");
  detail::expect_rank(w, 4, "conv2d");
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k || k % 2 == 0 || b.size() != static_cast<std::size_t>(cout)) {
    throw std::invalid_argument("conv2d: weight " + Tensor<T>::shape_string(w.shape()) +
                                " incompatible with input " +
                                Tensor<T>::shape_string(x.shape()));
  }
  const int hw = h * wd;
  const int rows = cin * k * k;

  Tensor<T> col;
  const T* col_ptr = x.value().data();
  if (k != 1) {
    col = Tensor<T>({rows, hw});
    detail::im2col(x.value().data(), cin, h, wd, k, col.data());
    col_ptr = col.data();
  }

  Tensor<T> out({cout, h, wd});
  {
    ConstMatMap<T> W(w.value().data(), cout, rows);
    ConstMatMap<T> C(col_ptr, rows, hw);
    MatMap<T> O(out.data(), cout, hw);
    O.noalias() = W * C;
    for (int o = 0; o < cout; ++o) O.row(o).array() += b.value()[o];
  }

  return make_op(std::move(out), {x, w, b},
                 [x, w, b, col = std::move(col), cin, h, wd, cout, k, rows, hw](const Tensor<T>& g) {
                   ConstMatMap<T> G(g.data(), cout, hw);
                   const T* col_ptr = k == 1 ? x.value().data() : col.data();
                   ConstMatMap<T> C(col_ptr, rows, hw);
                   if (w.requires_grad()) {
                     MatMap<T> dW(w.grad_buffer().data(), cout, rows);
                     dW.noalias() += G * C.transpose();
                   }
                   if (b.requires_grad()) {
                     auto& db = b.grad_buffer();
                     for (int o = 0; o < cout; ++o) db[o] += G.row(o).sum();
                   }
                   if (x.requires_grad()) {
                     ConstMatMap<T> W(w.value().data(), cout, rows);
                     if (k == 1) {
                       MatMap<T> dX(x.grad_buffer().data(), rows, hw);
                       dX.noalias() += W.transpose() * G;
                     } else {
                       RowMat<T> dcol = W.transpose() * G;
                       detail::col2im(dcol.data(), cin, h, wd, k, x.grad_buffer().data());
                     }
                   }
                 });
}

template <class T>
Var<T> avg_pool2(const Var<T>& x) {
  detail::expect_rank(x, 3, "avg_pool2");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
  const int oh = h / 2, ow = w / 2;
  Tensor<T> out({c, oh, ow});
  const auto& in = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out.at(ch, y, xx) = T(0.25) * (in.at(ch, 2 * y, 2 * xx) + in.at(ch, 2 * y, 2 * xx + 1) +
                                       in.at(ch, 2 * y + 1, 2 * xx) +
                                       in.at(ch, 2 * y + 1, 2 * xx + 1));
  return make_op(std::move(out), {x}, [x, c, oh, ow](const Tensor<T>& g) {
    auto& d = x.grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T v = T(0.25) * g.at(ch, y, xx);
          d.at(ch, 2 * y, 2 * xx) += v;
          d.at(ch, 2 * y, 2 * xx + 1) += v;
          d.at(ch, 2 * y + 1, 2 * xx) += v;
          d.at(ch, 2 * y + 1, 2 * xx + 1) += v;
        }
  });
}

/// Nearest-neighbour 2x upsampling.
template <class T>
Var<T> upsample2(const Var<T>& x) {
  detail::expect_rank(x, 3, "upsample2");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor<T> out({c, 2 * h, 2 * w});
  const auto& in = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = in.at(ch, y / 2, xx / 2);
  return make_op(std::move(out), {x}, [x, c, h, w](const Tensor<T>& g) {
    auto& d = x.grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx) d.at(ch, y / 2, xx / 2) += g.at(ch, y, xx);
  });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::expect_rank(a, 3, "concat_channels");
  detail::expect_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) {
    throw std::invalid_argument("concat_channels: spatial mismatch");
  }
  Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.value().data(), a.value().data() + a.size(), out.data());
  std::copy(b.value().data(), b.value().data() + b.size(), out.data() + a.size());
  return make_op(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) {
      auto& d = a.grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& d = b.grad_buffer();
      const std::size_t off = a.size();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[off + i];
    }
  });
}

/// [C,H,W] -> [1,C] spatial mean.
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::expect_rank(x, 3, "global_avg_pool");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor<T> out({1, c});
  for (int ch = 0; ch < c; ++ch) {
    T s = 0;
    const T* p = x.value().data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) s += p[i];
    out[ch] = s / static_cast<T>(hw);
  }
  return make_op(std::move(out), {x}, [x, c, hw](const Tensor<T>& g) {
    auto& d = x.grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      const T v = g[ch] / static_cast<T>(hw);
      T* p = d.data() + ch * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += v;
    }
  });
}

template <class T>
Var<T> crop(const Var<T>& x, int y0, int x0, int h, int w) {
  detail::expect_rank(x, 3, "crop");
  const int c = x.dim(0);
  if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > x.dim(1) || x0 + w > x.dim(2)) {
    throw std::out_of_range("crop: window (" + std::to_string(y0) + "," + std::to_string(x0) +
                            "," + std::to_string(h) + "," + std::to_string(w) +
                            ") outside map " + Tensor<T>::shape_string(x.shape()));
  }
  Tensor<T> out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) out.at(ch, y, xx) = x.value().at(ch, y0 + y, x0 + xx);
  return make_op(std::move(out), {x}, [x, c, y0, x0, h, w](const Tensor<T>& g) {
    auto& d = x.grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) d.at(ch, y0 + y, x0 + xx) += g.at(ch, y, xx);
  });
}

// ---------------------------------------------------------------------------
// Row-matrix ops ([N,D])

/// x: [N,in], w: [out,in], b: [out] -> [N,out]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  detail::expect_rank(x, 2, "linear");
  const int n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in || b.size() != static_cast<std::size_t>(out_dim)) {
    throw std::invalid_argument("linear: weight " + Tensor<T>::shape_string(w.shape()) +
                                " incompatible with input " +
                                Tensor<T>::shape_string(x.shape()));
  }
  Tensor<T> out({n, out_dim});
  {
    ConstMatMap<T> X(x.value().data(), n, in);
    ConstMatMap<T> W(w.value().data(), out_dim, in);
    MatMap<T> O(out.data(), n, out_dim);
    O.noalias() = X * W.transpose();
    for (int r = 0; r < n; ++r)
      for (int o = 0; o < out_dim; ++o) O(r, o) += b.value()[o];
  }
  return make_op(std::move(out), {x, w, b}, [x, w, b, n, in, out_dim](const Tensor<T>& g) {
    ConstMatMap<T> G(g.data(), n, out_dim);
    if (w.requires_grad()) {
      ConstMatMap<T> X(x.value().data(), n, in);
      MatMap<T> dW(w.grad_buffer().data(), out_dim, in);
      dW.noalias() += G.transpose() * X;
    }
    if (b.requires_grad()) {
      auto& db = b.grad_buffer();
      for (int o = 0; o < out_dim; ++o) db[o] += G.col(o).sum();
    }
    if (x.requires_grad()) {
      ConstMatMap<T> W(w.value().data(), out_dim, in);
      MatMap<T> dX(x.grad_buffer().data(), n, in);
      dX.noalias() += G * W;
    }
  });
}

/// x: [N,D] against constant keys [K,D] -> [N,K] dot products scaled by 1/temperature.
template <class T>
Var<T> scaled_similarity(const Var<T>& x, const Tensor<T>& keys, T temperature) {
  detail::expect_rank(x, 2, "scaled_similarity");
  if (!(temperature > T(0))) throw std::invalid_argument("temperature must be > 0");
  const int n = x.dim(0), d = x.dim(1), k = keys.dim(0);
  if (keys.rank() != 2 || keys.dim(1) != d) {
    throw std::invalid_argument("scaled_similarity: key width mismatch");
  }
  Tensor<T> out({n, k});
  ConstMatMap<T> X(x.value().data(), n, d);
  ConstMatMap<T> K(keys.data(), k, d);
  MatMap<T>(out.data(), n, k).noalias() = (X * K.transpose()) / temperature;
  return make_op(std::move(out), {x}, [x, keys, n, d, k, temperature](const Tensor<T>& g) {
    ConstMatMap<T> G(g.data(), n, k);
    ConstMatMap<T> K(keys.data(), k, d);
    MatMap<T>(x.grad_buffer().data(), n, d).noalias() += (G * K) / temperature;
  });
}

/// Row-wise x / (||x|| + eps).
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-8)) {
  detail::expect_rank(x, 2, "l2_normalize_rows");
  const int n = x.dim(0), d = x.dim(1);
  Tensor<T> out(x.shape());
  std::vector<T> norms(n);
  for (int r = 0; r < n; ++r) {
    T s = 0;
    for (int j = 0; j < d; ++j) s += x.value().at(r, j) * x.value().at(r, j);
    norms[r] = std::sqrt(s);
    const T denom = norms[r] + eps;
    for (int j = 0; j < d; ++j) out.at(r, j) = x.value().at(r, j) / denom;
  }
  return make_op(std::move(out), {x}, [x, norms = std::move(norms), n, d, eps](const Tensor<T>& g) {
    auto& dx = x.grad_buffer();
    for (int r = 0; r < n; ++r) {
      const T s = norms[r] + eps;
      T xg = 0;
      for (int j = 0; j < d; ++j) xg += x.value().at(r, j) * g.at(r, j);
      const T k2 = norms[r] > T(0) ? xg / (s * s * norms[r]) : T(0);
      for (int j = 0; j < d; ++j) dx.at(r, j) += g.at(r, j) / s - x.value().at(r, j) * k2;
    }
  });
}

/// Per-pixel channel normalisation of a [C,H,W] map.
template <class T>
Var<T> l2_normalize_channels(const Var<T>& x, T eps = T(1e-8)) {
  detail::expect_rank(x, 3, "l2_normalize_channels");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor<T> out(x.shape());
  std::vector<T> norms(hw, T(0));
  const T* in = x.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) norms[p] += in[ch * hw + p] * in[ch * hw + p];
  for (auto& v : norms) v = std::sqrt(v);
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = in[ch * hw + p] / (norms[p] + eps);
  return make_op(std::move(out), {x}, [x, norms = std::move(norms), c, hw, eps](const Tensor<T>& g) {
    const T* in = x.value().data();
    auto& dx = x.grad_buffer();
    std::vector<T> xg(hw, T(0));
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) xg[p] += in[ch * hw + p] * g[ch * hw + p];
    for (int ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const T s = norms[p] + eps;
        const T k2 = norms[p] > T(0) ? xg[p] / (s * s * norms[p]) : T(0);
        dx[ch * hw + p] += g[ch * hw + p] / s - in[ch * hw + p] * k2;
      }
  });
}

/// Gathers pixel feature vectors from [C,H,W] at flat indices (y*W+x) -> [N,C].
template <class T>
Var<T> gather_pixels(const Var<T>& x, std::vector<int> pixels) {
  detail::expect_rank(x, 3, "gather_pixels");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  const int n = static_cast<int>(pixels.size());
  Tensor<T> out({n, c});
  for (int r = 0; r < n; ++r) {
    if (pixels[r] < 0 || static_cast<std::size_t>(pixels[r]) >= hw) {
      throw std::out_of_range("gather_pixels: index out of range");
    }
    for (int ch = 0; ch < c; ++ch) out.at(r, ch) = x.value()[ch * hw + pixels[r]];
  }
  return make_op(std::move(out), {x}, [x, pixels = std::move(pixels), c, hw](const Tensor<T>& g) {
    auto& d = x.grad_buffer();
    for (std::size_t r = 0; r < pixels.size(); ++r)
      for (int ch = 0; ch < c; ++ch) d[ch * hw + pixels[r]] += g.at(static_cast<int>(r), ch);
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int d = parts.front().dim(1);
  int n = 0;
  for (const auto& p : parts) {
    detail::expect_rank(p, 2, "concat_rows");
    if (p.dim(1) != d) throw std::invalid_argument("concat_rows: width mismatch");
    n += p.dim(0);
  }
  Tensor<T> out({n, d});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.size(), out.data() + off);
    off += p.size();
  }
  return make_op(std::move(out), parts, [parts](const Tensor<T>& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) {
        auto& d = p.grad_buffer();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[off + i];
      }
      off += p.size();
    }
  });
}

/// Row-wise log-softmax of [N,K].
template <class T>
Var<T> log_softmax_rows(const Var<T>& x) {
  detail::expect_rank(x, 2, "log_softmax_rows");
  const int n = x.dim(0), k = x.dim(1);
  Tensor<T> out(x.shape());
  for (int r = 0; r < n; ++r) {
    T mx = x.value().at(r, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, x.value().at(r, j));
    T s = 0;
    for (int j = 0; j < k; ++j) s += std::exp(x.value().at(r, j) - mx);
    const T lse = mx + std::log(s);
    for (int j = 0; j < k; ++j) out.at(r, j) = x.value().at(r, j) - lse;
  }
  Tensor<T> logp = out;
  return make_op(std::move(out), {x}, [x, logp = std::move(logp), n, k](const Tensor<T>& g) {
    auto& d = x.grad_buffer();
    for (int r = 0; r < n; ++r) {
      T gs = 0;
      for (int j = 0; j < k; ++j) gs += g.at(r, j);
      for (int j = 0; j < k; ++j) d.at(r, j) += g.at(r, j) - std::exp(logp.at(r, j)) * gs;
    }
  });
}

// ---------------------------------------------------------------------------
// Fixed linear resampling of [C,H,W] maps (spatial transforms)

/// Per output pixel, up to four (source pixel, weight) taps. Taps with
/// source < 0 read zero. An all-invalid pixel has valid[p] == 0.
struct SamplingMap {
  int src_h = 0, src_w = 0, out_h = 0, out_w = 0;
  std::vector<std::array<int, 4>> index;
  std::vector<std::array<double, 4>> weight;
  std::vector<unsigned char> valid;
};

template <class T>
Tensor<T> resample_value(const Tensor<T>& x, const SamplingMap& m) {
  const int c = x.dim(0);
  const std::size_t shw = static_cast<std::size_t>(m.src_h) * m.src_w;
  const std::size_t ohw = static_cast<std::size_t>(m.out_h) * m.out_w;
  Tensor<T> out({c, m.out_h, m.out_w});
  for (int ch = 0; ch < c; ++ch) {
    const T* src = x.data() + ch * shw;
    T* dst = out.data() + ch * ohw;
    for (std::size_t p = 0; p < ohw; ++p) {
      T v = 0;
      for (int t = 0; t < 4; ++t) {
        const int s = m.index[p][t];
        if (s >= 0) v += static_cast<T>(m.weight[p][t]) * src[s];
      }
      dst[p] = v;
    }
  }
  return out;
}

template <class T>
Var<T> resample(const Var<T>& x, const SamplingMap& m) {
  detail::expect_rank(x, 3, "resample");
  if (x.dim(1) != m.src_h || x.dim(2) != m.src_w) {
    throw std::invalid_argument("resample: map built for a different input size");
  }
  return make_op(resample_value(x.value(), m), {x}, [x, m](const Tensor<T>& g) {
    const int c = x.dim(0);
    const std::size_t shw = static_cast<std::size_t>(m.src_h) * m.src_w;
    const std::size_t ohw = static_cast<std::size_t>(m.out_h) * m.out_w;
    auto& d = x.grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      T* dst = d.data() + ch * shw;
      const T* gs = g.data() + ch * ohw;
      for (std::size_t p = 0; p < ohw; ++p)
        for (int t = 0; t < 4; ++t) {
          const int s = m.index[p][t];
          if (s >= 0) dst[s] += static_cast<T>(m.weight[p][t]) * gs[p];
        }
    }
  });
}

}  // namespace mona
