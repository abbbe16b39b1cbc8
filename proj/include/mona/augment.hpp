#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mona/datakit.hpp"
#include "mona/ops.hpp"
#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

/// Ranges for the random augmentations. All-zero ranges give the identity.
struct AugmentParams {
  double rotation_deg = 15.0;    // rotation drawn in [-r, r]
  double crop_scale_min = 0.85;  // zoom crop side as a fraction of the image
  double hflip_prob = 0.5;
  double contrast = 0.4;    // gamma = exp(u), u in [-contrast, contrast]
  double brightness = 0.1;  // additive shift in [-b, b]
  double cutmix_prob = 0.5;
  double cutmix_area_min = 0.1;
  double cutmix_area_max = 0.3;
  double warp_sigma = 6.0;  // smoothing of the displacement field, pixels
  double warp_alpha = 1.5;  // max displacement, pixels

  static AugmentParams identity() {
    AugmentParams p;
    p.rotation_deg = 0;
    p.crop_scale_min = 1;
    p.hflip_prob = 0;
    p.contrast = 0;
    p.brightness = 0;
    p.cutmix_prob = 0;
    p.warp_alpha = 0;
    return p;
  }
};

struct IntensityOp {
  std::string name;  // "contrast" (gamma) or "brightness" (shift)
  double value = 0;
};

struct CutMixBox {
  int y0 = 0, x0 = 0, h = 0, w = 0;
  std::string donor_id;  // "<patient_id>/<slice_index>"

  std::size_t area() const { return static_cast<std::size_t>(h) * w; }
  bool contains(int y, int x) const { return y >= y0 && y < y0 + h && x >= x0 && x < x0 + w; }
};

/// Spatial part: an output pixel centre p (image-centred coordinates) is
/// first displaced by the warp field, then mapped to the source by
/// `affine` = [s R F | t] (F = optional horizontal flip, R rotation, s zoom).
struct TransformRecord {
  int height = 0, width = 0;
  std::array<double, 6> affine{1, 0, 0, 0, 1, 0};  // row-major 2x3 on (u, v, 1)
  double rotation_deg = 0, scale = 1, offset_y = 0, offset_x = 0;
  bool hflip = false;
  std::vector<double> warp_dy, warp_dx;  // empty when no warp
  std::vector<IntensityOp> intensity_ops;
  std::optional<CutMixBox> cutmix;

  static TransformRecord identity(int h, int w) {
    TransformRecord r;
    r.height = h;
    r.width = w;
    return r;
  }

  static TransformRecord from_affine(int h, int w, std::array<double, 6> a) {
    TransformRecord r = identity(h, w);
    r.affine = a;
    return r;
  }

  double determinant() const { return affine[0] * affine[4] - affine[1] * affine[3]; }
  bool has_warp() const { return !warp_dx.empty(); }

  /// Source-image window covered by the zoom crop (before rotation).
  std::array<double, 4> crop_window() const {
    const double h = scale * height, w = scale * width;
    return {offset_y + (height - h) / 2, offset_x + (width - w) / 2, h, w};
  }
};

inline TransformRecord inverse(const TransformRecord& r) {
  if (r.has_warp()) throw std::invalid_argument("inverse: warped records have no closed-form inverse");
  const double det = r.determinant();
  if (std::abs(det) < 1e-12) throw std::invalid_argument("inverse: non-invertible transform");
  const auto& a = r.affine;
  TransformRecord inv = TransformRecord::identity(r.height, r.width);
  inv.affine[0] = a[4] / det;
  inv.affine[1] = -a[1] / det;
  inv.affine[3] = -a[3] / det;
  inv.affine[4] = a[0] / det;
  inv.affine[2] = -(inv.affine[0] * a[2] + inv.affine[1] * a[5]);
  inv.affine[5] = -(inv.affine[3] * a[2] + inv.affine[4] * a[5]);
  return inv;
}

enum class Interp { bilinear, nearest };

/// Builds the fixed resampling taps realising the record's spatial part.
/// Output pixels whose source lies outside the image are invalid.
inline SamplingMap spatial_sampling_map(const TransformRecord& r, Interp interp) {
  if (std::abs(r.determinant()) < 1e-12) throw std::invalid_argument("apply_spatial: non-invertible transform");
  const int H = r.height, W = r.width;
  SamplingMap m;
  m.src_h = m.out_h = H;
  m.src_w = m.out_w = W;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  m.index.assign(n, {-1, -1, -1, -1});
  m.weight.assign(n, {0, 0, 0, 0});
  m.valid.assign(n, 0);
  const auto& a = r.affine;
  auto snap = [](double v) {
    const double rv = std::round(v);
    return std::abs(v - rv) < 1e-6 ? rv : v;
  };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * W + x;
      double u = x + 0.5 - W / 2.0, v = y + 0.5 - H / 2.0;
      if (r.has_warp()) {
        u += r.warp_dx[p];
        v += r.warp_dy[p];
      }
      const double px = snap(a[0] * u + a[1] * v + a[2] + W / 2.0 - 0.5);
      const double py = snap(a[3] * u + a[4] * v + a[5] + H / 2.0 - 0.5);
      if (px < -0.5 || px > W - 0.5 || py < -0.5 || py > H - 0.5) continue;
      m.valid[p] = 1;
      if (interp == Interp::nearest) {
        const int ix = std::clamp(static_cast<int>(std::floor(px + 0.5)), 0, W - 1);
        const int iy = std::clamp(static_cast<int>(std::floor(py + 0.5)), 0, H - 1);
        m.index[p][0] = iy * W + ix;
        m.weight[p][0] = 1.0;
        continue;
      }
      const int x0 = static_cast<int>(std::floor(px)), y0 = static_cast<int>(std::floor(py));
      const double fx = px - x0, fy = py - y0;
      const int xa = std::clamp(x0, 0, W - 1), xb = std::clamp(x0 + 1, 0, W - 1);
      const int ya = std::clamp(y0, 0, H - 1), yb = std::clamp(y0 + 1, 0, H - 1);
      m.index[p] = {ya * W + xa, ya * W + xb, yb * W + xa, yb * W + xb};
      m.weight[p] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
    }
  return m;
}

/// Spatial part applied channelwise (bilinear) to a [C,H,W] or [H,W] map.
template <class T>
Tensor<T> apply_spatial(const TransformRecord& r, const Tensor<T>& map) {
  const bool flat = map.rank() == 2;
  const Tensor<T> m3 = flat ? map.reshaped({1, map.dim(0), map.dim(1)}) : map;
  if (m3.rank() != 3 || m3.dim(1) != r.height || m3.dim(2) != r.width) {
    throw std::invalid_argument("apply_spatial: map shape does not match record");
  }
  Tensor<T> out = resample_value(m3, spatial_sampling_map(r, Interp::bilinear));
  return flat ? out.reshaped({r.height, r.width}) : out;
}

/// Nearest-neighbour resampling of a label map; pixels sampled from outside
/// the image get `fill` (default -1, ignored by the losses).
inline LabelMap apply_spatial_labels(const TransformRecord& r, const LabelMap& labels, int fill = -1) {
  if (labels.rank() != 2 || labels.dim(0) != r.height || labels.dim(1) != r.width) {
    throw std::invalid_argument("apply_spatial_labels: label shape does not match record");
  }
  const auto m = spatial_sampling_map(r, Interp::nearest);
  LabelMap out({r.height, r.width}, fill);
  for (std::size_t p = 0; p < out.size(); ++p)
    if (m.valid[p]) out[p] = labels[m.index[p][0]];
  return out;
}

/// Validity of each output pixel under the spatial part.
inline std::vector<unsigned char> spatial_valid_mask(const TransformRecord& r) {
  return spatial_sampling_map(r, Interp::nearest).valid;
}

template <class T>
Tensor<T> apply_intensity(const Tensor<T>& image, const std::vector<IntensityOp>& ops) {
  Tensor<T> out = image;
  for (const auto& op : ops) {
    if (op.name == "contrast") {
      for (auto& v : out.values()) v = static_cast<T>(std::pow(std::max<double>(v, 0.0), op.value));
    } else if (op.name == "brightness") {
      for (auto& v : out.values()) v = static_cast<T>(v + op.value);
    } else {
      throw std::invalid_argument("apply_intensity: unknown op '" + op.name + "'");
    }
    for (auto& v : out.values()) v = std::clamp<T>(v, T(0), T(1));
  }
  return out;
}

/// Pastes the box region of `donor` into `target` (rank 2 or 3, same shape).
template <class T>
Tensor<T> apply_cutmix(const Tensor<T>& target, const Tensor<T>& donor, const CutMixBox& box) {
  require_same_shape(target, donor, "apply_cutmix");
  const int r = static_cast<int>(target.rank());
  const int c = r == 3 ? target.dim(0) : 1;
  const int H = target.dim(r - 2), W = target.dim(r - 1);
  if (box.y0 < 0 || box.x0 < 0 || box.y0 + box.h > H || box.x0 + box.w > W) {
    throw std::out_of_range("apply_cutmix: box outside image");
  }
  Tensor<T> out = target;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  for (int ch = 0; ch < c; ++ch)
    for (int y = box.y0; y < box.y0 + box.h; ++y)
      for (int x = box.x0; x < box.x0 + box.w; ++x) {
        const std::size_t i = ch * hw + static_cast<std::size_t>(y) * W + x;
        out[i] = donor[i];
      }
  return out;
}

namespace detail {

inline std::vector<double> gaussian_blur(const std::vector<double>& f, int H, int W, double sigma) {
  const int rad = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * rad + 1);
  double ks = 0;
  for (int i = -rad; i <= rad; ++i) ks += k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  std::vector<double> tmp(f.size()), out(f.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -rad; i <= rad; ++i) s += k[i + rad] * f[y * W + std::clamp(x + i, 0, W - 1)];
      tmp[y * W + x] = s;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int i = -rad; i <= rad; ++i) s += k[i + rad] * tmp[std::clamp(y + i, 0, H - 1) * W + x];
      out[y * W + x] = s;
    }
  return out;
}

inline void draw_affine(TransformRecord& r, const AugmentParams& p, Rng& rng) {
  r.rotation_deg = p.rotation_deg > 0 ? rng.uniform(-p.rotation_deg, p.rotation_deg) : 0.0;
  const double smin = std::clamp(p.crop_scale_min, 0.1, 1.0);
  r.scale = smin < 1.0 ? rng.uniform(smin, 1.0) : 1.0;
  const double my = (1.0 - r.scale) * r.height / 2, mx = (1.0 - r.scale) * r.width / 2;
  r.offset_y = my > 0 ? rng.uniform(-my, my) : 0.0;
  r.offset_x = mx > 0 ? rng.uniform(-mx, mx) : 0.0;
  r.hflip = p.hflip_prob > 0 && rng.bernoulli(p.hflip_prob);
  const double th = r.rotation_deg * M_PI / 180.0;
  const double c = std::cos(th), s = std::sin(th), f = r.hflip ? -1.0 : 1.0;
  r.affine = {r.scale * c * f, -r.scale * s, r.offset_x, r.scale * s * f, r.scale * c, r.offset_y};
}

inline void draw_warp(TransformRecord& r, const AugmentParams& p, Rng& rng) {
  if (!(p.warp_alpha > 0)) return;
  const int H = r.height, W = r.width;
  const std::size_t n = static_cast<std::size_t>(H) * W;
  std::vector<double> dy(n), dx(n);
  for (auto& v : dy) v = rng.normal();
  for (auto& v : dx) v = rng.normal();
  const double sigma = std::max(p.warp_sigma, 0.5);
  dy = gaussian_blur(dy, H, W, sigma);
  dx = gaussian_blur(dx, H, W, sigma);
  double mx = 1e-12;
  for (std::size_t i = 0; i < n; ++i) mx = std::max({mx, std::abs(dy[i]), std::abs(dx[i])});
  const double amp = p.warp_alpha * rng.uniform(0.5, 1.0) / mx;
  for (std::size_t i = 0; i < n; ++i) {
    dy[i] *= amp;
    dx[i] *= amp;
  }
  r.warp_dy = std::move(dy);
  r.warp_dx = std::move(dx);
}

inline Sample2D apply_spatial_sample(const TransformRecord& r, const Sample2D& s) {
  Sample2D out;
  out.patient_id = s.patient_id;
  out.slice_index = s.slice_index;
  out.image = apply_spatial(r, s.image);
  if (s.label) out.label = apply_spatial_labels(r, *s.label);
  return out;
}

inline std::string sample_id(const Sample2D& s) {
  return s.patient_id + "/" + std::to_string(s.slice_index);
}

}  // namespace detail

/// Weak chain: rotation, zoom crop, horizontal flip (spatial only).
inline std::pair<Sample2D, TransformRecord> weak_chain(const Sample2D& sample, Rng& rng,
                                                       const AugmentParams& params = {}) {
  TransformRecord r = TransformRecord::identity(sample.height(), sample.width());
  detail::draw_affine(r, params, rng);
  return {detail::apply_spatial_sample(r, sample), std::move(r)};
}

/// Strong chain: weak spatial ops plus a smooth warp, contrast and brightness,
/// then CutMix from the untransformed `donor`. Labels (when both samples have
/// them) follow the same spatial ops and CutMix.
inline std::pair<Sample2D, TransformRecord> strong_chain(const Sample2D& sample, const Sample2D* donor,
                                                         Rng& rng, const AugmentParams& params = {}) {
  TransformRecord r = TransformRecord::identity(sample.height(), sample.width());
  detail::draw_affine(r, params, rng);
  detail::draw_warp(r, params, rng);
  Sample2D out = detail::apply_spatial_sample(r, sample);
  if (params.contrast > 0) r.intensity_ops.push_back({"contrast", std::exp(rng.uniform(-params.contrast, params.contrast))});
  if (params.brightness > 0) r.intensity_ops.push_back({"brightness", rng.uniform(-params.brightness, params.brightness)});
  out.image = apply_intensity(out.image, r.intensity_ops);
  if (params.cutmix_prob > 0 && rng.bernoulli(params.cutmix_prob)) {
    if (!donor) throw std::invalid_argument("strong_chain: CutMix drawn but no donor sample given");
    if (donor->image.shape() != sample.image.shape()) {
      throw std::invalid_argument("strong_chain: donor shape differs from sample");
    }
    const int H = sample.height(), W = sample.width();
    const double area = rng.uniform(params.cutmix_area_min, params.cutmix_area_max) * H * W;
    CutMixBox box;
    box.h = std::clamp(static_cast<int>(std::lround(std::sqrt(area))), 0, H);
    box.w = std::clamp(static_cast<int>(std::lround(std::sqrt(area))), 0, W);
    box.y0 = rng.below(H - box.h + 1);
    box.x0 = rng.below(W - box.w + 1);
    box.donor_id = detail::sample_id(*donor);
    out.image = apply_cutmix(out.image, donor->image, box);
    if (out.label && donor->label) out.label = apply_cutmix(*out.label, *donor->label, box);
    else out.label.reset();
    r.cutmix = box;
  }
  return {std::move(out), std::move(r)};
}

}  // namespace mona
