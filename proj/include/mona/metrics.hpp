#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/datakit.hpp"
#include "mona/losses.hpp"
#include "mona/nets.hpp"
#include "mona/pretrain.hpp"

namespace mona {

/// Binary mask of rank 2 ([H,W]) or 3 ([D,H,W]).
using Mask = Tensor<unsigned char>;

inline constexpr double kUndefinedAsd = std::numeric_limits<double>::quiet_NaN();

inline std::size_t mask_count(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m.values()) n += v != 0;
  return n;
}

/// 2|P and G| / (|P| + |G|); 1 when both masks are empty.
inline double dice(const Mask& pred, const Mask& gt) {
  require_same_shape(pred, gt, "dice");
  std::size_t inter = 0, np = 0, ng = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np + ng == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

namespace detail {

inline std::array<int, 3> dims3(const Mask& m) {
  if (m.rank() == 2) return {1, m.dim(0), m.dim(1)};
  if (m.rank() == 3) return {m.dim(0), m.dim(1), m.dim(2)};
  throw std::invalid_argument("mask must be rank 2 or 3");
}

}  // namespace detail

/// Mask voxels with at least one background face neighbour (in-plane
/// 4-neighbourhood, plus the two slice neighbours for volumes). Voxels
/// outside the grid count as background. Returns (z, y, x) triples.
inline std::vector<std::array<int, 3>> boundary_voxels(const Mask& m) {
  const auto [D, H, W] = detail::dims3(m);
  auto at = [&](int z, int y, int x) -> bool {
    if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
    return m[(static_cast<std::size_t>(z) * H + y) * W + x] != 0;
  };
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!at(z, y, x)) continue;
        bool edge = !at(z, y - 1, x) || !at(z, y + 1, x) || !at(z, y, x - 1) || !at(z, y, x + 1);
        if (D > 1) edge = edge || !at(z - 1, y, x) || !at(z + 1, y, x);
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

/// Average symmetric surface distance with exact Euclidean distances between
/// boundary voxel centres. `spacing` is (z, y, x). Returns kUndefinedAsd
/// (NaN) when either mask is empty.
inline double asd(const Mask& pred, const Mask& gt, std::array<double, 3> spacing = {1.0, 1.0, 1.0}) {
  require_same_shape(pred, gt, "asd");
  const auto bp = boundary_voxels(pred);
  const auto bg = boundary_voxels(gt);
  if (bp.empty() || bg.empty()) return kUndefinedAsd;
  auto nearest = [&](const std::array<int, 3>& a, const std::vector<std::array<int, 3>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : set) {
      const double dz = (a[0] - b[0]) * spacing[0], dy = (a[1] - b[1]) * spacing[1], dx = (a[2] - b[2]) * spacing[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    return std::sqrt(best);
  };
  // Directional sums are added last so that asd(P, G) == asd(G, P) exactly.
  double from_pred = 0, from_gt = 0;
  for (const auto& a : bp) from_pred += nearest(a, bg);
  for (const auto& b : bg) from_gt += nearest(b, bp);
  return (from_pred + from_gt) / static_cast<double>(bp.size() + bg.size());
}

inline double asd(const Mask& pred, const Mask& gt, double spacing) {
  return asd(pred, gt, {spacing, spacing, spacing});
}

struct VolumeEval {
  std::string patient_id;
  std::vector<double> dice;  // per foreground class (index c - 1)
  std::vector<double> asd;   // NaN when undefined
};

struct EvalReport {
  std::vector<VolumeEval> volumes;
  std::vector<double> class_dice;  // mean over patients, per foreground class
  std::vector<double> class_asd;   // mean over patients with defined ASD
  double mean_dice = 0;            // macro over classes, then patients
  double mean_asd = 0;
  double tail_dice = 0;            // highest class index
  int undefined_asd = 0;
};

namespace detail {

inline double finite_mean(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / n : kUndefinedAsd;
}

}  // namespace detail

/// Stacks slices per patient (ordered by slice index) and scores each
/// foreground class. `predictions[i]` corresponds to `samples[i]`.
inline EvalReport evaluate_predictions(const std::vector<Sample2D>& samples, const std::vector<LabelMap>& predictions,
                                       int num_classes) {
  if (samples.size() != predictions.size()) throw std::invalid_argument("evaluate: one prediction per sample");
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!samples[i].label) throw std::invalid_argument("evaluate: unlabelled sample " + samples[i].patient_id);
    by_patient[samples[i].patient_id].push_back(i);
  }
  EvalReport rep;
  const int fg = num_classes - 1;
  for (auto& [pid, idx] : by_patient) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return samples[a].slice_index < samples[b].slice_index;
    });
    const int D = static_cast<int>(idx.size());
    const int H = samples[idx[0]].height(), W = samples[idx[0]].width();
    VolumeEval ve;
    ve.patient_id = pid;
    for (int c = 1; c <= fg; ++c) {
      Mask p({D, H, W}), g({D, H, W});
      for (int z = 0; z < D; ++z) {
        const auto& lab = *samples[idx[z]].label;
        const auto& pred = predictions[idx[z]];
        if (lab.shape() != pred.shape() || lab.dim(0) != H || lab.dim(1) != W) {
          throw std::invalid_argument("evaluate: slice shape mismatch in patient " + pid);
        }
        for (int i = 0; i < H * W; ++i) {
          p[static_cast<std::size_t>(z) * H * W + i] = pred[i] == c;
          g[static_cast<std::size_t>(z) * H * W + i] = lab[i] == c;
        }
      }
      ve.dice.push_back(dice(p, g));
      const double a = asd(p, g);
      if (!std::isfinite(a)) ++rep.undefined_asd;
      ve.asd.push_back(a);
    }
    rep.volumes.push_back(std::move(ve));
  }
  rep.class_dice.assign(fg, 0.0);
  rep.class_asd.assign(fg, 0.0);
  std::vector<double> patient_dice, patient_asd;
  for (const auto& v : rep.volumes) {
    double s = 0;
    for (double d : v.dice) s += d;
    patient_dice.push_back(s / fg);
    patient_asd.push_back(detail::finite_mean(v.asd));
  }
  for (int c = 0; c < fg; ++c) {
    std::vector<double> d, a;
    for (const auto& v : rep.volumes) {
      d.push_back(v.dice[c]);
      a.push_back(v.asd[c]);
    }
    rep.class_dice[c] = detail::finite_mean(d);
    rep.class_asd[c] = detail::finite_mean(a);
  }
  rep.mean_dice = detail::finite_mean(patient_dice);
  rep.mean_asd = detail::finite_mean(patient_asd);
  rep.tail_dice = fg > 0 ? rep.class_dice[fg - 1] : 0.0;
  if (rep.undefined_asd > 0) {
    std::clog << "evaluate: " << rep.undefined_asd << " (patient, class) ASD values undefined (empty mask), excluded\n";
  }
  return rep;
}

/// Argmax segmentation of one image.
template <class T>
LabelMap predict_labels(const ParamSet<T>& params, const NetSpec& spec, const Image& image) {
  auto f = forward(params, spec, to_input<T>(image));
  const auto& z = f.logits.value();
  const int c = z.dim(0);
  const std::size_t hw = z.size() / c;
  LabelMap out({image.dim(0), image.dim(1)});
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (z[k * hw + i] > z[best * hw + i]) best = k;
    out[i] = best;
  }
  return out;
}

template <class T>
EvalReport evaluate(const ParamSet<T>& params, const NetSpec& spec, const std::vector<Sample2D>& samples) {
  std::vector<LabelMap> preds;
  preds.reserve(samples.size());
  for (const auto& s : samples) preds.push_back(predict_labels(params, spec, s.image));
  return evaluate_predictions(samples, preds, spec.classes);
}

}  // namespace mona
