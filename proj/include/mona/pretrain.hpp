#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/augment.hpp"
#include "mona/datakit.hpp"
#include "mona/losses.hpp"
#include "mona/nets.hpp"
#include "mona/ops.hpp"
#include "mona/optim.hpp"

namespace mona {

/// Log-probabilities of an anchor's similarity to a reference set.
struct RelationDistribution {
  std::vector<double> log_probs;
  double temperature = 1.0;
};

/// log softmax_j( anchor . w_j / tau ) over the rows w_j of `mined`.
inline RelationDistribution relation_distribution(std::span<const double> anchor, const Tensor<double>& mined,
                                                  double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("relation_distribution: temperature must be > 0");
  if (mined.rank() != 2 || mined.dim(1) != static_cast<int>(anchor.size())) {
    throw std::invalid_argument("relation_distribution: width mismatch");
  }
  const int k = mined.dim(0);
  if (k < 2) throw std::invalid_argument("relation_distribution: need at least 2 mined views");
  RelationDistribution out;
  out.temperature = temperature;
  out.log_probs.resize(k);
  double mx = -INFINITY;
  for (int j = 0; j < k; ++j) {
    double s = 0;
    for (std::size_t t = 0; t < anchor.size(); ++t) s += anchor[t] * mined.at(j, static_cast<int>(t));
    out.log_probs[j] = s / temperature;
    mx = std::max(mx, out.log_probs[j]);
  }
  double z = 0;
  for (double v : out.log_probs) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (auto& v : out.log_probs) v -= lse;
  return out;
}

/// KL(s_student || s_teacher).
inline double instance_discrimination_loss(const RelationDistribution& s, const RelationDistribution& t) {
  if (s.log_probs.size() != t.log_probs.size()) {
    throw std::invalid_argument("instance_discrimination_loss: length mismatch");
  }
  double kl = 0;
  for (std::size_t j = 0; j < s.log_probs.size(); ++j) {
    kl += std::exp(s.log_probs[j]) * (s.log_probs[j] - t.log_probs[j]);
  }
  return kl;
}

/// Batched relation log-probabilities [N,k] for anchors [N,D] against constant
/// reference embeddings [k,D].
template <class T>
Var<T> relation_log_probs(const Var<T>& anchors, const Tensor<T>& mined, T temperature) {
  if (!(temperature > T(0))) throw std::invalid_argument("relation_log_probs: temperature must be > 0");
  return log_softmax_rows(scaled_similarity(anchors, mined, temperature));
}

/// 0.5 * soft Dice (mean over classes) + 0.5 * pixelwise cross-entropy.
template <class T>
Var<T> supervised_loss(const Var<T>& logits, const LabelMap& labels) {
  const auto lab = labels.values();
  return scale(add(soft_dice_loss<T>(logits, lab), softmax_cross_entropy<T>(logits, lab)), T(0.5));
}

template <class T>
Tensor<T> to_input(const Image& img) {
  return img.cast<T>().reshaped({1, img.dim(0), img.dim(1)});
}

struct PretrainOptions {
  double tau_student = 0.1;   // tau_theta
  double tau_teacher = 0.01;  // tau_xi
  int mined_views = 36;       // d
  int local_crops = 36;
  int local_crop_size = 64;
  bool instance_losses = true;
  AugmentParams augment;
};

/// All random draws of one stage-1 step, fixed before any loss is evaluated.
struct PretrainViews {
  std::vector<Sample2D> labeled;  // weak views with labels
  std::vector<Sample2D> student;  // strong views derived from the teacher views
  std::vector<Sample2D> teacher;  // weak views of the unlabeled batch
  std::vector<TransformRecord> records;  // teacher view -> student view
  std::vector<Sample2D> donors;          // CutMix donors, parallel to records
  std::vector<Sample2D> mined;    // d weak views drawn from the unlabeled pool
  std::vector<CropWindow> windows;
};

/// Three child streams are always split off, in this order, so that every
/// stage consumes the parent stream identically.
struct StepStreams {
  Rng labeled, unlabeled, aux;
  explicit StepStreams(Rng& rng) : labeled(rng.split()), unlabeled(rng.split()), aux(rng.split()) {}
};

inline std::vector<Sample2D> weak_views(const std::vector<Sample2D>& batch, Rng& rng,
                                        const AugmentParams& aug) {
  std::vector<Sample2D> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(weak_chain(s, rng, aug).first);
  return out;
}

inline PretrainViews draw_pretrain_views(const std::vector<Sample2D>& labeled,
                                         const std::vector<Sample2D>& unlabeled,
                                         const std::vector<Sample2D>& pool, StepStreams& streams,
                                         const PretrainOptions& opt, int image_size) {
  PretrainViews v;
  v.labeled = weak_views(labeled, streams.labeled, opt.augment);
  if (!opt.instance_losses || unlabeled.empty()) return v;
  if (pool.empty()) throw std::invalid_argument("pretrain: mined views requested but the unlabeled pool is empty");
  if (static_cast<int>(pool.size()) < opt.mined_views || opt.mined_views < 2) {
    throw std::invalid_argument("pretrain: unlabeled pool smaller than mined view-set size " +
                                std::to_string(opt.mined_views));
  }
  Rng& rng = streams.unlabeled;
  for (const auto& s : unlabeled) {
    const Sample2D& donor = pool[rng.below(static_cast<int>(pool.size()))];
    Sample2D weak = weak_chain(s, rng, opt.augment).first;
    auto [strong, rec] = strong_chain(weak, &donor, rng, opt.augment);
    v.student.push_back(std::move(strong));
    v.teacher.push_back(std::move(weak));
    v.records.push_back(std::move(rec));
    v.donors.push_back(donor);
  }
  for (int idx : rng.choose(static_cast<int>(pool.size()), opt.mined_views)) {
    v.mined.push_back(weak_chain(pool[idx], rng, opt.augment).first);
  }
  v.windows = random_crop_windows(image_size, opt.local_crops, opt.local_crop_size, rng);
  return v;
}

template <class T>
struct PretrainTerms {
  Var<T> sup, inst_global, inst_local;
  bool has_instance = false;
};

/// Stage-1 losses for fixed views. The teacher side is evaluated without a graph.
template <class T>
PretrainTerms<T> pretrain_losses(const StudentTeacherPair<T>& pair, const NetSpec& spec,
                                 const PretrainViews& v, const PretrainOptions& opt) {
  PretrainTerms<T> out;
  std::vector<Var<T>> sup;
  for (const auto& s : v.labeled) {
    auto f = forward(pair.student, spec, to_input<T>(s.image));
    sup.push_back(supervised_loss(f.logits, *s.label));
  }
  out.sup = sup.empty() ? Var<T>::constant(Tensor<T>({1}, T(0)))
                        : scale(add_n(sup), T(1) / static_cast<T>(sup.size()));
  if (v.student.empty()) return out;
  out.has_instance = true;

  const int d = static_cast<int>(v.mined.size());
  const int n_crops = static_cast<int>(v.windows.size());
  const int m = spec.m_embed;
  // Teacher embeddings of the mined set: one global row per view, and per
  // crop window one local row per view.
  Tensor<T> mined_global({d, m});
  std::vector<Tensor<T>> mined_local(n_crops, Tensor<T>({d, m}));
  for (int i = 0; i < d; ++i) {
    auto f = forward(pair.teacher, spec, to_input<T>(v.mined[i].image));
    const auto g = l2_normalize_rows(project_global(pair.teacher, f.global)).value();
    std::copy(g.data(), g.data() + m, mined_global.data() + static_cast<std::size_t>(i) * m);
    for (int c = 0; c < n_crops; ++c) {
      const auto l = local_project(pair.teacher, f.logits, {v.windows[c]}, false).value();
      std::copy(l.data(), l.data() + m, mined_local[c].data() + static_cast<std::size_t>(i) * m);
    }
  }

  const T tau_s = static_cast<T>(opt.tau_student), tau_t = static_cast<T>(opt.tau_teacher);
  std::vector<Var<T>> global_terms, local_terms;
  for (std::size_t b = 0; b < v.student.size(); ++b) {
    auto fs = forward(pair.student, spec, to_input<T>(v.student[b].image));
    auto ft = forward(pair.teacher, spec, to_input<T>(v.teacher[b].image));
    Var<T> zs = l2_normalize_rows(predict(pair.student, project_global(pair.student, fs.global)));
    Tensor<T> zt = l2_normalize_rows(project_global(pair.teacher, ft.global)).value();
    Var<T> s_log = relation_log_probs(zs, mined_global, tau_s);
    Tensor<T> t_log = log_softmax_rows(scaled_similarity(Var<T>::constant(zt), mined_global, tau_t)).value();
    global_terms.push_back(kl_divergence_rows(s_log, t_log));

    // Crops share a location in the student frame, so the teacher map is
    // carried through the student view's transform first.
    const auto& rec = v.records[b];
    Tensor<T> t_map = apply_spatial(rec, ft.logits.value());
    if (rec.cutmix) {
      const auto fd = forward(pair.teacher, spec, to_input<T>(v.donors[b].image));
      t_map = apply_cutmix(t_map, fd.logits.value(), *rec.cutmix);
    }
    const Var<T> t_logits = Var<T>::constant(std::move(t_map));
    std::vector<Var<T>> per_crop;
    for (int c = 0; c < n_crops; ++c) {
      Var<T> us = local_project(pair.student, fs.logits, {v.windows[c]}, true);
      Tensor<T> ut = local_project(pair.teacher, t_logits, {v.windows[c]}, false).value();
      Var<T> sl = relation_log_probs(us, mined_local[c], tau_s);
      Tensor<T> tl = log_softmax_rows(scaled_similarity(Var<T>::constant(ut), mined_local[c], tau_t)).value();
      per_crop.push_back(kl_divergence_rows(sl, tl));
    }
    local_terms.push_back(scale(add_n(per_crop), T(1) / static_cast<T>(n_crops)));
  }
  const T inv = T(1) / static_cast<T>(v.student.size());
  out.inst_global = scale(add_n(global_terms), inv);
  out.inst_local = scale(add_n(local_terms), inv);
  return out;
}

struct PretrainLoss {
  long long step = 0;
  double sup = 0, inst_global = 0, inst_local = 0, total = 0, lr = 0;
};

inline void require_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite loss term ") + name);
}

/// One stage-1 step: L_sup + L_inst^global + L_inst^local, SGD on the
/// student, then EMA into the teacher.
template <class T>
PretrainLoss pretrain_step(TrainState<T>& st, const std::vector<Sample2D>& labeled,
                           const std::vector<Sample2D>& unlabeled, const std::vector<Sample2D>& pool,
                           Rng& rng, const PretrainOptions& opt) {
  if (labeled.empty() && (unlabeled.empty() || !opt.instance_losses)) {
    throw std::invalid_argument("pretrain_step: empty batch");
  }
  StepStreams streams(rng);
  const auto views = draw_pretrain_views(labeled, unlabeled, pool, streams, opt, st.spec.image_size);
  auto terms = pretrain_losses(st.pair, st.spec, views, opt);
  PretrainLoss out;
  out.step = st.step;
  out.lr = st.optimizer.current_lr();
  out.sup = terms.sup.item();
  Var<T> total = terms.sup;
  if (terms.has_instance) {
    out.inst_global = terms.inst_global.item();
    out.inst_local = terms.inst_local.item();
    total = add_n(std::vector<Var<T>>{terms.sup, terms.inst_global, terms.inst_local});
  }
  out.total = total.item();
  require_finite(out.sup, "L_sup");
  require_finite(out.inst_global, "L_inst_global");
  require_finite(out.inst_local, "L_inst_local");
  backward(total);
  st.optimizer.step(st.pair.student);
  ema_update(st.pair);
  ++st.step;
  return out;
}

}  // namespace mona
