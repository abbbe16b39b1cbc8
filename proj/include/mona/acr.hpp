#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/augment.hpp"
#include "mona/losses.hpp"
#include "mona/nets.hpp"
#include "mona/optim.hpp"
#include "mona/pretrain.hpp"

namespace mona {

/// A pixel of one image in the current batch.
struct PixelRef {
  int image = 0;
  int pixel = 0;
  bool operator==(const PixelRef&) const = default;
};

struct ClassSet {
  int cls = 0;
  std::vector<PixelRef> queries;    // pixels labelled cls
  std::vector<PixelRef> keys;       // pixels labelled with another class
  std::vector<double> positive_key;  // normalised mean of the query representations
};

/// Per-class query/key partition of a batch; only classes with at least one
/// pixel appear, in ascending class order.
struct RepresentationSets {
  int dim = 0;
  std::vector<ClassSet> classes;

  const ClassSet* find(int cls) const {
    for (const auto& c : classes)
      if (c.cls == cls) return &c;
    return nullptr;
  }
};

template <class T>
std::vector<double> pixel_vector(const Tensor<T>& reps, int pixel) {
  const int m = reps.dim(0);
  const std::size_t hw = reps.size() / m;
  std::vector<double> v(m);
  for (int k = 0; k < m; ++k) v[k] = static_cast<double>(reps[k * hw + pixel]);
  return v;
}

inline void normalize_in_place(std::vector<double>& v, double eps = 1e-8) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n) + eps;
  for (auto& x : v) x /= n;
}

/// `reps[i]` is [m,H,W] with unit-norm pixels; `labels[i]` has H*W entries,
/// negative entries are ignored.
template <class T>
RepresentationSets build_representation_sets(const std::vector<Tensor<T>>& reps,
                                             const std::vector<std::vector<int>>& labels,
                                             int num_classes) {
  if (reps.size() != labels.size()) throw std::invalid_argument("build_representation_sets: batch size mismatch");
  RepresentationSets sets;
  if (reps.empty()) return sets;
  sets.dim = reps[0].dim(0);
  std::vector<std::vector<PixelRef>> by_class(num_classes);
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const std::size_t hw = reps[i].size() / sets.dim;
    if (labels[i].size() != hw) throw std::invalid_argument("build_representation_sets: label size mismatch");
    for (std::size_t p = 0; p < hw; ++p) {
      const int c = labels[i][p];
      if (c < 0) continue;
      if (c >= num_classes) throw std::out_of_range("build_representation_sets: label >= classes");
      by_class[c].push_back({static_cast<int>(i), static_cast<int>(p)});
    }
  }
  for (int c = 0; c < num_classes; ++c) {
    if (by_class[c].empty()) continue;
    ClassSet cs;
    cs.cls = c;
    cs.queries = by_class[c];
    for (int o = 0; o < num_classes; ++o)
      if (o != c) cs.keys.insert(cs.keys.end(), by_class[o].begin(), by_class[o].end());
    std::vector<double> mean(sets.dim, 0.0);
    for (const auto& q : cs.queries) {
      const auto& r = reps[q.image];
      const std::size_t hw = r.size() / sets.dim;
      for (int k = 0; k < sets.dim; ++k) mean[k] += static_cast<double>(r[k * hw + q.pixel]);
    }
    for (auto& v : mean) v /= static_cast<double>(cs.queries.size());
    normalize_in_place(mean);
    cs.positive_key = std::move(mean);
    sets.classes.push_back(std::move(cs));
  }
  return sets;
}

struct QuerySplit {
  std::vector<PixelRef> easy;  // confidence > delta
  std::vector<PixelRef> hard;  // confidence <= delta
};

inline QuerySplit split_easy_hard(const std::vector<PixelRef>& queries, std::span<const double> confidences,
                                  double delta) {
  if (confidences.size() != queries.size()) throw std::invalid_argument("split_easy_hard: one confidence per query");
  QuerySplit s;
  for (std::size_t i = 0; i < queries.size(); ++i) (confidences[i] > delta ? s.easy : s.hard).push_back(queries[i]);
  return s;
}

/// Per-class FIFO buffers of key vectors.
class ClassMemoryBank {
 public:
  ClassMemoryBank() = default;
  ClassMemoryBank(int num_classes, int capacity) : capacity_(capacity), buffers_(num_classes) {
    if (num_classes < 1 || capacity < 1) throw std::invalid_argument("ClassMemoryBank: classes and capacity must be >= 1");
  }

  int num_classes() const { return static_cast<int>(buffers_.size()); }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  std::size_t size(int cls) const { return buffer(cls).size(); }
  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& b : buffers_) n += b.size();
    return n;
  }
  const std::deque<std::vector<double>>& entries(int cls) const { return buffer(cls); }

  void push(int cls, std::vector<double> key) {
    auto& b = buffer(cls);
    if (dim_ == 0) dim_ = static_cast<int>(key.size());
    if (static_cast<int>(key.size()) != dim_) throw std::invalid_argument("ClassMemoryBank: key width mismatch");
    b.push_back(std::move(key));
    while (static_cast<int>(b.size()) > capacity_) b.pop_front();
  }

  /// Entries of class `cls` as rows [n, dim], oldest first.
  Tensor<double> class_entries(int cls) const { return stack(buffer(cls), nullptr); }

  /// Entries of every class other than `cls`, class-major, oldest first.
  Tensor<double> negatives(int cls) const {
    buffer(cls);
    std::vector<const std::vector<double>*> rows;
    for (int c = 0; c < num_classes(); ++c)
      if (c != cls)
        for (const auto& e : buffers_[c]) rows.push_back(&e);
    Tensor<double> out({static_cast<int>(rows.size()), dim_});
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r]->begin(), rows[r]->end(), out.data() + r * dim_);
    return out;
  }

 private:
  std::deque<std::vector<double>>& buffer(int cls) {
    if (cls < 0 || cls >= num_classes()) throw std::out_of_range("ClassMemoryBank: unknown class " + std::to_string(cls));
    return buffers_[cls];
  }
  const std::deque<std::vector<double>>& buffer(int cls) const {
    if (cls < 0 || cls >= num_classes()) throw std::out_of_range("ClassMemoryBank: unknown class " + std::to_string(cls));
    return buffers_[cls];
  }
  Tensor<double> stack(const std::deque<std::vector<double>>& b, std::nullptr_t) const {
    Tensor<double> out({static_cast<int>(b.size()), dim_});
    for (std::size_t r = 0; r < b.size(); ++r) std::copy(b[r].begin(), b[r].end(), out.data() + r * dim_);
    return out;
  }

  int capacity_ = 0;
  int dim_ = 0;
  std::vector<std::deque<std::vector<double>>> buffers_;
};

/// Sampled anchors of one class.
struct AnchorSample {
  int cls = 0;
  std::vector<PixelRef> queries;
  int hard = 0, easy = 0;
  std::vector<double> positive;
  Tensor<double> negatives;  // [n_k, dim]
};

/// Per class: up to n_q queries, hard ones first, and n_k negative keys
/// (half from the bank when in-batch keys exist). Draws are without
/// replacement until the candidates run out, then with replacement from both. Classes
/// without any negative candidate are skipped.
template <class T>
std::vector<AnchorSample> sample_anchors(const RepresentationSets& sets, const std::vector<QuerySplit>& splits,
                                         const ClassMemoryBank* bank, const std::vector<Tensor<T>>& reps,
                                         int n_q, int n_k, Rng& rng) {
  if (n_q < 1 || n_k < 1) throw std::invalid_argument("sample_anchors: n_q and n_k must be >= 1");
  if (splits.size() != sets.classes.size()) throw std::invalid_argument("sample_anchors: one split per class");
  std::vector<AnchorSample> out;
  for (std::size_t ci = 0; ci < sets.classes.size(); ++ci) {
    const auto& cs = sets.classes[ci];
    const auto& sp = splits[ci];
    if (cs.queries.empty()) continue;
    const Tensor<double> bank_neg = bank ? bank->negatives(cs.cls) : Tensor<double>({0, sets.dim});
    const int B = bank_neg.rank() == 2 ? bank_neg.dim(0) : 0;
    const int K = static_cast<int>(cs.keys.size());
    if (B + K == 0) continue;

    AnchorSample a;
    a.cls = cs.cls;
    a.positive = cs.positive_key;
    const int nh = static_cast<int>(sp.hard.size()), ne = static_cast<int>(sp.easy.size());
    if (nh >= n_q) {
      for (int i : rng.choose(nh, n_q)) a.queries.push_back(sp.hard[i]);
      a.hard = n_q;
    } else {
      a.queries = sp.hard;
      a.hard = nh;
      const int fill = std::min(ne, n_q - nh);
      for (int i : rng.choose(ne, fill)) a.queries.push_back(sp.easy[i]);
      a.easy = fill;
    }

    const int bank_take = std::min(B, K > 0 ? n_k / 2 : n_k);
    const int batch_take = std::min(K, n_k - bank_take);
    std::vector<std::vector<double>> neg;
    neg.reserve(n_k);
    for (int i : rng.choose(B, bank_take)) neg.emplace_back(bank_neg.row(i).begin(), bank_neg.row(i).end());
    for (int i : rng.choose(K, batch_take)) neg.push_back(pixel_vector(reps[cs.keys[i].image], cs.keys[i].pixel));
    while (static_cast<int>(neg.size()) < n_k) {
      const int j = rng.below(B + K);
      if (j < B) neg.emplace_back(bank_neg.row(j).begin(), bank_neg.row(j).end());
      else neg.push_back(pixel_vector(reps[cs.keys[j - B].image], cs.keys[j - B].pixel));
    }
    a.negatives = Tensor<double>({n_k, sets.dim});
    for (int r = 0; r < n_k; ++r) std::copy(neg[r].begin(), neg[r].end(), a.negatives.data() + static_cast<std::size_t>(r) * sets.dim);
    out.push_back(std::move(a));
  }
  return out;
}

/// Rows of the per-image representation maps at the given pixels, grouped by image.
template <class T>
Var<T> gather_refs(const std::vector<Var<T>>& reps, const std::vector<PixelRef>& refs) {
  std::map<int, std::vector<int>> by_image;
  for (const auto& r : refs) by_image[r.image].push_back(r.pixel);
  std::vector<Var<T>> parts;
  for (auto& [img, pix] : by_image) parts.push_back(gather_pixels(reps.at(img), std::move(pix)));
  return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

template <class T>
struct ContrastClass {
  Var<T> queries;        // [n, m], unit rows
  Tensor<T> positive;    // [m]
  Tensor<T> negatives;   // [n_k, m]
};

/// Mean over classes of the mean over queries of
/// -log( e^{q.k+/tau} / (e^{q.k+/tau} + sum_k- e^{q.k-/tau}) ).
template <class T>
Var<T> anatomical_contrastive_loss(const std::vector<ContrastClass<T>>& classes, T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("anatomical_contrastive_loss: temperature must be > 0");
  if (classes.empty()) return Var<T>::constant(Tensor<T>({1}, T(0)));
  std::vector<Var<T>> terms;
  for (const auto& c : classes) terms.push_back(info_nce(c.queries, c.positive, c.negatives, tau));
  return scale(add_n(terms), T(1) / static_cast<T>(terms.size()));
}

/// G[p,q] = r+_p . r+_q with a zero diagonal; rows of `positives` are the
/// class-mean keys of the present classes.
inline Tensor<double> class_graph(const Tensor<double>& positives) {
  if (positives.rank() != 2 || positives.dim(0) < 2) throw std::invalid_argument("class_graph: need >= 2 classes");
  const int n = positives.dim(0), d = positives.dim(1);
  Tensor<double> g({n, n});
  for (int p = 0; p < n; ++p)
    for (int q = p + 1; q < n; ++q) {
      double s = 0;
      for (int k = 0; k < d; ++k) s += positives.at(p, k) * positives.at(q, k);
      s = std::clamp(s, -1.0, 1.0);
      g.at(p, q) = g.at(q, p) = s;
    }
  return g;
}

/// Symmetric pixelwise KL between T(F(x)) (logits resampled by the spatial
/// part of `r`) and F(T(x)). Pixels outside the image after the transform, or
/// inside a CutMix box, are excluded.
template <class T>
Var<T> equivariance_term(const Var<T>& logits_x, const Var<T>& logits_tx, const TransformRecord& r) {
  const auto map = spatial_sampling_map(r, Interp::bilinear);
  std::vector<unsigned char> mask = map.valid;
  if (r.cutmix) {
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x)
        if (r.cutmix->contains(y, x)) mask[static_cast<std::size_t>(y) * r.width + x] = 0;
  }
  return symmetric_kl_maps(resample(logits_x, map), logits_tx, mask);
}

/// Input-side transform: spatial part, then intensity ops.
inline Image transform_input(const TransformRecord& r, const Image& x) {
  return apply_intensity(apply_spatial(r, x), r.intensity_ops);
}

template <class T>
Var<T> equivariance_loss(const ParamSet<T>& params, const NetSpec& spec, const Image& x, const TransformRecord& r) {
  if (r.cutmix) throw std::invalid_argument("equivariance_loss: record carries a CutMix box without donor");
  if (std::abs(r.determinant()) < 1e-12) throw std::invalid_argument("equivariance_loss: non-invertible transform");
  auto fx = forward(params, spec, to_input<T>(x));
  auto ftx = forward(params, spec, to_input<T>(transform_input(r, x)));
  return equivariance_term(fx.logits, ftx.logits, r);
}

template <class T>
Var<T> nearest_neighbor_loss(const Var<T>& reps, const Tensor<T>& bank, int k) {
  return nearest_neighbor_cosine_loss(reps, bank, k);
}

/// Cross-entropy against teacher pseudo-labels over masked pixels; 0 when the mask is empty.
template <class T>
Var<T> unsup_ce(const Var<T>& logits, std::span<const int> pseudo, std::span<const unsigned char> mask) {
  return softmax_cross_entropy(logits, pseudo, mask);
}

struct FinetuneLambdas {
  double contrast = 0.01;
  double eqv = 1.0;
  double unsup = 1.0;
  double nn = 1.0;
};

struct FinetuneTermValues {
  double sup = 0, contrast = 0, eqv = 0, unsup = 0, nn = 0;
};

inline double finetune_total_loss(const FinetuneTermValues& t, const FinetuneLambdas& l) {
  require_finite(t.sup, "L_sup");
  require_finite(t.contrast, "L_contrast");
  require_finite(t.eqv, "L_eqv");
  require_finite(t.unsup, "L_unsup");
  require_finite(t.nn, "L_nn");
  return t.sup + l.contrast * t.contrast + l.eqv * t.eqv + l.unsup * t.unsup + l.nn * t.nn;
}

struct FinetuneOptions {
  double tau = 0.5;
  double delta_theta = 0.97;
  int n_q = 256;
  int n_k = 512;
  int knn = 5;
  int bank_capacity = 36;
  bool bank_raw_pixels = false;  // store sampled pixel keys instead of class means
  int bank_pixels_per_step = 4;
  bool strong_student = true;    // false: the student also gets a weak view
  FinetuneLambdas lambda;
  AugmentParams augment;

  bool needs_reps() const { return lambda.contrast > 0 || lambda.nn > 0; }
  bool needs_unlabeled() const { return needs_reps() || lambda.eqv > 0 || lambda.unsup > 0; }
};

struct LabeledView {
  Sample2D view;                    // weak view, labels -1 outside the image
  std::vector<double> confidence;   // teacher max-probability (when reps are used)
  bool has_eqv = false;
  Image eqv_input;
  TransformRecord eqv_record;
};

struct UnlabeledView {
  Image weak;
  Image student;
  TransformRecord record;             // weak view -> student view
  std::vector<int> pseudo;            // -1 where undefined
  std::vector<double> confidence;
  std::vector<unsigned char> unsup_mask;
};

struct FinetuneViews {
  std::vector<LabeledView> labeled;
  std::vector<UnlabeledView> unlabeled;
};

namespace detail {

template <class T>
Tensor<double> teacher_probs(const ParamSet<T>& teacher, const NetSpec& spec, const Image& x) {
  auto f = forward(teacher, spec, to_input<T>(x));
  return softmax_channels(f.logits.value()).template cast<double>();
}

inline void argmax_channels(const Tensor<double>& probs, std::vector<int>& label, std::vector<double>& conf) {
  const int c = probs.dim(0);
  const std::size_t hw = probs.size() / c;
  label.assign(hw, 0);
  conf.assign(hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (probs[k * hw + i] > probs[best * hw + i]) best = k;
    label[i] = best;
    conf[i] = probs[best * hw + i];
  }
}

}  // namespace detail

/// All random draws and teacher outputs of one stage-2 step.
template <class T>
FinetuneViews draw_finetune_views(const StudentTeacherPair<T>& pair, const NetSpec& spec,
                                  const std::vector<Sample2D>& labeled, const std::vector<Sample2D>& unlabeled,
                                  const std::vector<Sample2D>& pool, StepStreams& streams,
                                  const FinetuneOptions& opt) {
  FinetuneViews v;
  AugmentParams no_cutmix = opt.augment;
  no_cutmix.cutmix_prob = 0;
  for (auto& s : weak_views(labeled, streams.labeled, opt.augment)) {
    LabeledView lv;
    lv.view = std::move(s);
    if (opt.needs_reps()) {
      std::vector<int> unused;
      detail::argmax_channels(detail::teacher_probs(pair.teacher, spec, lv.view.image), unused, lv.confidence);
    }
    if (opt.lambda.eqv > 0) {
      auto [tv, rec] = strong_chain(lv.view, nullptr, streams.aux, no_cutmix);
      lv.has_eqv = true;
      lv.eqv_input = std::move(tv.image);
      lv.eqv_record = std::move(rec);
    }
    v.labeled.push_back(std::move(lv));
  }
  if (!opt.needs_unlabeled() || unlabeled.empty()) return v;
  if (pool.empty()) throw std::invalid_argument("finetune: unlabeled pool is empty");

  Rng& rng = streams.unlabeled;
  for (const auto& s : unlabeled) {
    UnlabeledView uv;
    Sample2D weak = weak_chain(s, rng, opt.augment).first;
    const Sample2D& donor = pool[rng.below(static_cast<int>(pool.size()))];
    auto [sv, rec] = opt.strong_student ? strong_chain(weak, &donor, rng, opt.augment)
                                        : weak_chain(weak, rng, opt.augment);
    Tensor<double> probs = apply_spatial(rec, detail::teacher_probs(pair.teacher, spec, weak.image));
    std::vector<unsigned char> valid = spatial_valid_mask(rec);
    if (rec.cutmix) {
      probs = apply_cutmix(probs, detail::teacher_probs(pair.teacher, spec, donor.image), *rec.cutmix);
      for (int y = 0; y < rec.height; ++y)
        for (int x = 0; x < rec.width; ++x)
          if (rec.cutmix->contains(y, x)) valid[static_cast<std::size_t>(y) * rec.width + x] = 1;
    }
    detail::argmax_channels(probs, uv.pseudo, uv.confidence);
    uv.unsup_mask.assign(valid.size(), 0);
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (!valid[i]) {
        uv.pseudo[i] = -1;
        uv.confidence[i] = 0.0;
      }
      uv.unsup_mask[i] = valid[i] && uv.confidence[i] > opt.delta_theta;
    }
    uv.weak = std::move(weak.image);
    uv.student = std::move(sv.image);
    uv.record = std::move(rec);
    v.unlabeled.push_back(std::move(uv));
  }
  return v;
}

/// Student forward passes of one step (graph-carrying).
template <class T>
struct StudentPass {
  std::vector<Var<T>> lab_logits, lab_reps, lab_eqv_logits;
  std::vector<Var<T>> unl_logits, unl_reps, unl_weak_logits;
};

template <class T>
StudentPass<T> run_student(const ParamSet<T>& student, const NetSpec& spec, const FinetuneViews& v,
                           const FinetuneOptions& opt) {
  StudentPass<T> p;
  for (const auto& lv : v.labeled) {
    auto f = forward(student, spec, to_input<T>(lv.view.image));
    p.lab_logits.push_back(f.logits);
    if (opt.needs_reps()) p.lab_reps.push_back(representation_head(student, f.features));
    if (lv.has_eqv) p.lab_eqv_logits.push_back(forward(student, spec, to_input<T>(lv.eqv_input)).logits);
  }
  for (const auto& uv : v.unlabeled) {
    auto f = forward(student, spec, to_input<T>(uv.student));
    p.unl_logits.push_back(f.logits);
    if (opt.needs_reps()) p.unl_reps.push_back(representation_head(student, f.features));
    if (opt.lambda.eqv > 0) p.unl_weak_logits.push_back(forward(student, spec, to_input<T>(uv.weak)).logits);
  }
  return p;
}

/// Anchors plus the step's diagnostics; keys are detached student representations.
struct AnchorPlan {
  std::vector<AnchorSample> anchors;
  RepresentationSets sets;
  std::vector<int> easy_counts, hard_counts;  // per class
};

template <class T>
AnchorPlan plan_anchors(const StudentPass<T>& pass, const FinetuneViews& v, const ClassMemoryBank& bank,
                        int num_classes, Rng& rng, const FinetuneOptions& opt) {
  AnchorPlan plan;
  plan.easy_counts.assign(num_classes, 0);
  plan.hard_counts.assign(num_classes, 0);
  if (!opt.needs_reps()) return plan;
  std::vector<Tensor<T>> reps;
  std::vector<std::vector<int>> labels;
  std::vector<const std::vector<double>*> conf;
  for (std::size_t i = 0; i < v.labeled.size(); ++i) {
    reps.push_back(pass.lab_reps[i].value());
    labels.emplace_back(v.labeled[i].view.label->values().begin(), v.labeled[i].view.label->values().end());
    conf.push_back(&v.labeled[i].confidence);
  }
  for (std::size_t i = 0; i < v.unlabeled.size(); ++i) {
    reps.push_back(pass.unl_reps[i].value());
    labels.push_back(v.unlabeled[i].pseudo);
    conf.push_back(&v.unlabeled[i].confidence);
  }
  plan.sets = build_representation_sets(reps, labels, num_classes);
  std::vector<QuerySplit> splits;
  for (const auto& cs : plan.sets.classes) {
    std::vector<double> qc(cs.queries.size());
    for (std::size_t i = 0; i < qc.size(); ++i) qc[i] = (*conf[cs.queries[i].image])[cs.queries[i].pixel];
    splits.push_back(split_easy_hard(cs.queries, qc, opt.delta_theta));
  }
  plan.anchors = sample_anchors(plan.sets, splits, &bank, reps, opt.n_q, opt.n_k, rng);
  for (const auto& a : plan.anchors) {
    plan.easy_counts[a.cls] = a.easy;
    plan.hard_counts[a.cls] = a.hard;
  }
  return plan;
}

template <class T>
struct FinetuneTerms {
  Var<T> sup, contrast, eqv, unsup, nn;
};

template <class T>
Var<T> mean_of(const std::vector<Var<T>>& terms) {
  if (terms.empty()) return Var<T>::constant(Tensor<T>({1}, T(0)));
  return scale(add_n(terms), T(1) / static_cast<T>(terms.size()));
}

/// Loss terms from a student pass; terms whose weight is zero are left empty.
template <class T>
FinetuneTerms<T> finetune_terms(const StudentPass<T>& pass, const FinetuneViews& v, const AnchorPlan& plan,
                                const ClassMemoryBank& bank, const FinetuneOptions& opt) {
  FinetuneTerms<T> t;
  std::vector<Var<T>> sup;
  for (std::size_t i = 0; i < v.labeled.size(); ++i) sup.push_back(supervised_loss(pass.lab_logits[i], *v.labeled[i].view.label));
  t.sup = mean_of(sup);

  if (opt.lambda.unsup > 0 && !v.unlabeled.empty()) {
    std::vector<Var<T>> u;
    for (std::size_t i = 0; i < v.unlabeled.size(); ++i)
      u.push_back(unsup_ce<T>(pass.unl_logits[i], v.unlabeled[i].pseudo, v.unlabeled[i].unsup_mask));
    t.unsup = mean_of(u);
  }
  if (opt.lambda.eqv > 0) {
    std::vector<Var<T>> e;
    for (std::size_t i = 0; i < v.labeled.size(); ++i)
      e.push_back(equivariance_term(pass.lab_logits[i], pass.lab_eqv_logits[i], v.labeled[i].eqv_record));
    for (std::size_t i = 0; i < v.unlabeled.size(); ++i)
      e.push_back(equivariance_term(pass.unl_weak_logits[i], pass.unl_logits[i], v.unlabeled[i].record));
    t.eqv = mean_of(e);
  }
  if (opt.needs_reps()) {
    std::vector<Var<T>> reps = pass.lab_reps;
    reps.insert(reps.end(), pass.unl_reps.begin(), pass.unl_reps.end());
    std::vector<ContrastClass<T>> classes;
    std::vector<Var<T>> nn;
    for (const auto& a : plan.anchors) {
      ContrastClass<T> c;
      c.queries = gather_refs(reps, a.queries);
      c.positive = Tensor<double>({static_cast<int>(a.positive.size())}, a.positive).template cast<T>();
      c.negatives = a.negatives.template cast<T>();
      if (opt.lambda.nn > 0 && bank.size(a.cls) > 0) {
        nn.push_back(nearest_neighbor_loss(c.queries, bank.class_entries(a.cls).template cast<T>(), opt.knn));
      }
      classes.push_back(std::move(c));
    }
    if (opt.lambda.contrast > 0) t.contrast = anatomical_contrastive_loss(classes, static_cast<T>(opt.tau));
    if (opt.lambda.nn > 0) t.nn = mean_of(nn);
  }
  return t;
}

/// L_sup + sum of lambda-weighted auxiliary terms; aborts on a non-finite term.
template <class T>
Var<T> combine_finetune_terms(const FinetuneTerms<T>& t, const FinetuneLambdas& l) {
  require_finite(t.sup.item(), "L_sup");
  std::vector<Var<T>> parts{t.sup};
  auto add_term = [&](const Var<T>& v, double w, const char* name) {
    if (!v.valid() || !(w > 0)) return;
    require_finite(v.item(), name);
    parts.push_back(scale(v, static_cast<T>(w)));
  };
  add_term(t.contrast, l.contrast, "L_contrast");
  add_term(t.eqv, l.eqv, "L_eqv");
  add_term(t.unsup, l.unsup, "L_unsup");
  add_term(t.nn, l.nn, "L_nn");
  return parts.size() == 1 ? parts[0] : add_n(parts);
}

struct FinetuneLoss {
  long long step = 0;
  double sup = 0, contrast = 0, eqv = 0, unsup = 0, nn = 0, total = 0, lr = 0;
  double graph_mean = std::numeric_limits<double>::quiet_NaN();  // mean off-diagonal of G
  std::vector<int> easy_counts, hard_counts;
};

/// One stage-2 step: all five terms, SGD on the student, EMA into the
/// teacher, then the step's class-mean keys are pushed into the bank.
template <class T>
FinetuneLoss finetune_step(TrainState<T>& st, ClassMemoryBank& bank, const std::vector<Sample2D>& labeled,
                           const std::vector<Sample2D>& unlabeled, const std::vector<Sample2D>& pool, Rng& rng,
                           const FinetuneOptions& opt) {
  if (labeled.empty()) throw std::invalid_argument("finetune_step: empty labeled batch");
  StepStreams streams(rng);
  const auto views = draw_finetune_views(st.pair, st.spec, labeled, unlabeled, pool, streams, opt);
  auto pass = run_student(st.pair.student, st.spec, views, opt);
  auto plan = plan_anchors(pass, views, bank, st.spec.classes, streams.aux, opt);
  auto terms = finetune_terms(pass, views, plan, bank, opt);
  Var<T> total = combine_finetune_terms(terms, opt.lambda);

  FinetuneLoss out;
  out.step = st.step;
  out.lr = st.optimizer.current_lr();
  out.sup = terms.sup.item();
  if (terms.contrast.valid()) out.contrast = terms.contrast.item();
  if (terms.eqv.valid()) out.eqv = terms.eqv.item();
  if (terms.unsup.valid()) out.unsup = terms.unsup.item();
  if (terms.nn.valid()) out.nn = terms.nn.item();
  out.total = total.item();
  out.easy_counts = plan.easy_counts;
  out.hard_counts = plan.hard_counts;
  if (plan.sets.classes.size() >= 2) {
    const int n = static_cast<int>(plan.sets.classes.size());
    Tensor<double> pos({n, plan.sets.dim});
    for (int i = 0; i < n; ++i)
      std::copy(plan.sets.classes[i].positive_key.begin(), plan.sets.classes[i].positive_key.end(),
                pos.data() + static_cast<std::size_t>(i) * plan.sets.dim);
    const auto g = class_graph(pos);
    double s = 0;
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q)
        if (p != q) s += g.at(p, q);
    out.graph_mean = s / (n * (n - 1));
  }

  backward(total);
  st.optimizer.step(st.pair.student);
  ema_update(st.pair);
  ++st.step;

  for (const auto& a : plan.anchors) {
    if (!opt.bank_raw_pixels) {
      bank.push(a.cls, a.positive);
      continue;
    }
    std::vector<Tensor<T>> reps;
    for (const auto& r : pass.lab_reps) reps.push_back(r.value());
    for (const auto& r : pass.unl_reps) reps.push_back(r.value());
    const int n = std::min<int>(opt.bank_pixels_per_step, static_cast<int>(a.queries.size()));
    for (int i : streams.aux.choose(static_cast<int>(a.queries.size()), n)) {
      bank.push(a.cls, pixel_vector(reps[a.queries[i].image], a.queries[i].pixel));
    }
  }
  return out;
}

}  // namespace mona
