#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mona/losses.hpp"
#include "mona/ops.hpp"
#include "mona/rng.hpp"

namespace mona {

/// Layer sizing of the segmentation network and its training heads.
struct NetSpec {
  int in_channels = 1;
  int classes = 4;
  int image_size = 64;
  int base_width = 8;
  int levels = 3;
  int m_embed = 512;
  int m_rep = 0;  // 0 -> same as m_embed
  int head_hidden = 512;

  int rep_dim() const { return m_rep > 0 ? m_rep : m_embed; }
  int width(int level) const { return base_width << level; }

  void validate() const {
    if (classes < 2) throw std::invalid_argument("net: classes must be >= 2");
    if (levels < 2) throw std::invalid_argument("net: levels must be >= 2");
    if (base_width < 1 || m_embed < 1 || head_hidden < 1 || m_rep < 0) {
      throw std::invalid_argument("net: widths must be positive");
    }
    if (image_size <= 0 || image_size % (1 << (levels - 1)) != 0) {
      throw std::invalid_argument("net: image_size must be divisible by 2^(levels-1)");
    }
  }
};

/// Named parameter tensors in a fixed registration order.
template <class T>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<T> value, bool requires_grad) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    index_[name] = vars_.size();
    names_.push_back(name);
    vars_.push_back(Var<T>::leaf(std::move(value), requires_grad));
  }

  const Var<T>& operator[](std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + std::string(name));
    return vars_[it->second];
  }
  bool contains(std::string_view name) const { return index_.count(std::string(name)) > 0; }

  std::size_t size() const noexcept { return vars_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Var<T>>& vars() const noexcept { return vars_; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
  }

  void zero_grad() const {
    for (const auto& v : vars_) v.zero_grad();
  }

  /// Deep copy with fresh leaves.
  ParamSet clone(bool requires_grad) const {
    ParamSet out;
    for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].value(), requires_grad);
    return out;
  }

  template <class U>
  ParamSet<U> cast(bool requires_grad) const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
      out.add(names_[i], vars_[i].value().template cast<U>(), requires_grad);
    }
    return out;
  }

  bool same_layout(const ParamSet& o) const {
    if (names_ != o.names_) return false;
    for (std::size_t i = 0; i < vars_.size(); ++i)
      if (vars_[i].shape() != o.vars_[i].shape()) return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Var<T>> vars_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <class T>
void add_conv(ParamSet<T>& p, const std::string& name, int cin, int cout, int k, Rng& rng) {
  const double std = std::sqrt(2.0 / (cin * k * k));
  Tensor<T> w({cout, cin, k, k});
  for (auto& v : w.values()) v = static_cast<T>(rng.normal() * std);
  p.add(name + ".w", std::move(w), true);
  p.add(name + ".b", Tensor<T>({cout}), true);
}

template <class T>
void add_linear(ParamSet<T>& p, const std::string& name, int in, int out, Rng& rng) {
  const double std = std::sqrt(2.0 / in);
  Tensor<T> w({out, in});
  for (auto& v : w.values()) v = static_cast<T>(rng.normal() * std);
  p.add(name + ".w", std::move(w), true);
  p.add(name + ".b", Tensor<T>({out}), true);
}

template <class T>
Var<T> conv(const ParamSet<T>& p, const std::string& name, const Var<T>& x) {
  return conv2d(x, p[name + ".w"], p[name + ".b"]);
}

template <class T>
Var<T> dense(const ParamSet<T>& p, const std::string& name, const Var<T>& x) {
  return linear(x, p[name + ".w"], p[name + ".b"]);
}

}  // namespace detail

/// Encoder/decoder backbone plus global projection, predictor, local
/// projection and representation heads. He-normal weights, zero biases.
template <class T>
ParamSet<T> init_params(const NetSpec& spec, Rng& rng) {
  spec.validate();
  ParamSet<T> p;
  const int levels = spec.levels;
  int cin = spec.in_channels;
  for (int l = 0; l < levels; ++l) {
    const int w = spec.width(l);
    detail::add_conv(p, "enc" + std::to_string(l) + ".conv1", cin, w, 3, rng);
    detail::add_conv(p, "enc" + std::to_string(l) + ".conv2", w, w, 3, rng);
    cin = w;
  }
  for (int l = levels - 2; l >= 0; --l) {
    const int w = spec.width(l);
    detail::add_conv(p, "dec" + std::to_string(l) + ".conv1", spec.width(l + 1) + w, w, 3, rng);
    detail::add_conv(p, "dec" + std::to_string(l) + ".conv2", w, w, 3, rng);
  }
  detail::add_conv(p, "seg_out", spec.width(0), spec.classes, 1, rng);

  const int bottleneck = spec.width(levels - 1);
  detail::add_linear(p, "proj.fc1", bottleneck, spec.head_hidden, rng);
  detail::add_linear(p, "proj.fc2", spec.head_hidden, spec.m_embed, rng);
  detail::add_linear(p, "pred.fc1", spec.m_embed, spec.head_hidden, rng);
  detail::add_linear(p, "pred.fc2", spec.head_hidden, spec.m_embed, rng);
  detail::add_conv(p, "local.pix", spec.classes, spec.m_embed, 1, rng);
  detail::add_linear(p, "local.fc", spec.m_embed, spec.m_embed, rng);

  const int m = spec.rep_dim();
  for (int l = 0; l < levels; ++l) {
    detail::add_conv(p, "rep.lateral" + std::to_string(l), spec.width(l), m, 1, rng);
  }
  detail::add_conv(p, "rep.fuse1", m, m, 1, rng);
  detail::add_conv(p, "rep.fuse2", m, m, 1, rng);
  return p;
}

template <class T>
struct SegOutput {
  Var<T> logits;                // [classes,H,W]
  std::vector<Var<T>> features;  // per level, full resolution first
  Var<T> global;                // [1, bottleneck width]
};

/// Backbone forward. `image` is [1,H,W] (or [H,W]) with values in [0,1].
template <class T>
SegOutput<T> forward(const ParamSet<T>& p, const NetSpec& spec, const Tensor<T>& image) {
  Tensor<T> input = image.rank() == 2 ? image.reshaped({1, image.dim(0), image.dim(1)}) : image;
  if (input.rank() != 3 || input.dim(0) != spec.in_channels || input.dim(1) != spec.image_size ||
      input.dim(2) != spec.image_size) {
    throw std::invalid_argument("forward: image shape " + Tensor<T>::shape_string(image.shape()) +
                                " does not match configured size " +
                                std::to_string(spec.image_size));
  }
  using detail::conv;
  const int levels = spec.levels;
  std::vector<Var<T>> skips;
  Var<T> x = Var<T>::constant(std::move(input));
  for (int l = 0; l < levels; ++l) {
    if (l > 0) x = avg_pool2(x);
    const std::string n = "enc" + std::to_string(l);
    x = silu(conv(p, n + ".conv1", x));
    x = silu(conv(p, n + ".conv2", x));
    skips.push_back(x);
  }
  SegOutput<T> out;
  out.global = global_avg_pool(x);
  std::vector<Var<T>> feats(levels);
  feats[levels - 1] = x;
  for (int l = levels - 2; l >= 0; --l) {
    const std::string n = "dec" + std::to_string(l);
    x = concat_channels(upsample2(x), skips[l]);
    x = silu(conv(p, n + ".conv1", x));
    x = silu(conv(p, n + ".conv2", x));
    feats[l] = x;
  }
  out.logits = conv(p, "seg_out", x);
  out.features = std::move(feats);
  return out;
}

/// Global projection head h: [N,bottleneck] -> [N,m_embed] (unnormalised).
template <class T>
Var<T> project_global(const ParamSet<T>& p, const Var<T>& global) {
  return detail::dense(p, "proj.fc2", silu(detail::dense(p, "proj.fc1", global)));
}

/// Secondary predictor h' applied on top of a projection.
template <class T>
Var<T> predict(const ParamSet<T>& p, const Var<T>& v) {
  return detail::dense(p, "pred.fc2", silu(detail::dense(p, "pred.fc1", v)));
}

/// FPN-style fusion of the multiscale features into unit-norm per-pixel
/// representations [m_rep,H,W].
template <class T>
Var<T> representation_head(const ParamSet<T>& p, const std::vector<Var<T>>& features) {
  using detail::conv;
  const int levels = static_cast<int>(features.size());
  Var<T> top = conv(p, "rep.lateral" + std::to_string(levels - 1), features[levels - 1]);
  for (int l = levels - 2; l >= 0; --l) {
    top = add(conv(p, "rep.lateral" + std::to_string(l), features[l]), upsample2(top));
  }
  Var<T> fused = conv(p, "rep.fuse2", silu(conv(p, "rep.fuse1", top)));
  return l2_normalize_channels(fused);
}

struct CropWindow {
  int y = 0;
  int x = 0;
  int size = 0;
};

inline std::vector<CropWindow> random_crop_windows(int image_size, int count, int size, Rng& rng) {
  if (size > image_size || size < 1 || count < 1) {
    throw std::invalid_argument("local crops: size must be in [1, image_size] and count >= 1");
  }
  std::vector<CropWindow> out(count);
  for (auto& w : out) {
    w.size = size;
    w.y = rng.below(image_size - size + 1);
    w.x = rng.below(image_size - size + 1);
  }
  return out;
}

/// Local projection: each crop of the logit map is projected pixelwise,
/// pooled, projected again and normalised -> [n_crops, m_embed]. With
/// `with_predictor` the student's predictor h' is applied before normalising.
template <class T>
Var<T> local_project(const ParamSet<T>& p, const Var<T>& logits,
                     const std::vector<CropWindow>& windows, bool with_predictor) {
  std::vector<Var<T>> rows;
  rows.reserve(windows.size());
  for (const auto& w : windows) {
    Var<T> c = crop(logits, w.y, w.x, w.size, w.size);
    Var<T> pooled = global_avg_pool(silu(detail::conv(p, "local.pix", c)));
    rows.push_back(detail::dense(p, "local.fc", pooled));
  }
  Var<T> v = concat_rows(rows);
  if (with_predictor) v = predict(p, v);
  return l2_normalize_rows(v);
}

enum class EmbeddingScope { global, local };
enum class EmbeddingSource { student_aug, teacher_aug, teacher_mined };

template <class T>
struct EmbeddingBatch {
  Var<T> vectors;  // [B, m_embed], unit rows
  EmbeddingScope scope = EmbeddingScope::global;
  EmbeddingSource source = EmbeddingSource::student_aug;
};

/// Student parameters (trainable) and their momentum teacher.
template <class T>
struct StudentTeacherPair {
  ParamSet<T> student;
  ParamSet<T> teacher;
  double momentum = 0.99;

  static StudentTeacherPair from_student(ParamSet<T> student, double momentum) {
    StudentTeacherPair pair;
    pair.teacher = student.clone(false);
    pair.student = std::move(student);
    pair.momentum = momentum;
    return pair;
  }
};

/// teacher <- t * teacher + (1 - t) * student, elementwise.
template <class T>
void ema_update(StudentTeacherPair<T>& pair) {
  if (!pair.student.same_layout(pair.teacher)) {
    throw std::invalid_argument("ema_update: student/teacher layout mismatch");
  }
  const T t = static_cast<T>(pair.momentum);
  if (!(pair.momentum >= 0.0 && pair.momentum < 1.0)) {
    throw std::invalid_argument("ema_update: momentum must be in [0,1)");
  }
  for (std::size_t i = 0; i < pair.student.size(); ++i) {
    const auto& s = pair.student.vars()[i].value();
    auto& tv = pair.teacher.vars()[i].ptr()->value;
    // Entries already equal to the student are left bitwise untouched.
    for (std::size_t j = 0; j < tv.size(); ++j)
      if (tv[j] != s[j]) tv[j] = t * tv[j] + (T(1) - t) * s[j];
  }
}

}  // namespace mona
