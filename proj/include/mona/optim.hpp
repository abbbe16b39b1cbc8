#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mona/nets.hpp"

namespace mona {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int lr_step = 2500;  // lr is multiplied by lr_decay every lr_step iterations
  double lr_decay = 0.1;
  double clip_norm = 0;  // global gradient-norm cap; 0 disables
};

/// Momentum SGD with coupled weight decay:
/// v <- mu v + (g + wd w);  w <- w - lr v.
template <class T>
class Sgd {
 public:
  Sgd() = default;
  Sgd(const ParamSet<T>& params, SgdConfig cfg) : cfg_(cfg) {
    velocity_.reserve(params.size());
    for (const auto& v : params.vars()) velocity_.emplace_back(v.shape());
  }

  double lr_at(long long iteration) const {
    if (cfg_.lr_step <= 0) return cfg_.lr;
    return cfg_.lr * std::pow(cfg_.lr_decay, static_cast<double>(iteration / cfg_.lr_step));
  }
  double current_lr() const { return lr_at(iteration_); }
  long long iteration() const { return iteration_; }
  void set_iteration(long long it) { iteration_ = it; }
  const std::vector<Tensor<T>>& velocity() const { return velocity_; }
  std::vector<Tensor<T>>& velocity() { return velocity_; }

  /// Applies one update from the accumulated gradients, then clears them.
  void step(ParamSet<T>& params) {
    if (velocity_.size() != params.size()) throw std::invalid_argument("Sgd: parameter count changed");
    const T lr = static_cast<T>(current_lr());
    const T mu = static_cast<T>(cfg_.momentum), wd = static_cast<T>(cfg_.weight_decay);
    const T gs = static_cast<T>(grad_scale(params));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& var = params.vars()[i];
      if (!var.requires_grad()) continue;
      auto& w = var.ptr()->value;
      const auto& g = var.grad();
      const bool has_grad = g.size() == w.size();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const T gj = (has_grad ? gs * g[j] : T(0)) + wd * w[j];
        v[j] = mu * v[j] + gj;
        w[j] -= lr * v[j];
      }
    }
    params.zero_grad();
    ++iteration_;
  }

  /// Factor that brings the global gradient norm down to clip_norm.
  double grad_scale(const ParamSet<T>& params) const {
    if (cfg_.clip_norm <= 0) return 1.0;
    double sq = 0;
    for (const auto& var : params.vars()) {
      if (!var.requires_grad()) continue;
      for (T x : var.grad().values()) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    return norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;
  }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<T>> velocity_;
  long long iteration_ = 0;
};

/// Everything a training stage mutates: parameters, optimizer state, step count.
template <class T>
struct TrainState {
  NetSpec spec;
  StudentTeacherPair<T> pair;
  Sgd<T> optimizer;
  long long step = 0;

  static TrainState create(const NetSpec& spec, ParamSet<T> student, double momentum, SgdConfig sgd) {
    TrainState s;
    s.spec = spec;
    s.pair = StudentTeacherPair<T>::from_student(std::move(student), momentum);
    s.optimizer = Sgd<T>(s.pair.student, sgd);
    return s;
  }
};

}  // namespace mona
