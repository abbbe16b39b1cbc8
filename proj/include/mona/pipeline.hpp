#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/acr.hpp"
#include "mona/checkpoint.hpp"
#include "mona/config.hpp"
#include "mona/datakit.hpp"
#include "mona/metrics.hpp"
#include "mona/optim.hpp"
#include "mona/pretrain.hpp"

namespace mona {

/// Training runs in single precision; gradient checks use double.
using Real = float;

inline std::vector<Sample2D> load_or_generate(const TrainConfig& c) {
  return c.data.root.empty() ? generate_synthetic(c.data.synth) : load_dataset(c.data.root);
}

/// Patient split; the labelled patients depend on the run seed.
inline DatasetSplit prepare_split(const TrainConfig& c) {
  return split_by_patient(load_or_generate(c), c.data.label_ratio, c.data.val_frac, c.data.test_frac, c.seed);
}

/// Cycles through a shuffled copy of a sample list, reshuffling each pass.
class BatchSampler {
 public:
  BatchSampler(const std::vector<Sample2D>& source, Rng rng) : src_(&source), rng_(rng) {}

  std::vector<Sample2D> next(int k) {
    std::vector<Sample2D> out;
    if (src_->empty() || k <= 0) return out;
    for (int i = 0; i < k; ++i) {
      if (pos_ >= order_.size()) {
        order_.resize(src_->size());
        for (std::size_t j = 0; j < order_.size(); ++j) order_[j] = static_cast<int>(j);
        rng_.shuffle(order_);
        pos_ = 0;
      }
      out.push_back((*src_)[order_[pos_++]]);
    }
    return out;
  }

 private:
  const std::vector<Sample2D>* src_;
  Rng rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

/// One epoch = one pass over the unlabelled pool (or the labelled set when
/// there is no unlabelled data).
inline int steps_per_epoch(const TrainConfig& c, const DatasetSplit& s) {
  const auto& o = c.optim;
  if (!s.unlabeled.empty() && o.batch_unlabeled > 0) {
    return static_cast<int>((s.unlabeled.size() + o.batch_unlabeled - 1) / o.batch_unlabeled);
  }
  return static_cast<int>((s.labeled.size() + o.batch_labeled - 1) / o.batch_labeled);
}

/// Independent streams for initialisation and each stage.
struct RunStreams {
  Rng init, pretrain, finetune;
  explicit RunStreams(std::uint64_t seed) {
    Rng root(seed);
    init = root.split();
    pretrain = root.split();
    finetune = root.split();
  }
};

inline TrainState<Real> initial_state(const TrainConfig& c) {
  RunStreams rs(c.seed);
  const NetSpec spec = net_spec(c);
  return TrainState<Real>::create(spec, init_params<Real>(spec, rs.init), c.ema_momentum, c.optim.sgd);
}

/// Student/teacher restored from a checkpoint; the optimiser starts fresh.
inline TrainState<Real> state_from_checkpoint(const TrainConfig& c, const Checkpoint& ck) {
  auto st = initial_state(c);
  auto student = params_from_checkpoint(ck, "student.", st.pair.student, true);
  auto teacher = params_from_checkpoint(ck, "teacher.", st.pair.student, false);
  st.pair.student = std::move(student);
  st.pair.teacher = std::move(teacher);
  st.optimizer = Sgd<Real>(st.pair.student, c.optim.sgd);
  return st;
}

using PretrainLogger = std::function<void(const PretrainLoss&)>;
using FinetuneLogger = std::function<void(const FinetuneLoss&)>;

inline void run_pretrain(const TrainConfig& c, const DatasetSplit& split, TrainState<Real>& st,
                         const PretrainLogger& log = {}) {
  RunStreams rs(c.seed);
  Rng& rng = rs.pretrain;
  BatchSampler lab(split.labeled, rng.split());
  BatchSampler unl(split.unlabeled, rng.split());
  const auto opt = c.pretrain_options();
  const int steps = steps_per_epoch(c, split) * c.pretrain_epochs;
  for (int s = 0; s < steps; ++s) {
    const auto lb = lab.next(c.optim.batch_labeled);
    const auto ub = unl.next(c.optim.batch_unlabeled);
    const auto loss = pretrain_step(st, lb, ub, split.unlabeled, rng, opt);
    if (log) log(loss);
  }
}

inline ClassMemoryBank make_bank(const TrainConfig& c) {
  return ClassMemoryBank(c.data.synth.num_classes(), c.finetune.bank_capacity);
}

/// Stage two starts with a fresh optimiser and the teacher reset to the student.
inline void run_finetune(const TrainConfig& c, const DatasetSplit& split, TrainState<Real>& st,
                         ClassMemoryBank& bank, const FinetuneLogger& log = {}) {
  st.pair.teacher = st.pair.student.clone(false);
  st.optimizer = Sgd<Real>(st.pair.student, c.optim.sgd);
  RunStreams rs(c.seed);
  Rng& rng = rs.finetune;
  BatchSampler lab(split.labeled, rng.split());
  BatchSampler unl(split.unlabeled, rng.split());
  const auto opt = c.finetune_options();
  const int steps = steps_per_epoch(c, split) * c.finetune_epochs;
  for (int s = 0; s < steps; ++s) {
    const auto lb = lab.next(c.optim.batch_labeled);
    const auto ub = unl.next(c.optim.batch_unlabeled);
    const auto loss = finetune_step(st, bank, lb, ub, split.unlabeled, rng, opt);
    if (log) log(loss);
  }
}

/// Supervised-only control at the same budget: no instance losses in stage
/// one, every auxiliary weight zero in stage two.
inline TrainConfig supervised_baseline(TrainConfig c) {
  c.pretrain.instance_losses = false;
  c.finetune.lambda = {0.0, 0.0, 0.0, 0.0};
  return c;
}

/// Both stages back to back, then the student scored on the test split.
inline EvalReport train_and_evaluate(const TrainConfig& c, const DatasetSplit& split) {
  auto st = initial_state(c);
  run_pretrain(c, split, st);
  auto bank = make_bank(c);
  run_finetune(c, split, st, bank);
  return evaluate(st.pair.student, st.spec, split.test);
}

}  // namespace mona
