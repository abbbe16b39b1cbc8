#pragma once

// Shared fixtures for the unit and acceptance suites: a 16x16 toy network in
// double precision, fixed training views, and a central-difference checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mona/acr.hpp"
#include "mona/datakit.hpp"
#include "mona/nets.hpp"
#include "mona/pretrain.hpp"

namespace mona::testing {

inline NetSpec tiny_spec() {
  NetSpec s;
  s.classes = 4;
  s.image_size = 16;
  s.base_width = 8;
  s.levels = 3;
  s.m_embed = 16;
  s.head_hidden = 24;
  return s;
}

inline std::vector<Sample2D> tiny_samples(std::uint64_t seed, int patients = 6) {
  ZipfSpec z;
  z.height = z.width = 16;
  z.num_patients = patients;
  z.slices_per_patient = 2;
  z.foreground_fraction = 0.35;
  z.seed = seed;
  return generate_synthetic(z);
}

inline Sample2D strip_label(Sample2D s) {
  s.label.reset();
  return s;
}

struct ProbeResult {
  std::string param;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_err = 0;
};

struct GradCheckResult {
  std::vector<ProbeResult> probes;
  double max_rel_err = 0;
  double loss = 0;
};

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

using LossFn = std::function<Var<double>(const ParamSet<double>&)>;

/// Compares backprop against central differences on `probes` random scalars
/// drawn from the tensors that receive a nonzero gradient.
inline GradCheckResult grad_check(const ParamSet<double>& params, const LossFn& loss, int probes, Rng& rng,
                                  double h = 1e-5) {
  params.zero_grad();
  auto L = loss(params);
  backward(L);
  GradCheckResult out;
  out.loss = L.item();
  std::vector<std::size_t> live;
  std::vector<Tensor<double>> grads;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params.vars()[i];
    grads.push_back(v.grad().size() ? v.grad() : Tensor<double>::zeros_like(v.value()));
    bool any = false;
    for (double g : grads.back().values()) any = any || g != 0.0;
    if (any) live.push_back(i);
  }
  if (live.empty()) return out;
  for (int p = 0; p < probes; ++p) {
    const std::size_t ti = live[rng.below(static_cast<int>(live.size()))];
    auto var = params.vars()[ti];
    const std::size_t e = rng.below(static_cast<std::uint64_t>(var.size()));
    const double w0 = var.value()[e];
    var.mutable_value()[e] = w0 + h;
    const double lp = loss(params).item();
    var.mutable_value()[e] = w0 - h;
    const double lm = loss(params).item();
    var.mutable_value()[e] = w0;
    ProbeResult r;
    r.param = params.names()[ti];
    r.index = e;
    r.analytic = grads[ti][e];
    r.numeric = (lp - lm) / (2 * h);
    r.rel_err = relative_error(r.analytic, r.numeric);
    out.max_rel_err = std::max(out.max_rel_err, r.rel_err);
    out.probes.push_back(r);
  }
  params.zero_grad();
  return out;
}

/// Fixed draws for every differentiable loss, built once so the losses are
/// smooth functions of the student weights.
struct LossSuite {
  NetSpec spec;
  ParamSet<double> student;
  StudentTeacherPair<double> pair;
  std::vector<Sample2D> labeled, unlabeled;
  PretrainViews pre_views;
  PretrainOptions pre_opt;
  FinetuneViews ft_views;
  FinetuneOptions ft_opt;
  ClassMemoryBank bank{4, 6};
  AnchorPlan plan;

  std::map<std::string, LossFn> losses() const {
    std::map<std::string, LossFn> m;
    m["L_sup"] = [this](const ParamSet<double>& p) {
      std::vector<Var<double>> terms;
      for (const auto& s : labeled) terms.push_back(supervised_loss(forward(p, spec, to_input<double>(s.image)).logits, *s.label));
      return add_n(terms);
    };
    m["L_inst"] = [this](const ParamSet<double>& p) {
      StudentTeacherPair<double> pr{p, pair.teacher, pair.momentum};
      auto t = pretrain_losses(pr, spec, pre_views, pre_opt);
      return add(t.inst_global, t.inst_local);
    };
    auto ft = [this](const ParamSet<double>& p) {
      auto pass = run_student(p, spec, ft_views, ft_opt);
      return finetune_terms(pass, ft_views, plan, bank, ft_opt);
    };
    m["L_contrast"] = [ft](const ParamSet<double>& p) { return ft(p).contrast; };
    m["L_eqv"] = [ft](const ParamSet<double>& p) { return ft(p).eqv; };
    m["L_unsup"] = [ft](const ParamSet<double>& p) { return ft(p).unsup; };
    m["L_nn"] = [ft](const ParamSet<double>& p) { return ft(p).nn; };
    return m;
  }
};

inline LossSuite make_loss_suite(std::uint64_t seed) {
  LossSuite s;
  s.spec = tiny_spec();
  Rng rng(seed);
  s.student = init_params<double>(s.spec, rng);
  s.pair = StudentTeacherPair<double>::from_student(s.student, 0.99);
  // A teacher that differs from the student keeps the KL terms away from 0.
  Rng tr = rng.split();
  for (const auto& v : s.pair.teacher.vars()) {
    auto& t = v.ptr()->value;
    for (auto& x : t.values()) x += 0.05 * tr.normal();
  }
  auto data = tiny_samples(seed + 17);
  s.labeled = {data[0], data[3]};
  std::vector<Sample2D> pool;
  for (std::size_t i = 4; i < data.size(); ++i) pool.push_back(strip_label(data[i]));
  s.unlabeled = {pool[0], pool[2]};

  s.pre_opt.mined_views = 4;
  s.pre_opt.local_crops = 2;
  s.pre_opt.local_crop_size = 8;
  {
    Rng r = rng.split();
    StepStreams st(r);
    s.pre_views = draw_pretrain_views(s.labeled, s.unlabeled, pool, st, s.pre_opt, s.spec.image_size);
  }

  s.ft_opt.n_q = 6;
  s.ft_opt.n_k = 10;
  s.ft_opt.knn = 2;
  s.ft_opt.delta_theta = 0.0;  // every valid pseudo-label counts
  s.ft_opt.lambda = {1.0, 1.0, 1.0, 1.0};
  s.bank = ClassMemoryBank(s.spec.classes, 6);
  Rng br = rng.split();
  for (int c = 0; c < s.spec.classes; ++c)
    for (int k = 0; k < 3; ++k) {
      std::vector<double> v(s.spec.rep_dim());
      for (auto& x : v) x = br.normal();
      normalize_in_place(v);
      s.bank.push(c, v);
    }
  {
    Rng r = rng.split();
    StepStreams st(r);
    s.ft_views = draw_finetune_views(s.pair, s.spec, s.labeled, s.unlabeled, pool, st, s.ft_opt);
    auto pass = run_student(s.student, s.spec, s.ft_views, s.ft_opt);
    s.plan = plan_anchors(pass, s.ft_views, s.bank, s.spec.classes, st.aux, s.ft_opt);
  }
  return s;
}

}  // namespace mona::testing
