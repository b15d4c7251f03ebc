#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ndcr/datagen.hpp"
#include "ndcr/model/model.hpp"

namespace ndcr {

// 64-bit central finite-difference verification of the analytic gradients,
// module by module. Each module is exercised through a loss that depends on
// its outputs; every parameter the loss touches is spot-checked at randomly
// sampled coordinates.

struct GradCheckReport {
  std::string module;
  int seeds = 0;
  int coords = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};

namespace detail {

using LossFn =
    std::function<Var(Graph<double>&, const Model<double>&, const Instance&, const Forward&)>;

// The negational feedback loss stops gradients through the positive score
// distribution, so its analytic gradient is the partial derivative with the
// positive scores held fixed. Rebuilding the hinged KL against the *baseline*
// positive scores (fed in as constants) makes finite differences compute that
// same partial derivative.
inline Var frozen_neg_loss(Graph<double>& g, const Forward& f, const Tensor<double>& pp0,
                           double theta) {
  Var neg = -1;
  for (int z = 0; z < f.M; ++z) {
    Var pn = g.slice_rows(f.p_n, z, z + 1);
    Tensor<double> row(1, pp0.cols);
    for (int c = 0; c < pp0.cols; ++c) row.at(0, c) = pp0.at(z, c);
    Var pp = g.input(std::move(row));
    Var kl = g.sum_all(g.mul(g.softmax(pn, 1), g.sub(g.log_softmax(pn), g.log_softmax(pp))));
    Var term = g.relu(g.add_const(g.scale(kl, -1.0), theta));
    neg = (neg < 0) ? term : g.add(neg, term);
  }
  return neg;
}

inline double eval_loss(const Model<double>& model, const Instance& inst, const LossFn& loss_fn) {
  Graph<double> g;
  Forward f = model.forward(g, inst, inst.count);
  Var l = loss_fn(g, model, inst, f);
  return g.value(l).data[0];
}

// Max relative error over sampled coordinates for one (model seed, instance).
inline double check_once(Model<double>& model, const Instance& inst, const LossFn& loss_fn,
                         int coords_per_param, Rng& rng, int* coords_out) {
  std::vector<std::pair<std::string, Tensor<double>>> analytic;
  {
    Graph<double> g;
    Forward f = model.forward(g, inst, inst.count);
    Var l = loss_fn(g, model, inst, f);
    g.backward(l);
    for (const auto& [name, var] : g.params()) analytic.emplace_back(name, g.grad(var));
  }
  double worst = 0.0;
  const double eps = 1e-5;
  for (const auto& [name, grad] : analytic) {
    Tensor<double>& value = model.store().get(name);
    const int n = static_cast<int>(value.size());
    const int samples = std::min(coords_per_param, n);
    for (int s = 0; s < samples; ++s) {
      const size_t i = static_cast<size_t>(rng.next_below(static_cast<uint64_t>(n)));
      const double saved = value.data[i];
      value.data[i] = saved + eps;
      const double up = eval_loss(model, inst, loss_fn);
      value.data[i] = saved - eps;
      const double dn = eval_loss(model, inst, loss_fn);
      value.data[i] = saved;
      const double fd = (up - dn) / (2.0 * eps);
      const double an = grad.data[i];
      const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
      worst = std::max(worst, rel);
      if (coords_out) ++*coords_out;
    }
  }
  return worst;
}

}  // namespace detail

// Small shapes keep the suite well inside the runtime budget while touching
// every code path (multiple propositions, negated clauses, all heads).
inline GenConfig gradcheck_gen_config(uint64_t seed) {
  GenConfig g;
  g.d = 8;
  g.L = 3;
  g.A = 4;
  g.count_weights = {1, 2};
  g.neg_prob = 0.5;
  g.noise = 0.05;
  g.seed = seed;
  return g;
}

inline ModelConfig gradcheck_model_config(uint64_t seed, Ablation ablation) {
  ModelConfig m;
  m.d = 8;
  m.max_props = 4;
  m.pe_size = 4;
  m.heads = 2;
  m.ffn_mult = 2;
  m.lambda_scale = 4.0;  // keep attention softmaxes away from saturation
  m.ablation = ablation;
  m.seed = seed;
  return m;
}

inline std::vector<GradCheckReport> run_gradient_suite(int seeds = 5, double tol = 1e-4,
                                                       int coords_per_param = 4) {
  // A case's loss is built per (model, instance) so stop-gradient branches can
  // be frozen at their baseline values (pp0 = positive scores before any
  // perturbation).
  struct ModuleCase {
    std::string name;
    Ablation ablation;
    std::function<detail::LossFn(const Tensor<double>& pp0)> make_loss;
  };
  auto ce = [](Graph<double>& g, Var logits_row, int gold) {
    return g.scale(g.pick(g.log_softmax(logits_row), 0, gold), -1.0);
  };
  std::vector<ModuleCase> cases = {
      {"semantic-parsing", Ablation::no_modifier,
       [](const Tensor<double>&) -> detail::LossFn {
         return [](Graph<double>& g, const Model<double>&, const Instance&, const Forward& f) {
           return g.add(f.count_loss, f.unif_loss);
         };
       }},
      {"interactor-modifier", Ablation::system1_meanpool,
       [](const Tensor<double>&) -> detail::LossFn {
         return [](Graph<double>&, const Model<double>&, const Instance&, const Forward& f) {
           return f.total_loss;
         };
       }},
      {"reasoner", Ablation::full,
       [ce](const Tensor<double>& pp0) -> detail::LossFn {
         return [ce, pp0](Graph<double>& g, const Model<double>& m, const Instance& inst,
                          const Forward& f) {
           return g.add(ce(g, f.p_s2, inst.gold),
                        detail::frozen_neg_loss(g, f, pp0, m.config().theta));
         };
       }},
      {"combiner", Ablation::full,
       [ce](const Tensor<double>&) -> detail::LossFn {
         return [ce](Graph<double>& g, const Model<double>&, const Instance& inst,
                     const Forward& f) { return ce(g, f.p_f, inst.gold); };
       }},
      {"losses", Ablation::full,
       [](const Tensor<double>& pp0) -> detail::LossFn {
         return [pp0](Graph<double>& g, const Model<double>& m, const Instance&,
                      const Forward& f) {
           // total objective with the stop-gradded branch frozen at baseline
           Var total = g.add(g.add(f.match_loss, f.unif_loss), f.count_loss);
           return g.add(total, detail::frozen_neg_loss(g, f, pp0, m.config().theta));
         };
       }},
  };

  std::vector<GradCheckReport> reports;
  for (const auto& mc : cases) {
    GradCheckReport rep;
    rep.module = mc.name;
    rep.seeds = seeds;
    for (int s = 0; s < seeds; ++s) {
      const uint64_t seed = 100 + static_cast<uint64_t>(s);
      GenConfig gc = gradcheck_gen_config(seed);
      EncoderBasis basis = EncoderBasis::from_config(gc);
      Instance inst = make_instance(static_cast<uint64_t>(s), gc, basis);
      Model<double> model(gradcheck_model_config(seed, mc.ablation));
      Tensor<double> pp0;
      {
        Graph<double> g;
        Forward f = model.forward(g, inst, inst.count);
        pp0 = g.value(f.p_s1);
      }
      detail::LossFn loss = mc.make_loss(pp0);
      Rng rng(derive_seed(seed, 0xfd));
      rep.max_rel_err = std::max(
          rep.max_rel_err, detail::check_once(model, inst, loss, coords_per_param, rng,
                                              &rep.coords));
    }
    rep.pass = rep.max_rel_err <= tol;
    reports.push_back(rep);
  }
  return reports;
}

}  // namespace ndcr
