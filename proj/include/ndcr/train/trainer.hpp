#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndcr/checkpoint.hpp"
#include "ndcr/dataset_io.hpp"
#include "ndcr/model/model.hpp"
#include "ndcr/param_store.hpp"

namespace ndcr {

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig opt;

  std::string to_json() const {
    nlohmann::json j;
    j["model"] = {{"d", model.d},
                  {"max_props", model.max_props},
                  {"pe_size", model.pe_size},
                  {"heads", model.heads},
                  {"ffn_mult", model.ffn_mult},
                  {"lambda", model.lambda_scale},
                  {"theta", model.theta},
                  {"tau", model.tau},
                  {"w_match", model.w_match},
                  {"w_neg", model.w_neg},
                  {"w_unif", model.w_unif},
                  {"w_count", model.w_count},
                  {"ablation", ablation_name(model.ablation)},
                  {"normalize_combiner", model.normalize_combiner},
                  {"flatten_grid", model.flatten_grid},
                  {"seed", model.seed}};
    j["optimizer"] = {{"learning_rate", opt.learning_rate}, {"batch_size", opt.batch_size},
                      {"dropout", opt.dropout},             {"max_epochs", opt.max_epochs},
                      {"beta1", opt.beta1},                 {"beta2", opt.beta2},
                      {"epsilon", opt.epsilon},             {"seed", opt.seed}};
    return j.dump();
  }

  static TrainConfig from_json(const std::string& text) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("train config: invalid JSON: ") + e.what());
    }
    TrainConfig c;
    if (j.contains("model")) {
      const auto& m = j["model"];
      c.model.d = m.value("d", c.model.d);
      c.model.max_props = m.value("max_props", c.model.max_props);
      c.model.pe_size = m.value("pe_size", c.model.pe_size);
      c.model.heads = m.value("heads", c.model.heads);
      c.model.ffn_mult = m.value("ffn_mult", c.model.ffn_mult);
      c.model.lambda_scale = m.value("lambda", c.model.lambda_scale);
      c.model.theta = m.value("theta", c.model.theta);
      c.model.tau = m.value("tau", c.model.tau);
      c.model.w_match = m.value("w_match", c.model.w_match);
      c.model.w_neg = m.value("w_neg", c.model.w_neg);
      c.model.w_unif = m.value("w_unif", c.model.w_unif);
      c.model.w_count = m.value("w_count", c.model.w_count);
      if (m.contains("ablation")) c.model.ablation = ablation_from_name(m["ablation"]);
      c.model.normalize_combiner = m.value("normalize_combiner", c.model.normalize_combiner);
      c.model.flatten_grid = m.value("flatten_grid", c.model.flatten_grid);
      c.model.seed = m.value("seed", c.model.seed);
    }
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      c.opt.learning_rate = o.value("learning_rate", c.opt.learning_rate);
      c.opt.batch_size = o.value("batch_size", c.opt.batch_size);
      c.opt.dropout = o.value("dropout", c.opt.dropout);
      c.opt.max_epochs = o.value("max_epochs", c.opt.max_epochs);
      c.opt.beta1 = o.value("beta1", c.opt.beta1);
      c.opt.beta2 = o.value("beta2", c.opt.beta2);
      c.opt.epsilon = o.value("epsilon", c.opt.epsilon);
      c.opt.seed = o.value("seed", c.opt.seed);
    }
    return c;
  }

  uint64_t hash() const { return fnv1a(to_json()); }
};

struct EvalReport {
  int total = 0;
  int correct = 0;
  // retrieval accuracy bucketed by the true proposition count (1-based)
  std::array<int, 10> bucket_total{};
  std::array<int, 10> bucket_correct{};
  int count_correct = 0;               // count-head accuracy
  std::vector<std::vector<int>> count_confusion;  // [true-1][pred-1]
  double mean_match = 0.0;
  double mean_neg = 0.0;
  double mean_unif = 0.0;
  double mean_count_loss = 0.0;

  double accuracy() const { return total ? 100.0 * correct / total : 0.0; }
  double count_accuracy() const { return total ? 100.0 * count_correct / total : 0.0; }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["total"] = total;
    j["accuracy"] = accuracy();
    j["count_accuracy"] = count_accuracy();
    nlohmann::json buckets = nlohmann::json::array();
    for (int k = 0; k < 10; ++k) {
      if (!bucket_total[static_cast<size_t>(k)]) continue;
      buckets.push_back({{"count", k + 1},
                         {"total", bucket_total[static_cast<size_t>(k)]},
                         {"accuracy", 100.0 * bucket_correct[static_cast<size_t>(k)] /
                                          bucket_total[static_cast<size_t>(k)]}});
    }
    j["by_count"] = buckets;
    j["count_confusion"] = count_confusion;
    j["mean_match_loss"] = mean_match;
    j["mean_neg_loss"] = mean_neg;
    j["mean_unif_loss"] = mean_unif;
    j["mean_count_loss"] = mean_count_loss;
    return j;
  }
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_match = 0.0;
  double train_neg = 0.0;
  double train_unif = 0.0;
  double train_count = 0.0;
  double valid_accuracy = 0.0;
  double valid_count_accuracy = 0.0;
  double valid_neg = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},
            {"lr", lr},
            {"train_loss", train_loss},
            {"train_match", train_match},
            {"train_neg", train_neg},
            {"train_unif", train_unif},
            {"train_count", train_count},
            {"valid_accuracy", valid_accuracy},
            {"valid_count_accuracy", valid_count_accuracy},
            {"valid_neg", valid_neg},
            {"seconds", seconds}};
  }
};

template <typename T>
struct TrainResult {
  ParamStore<T> best;
  int best_epoch = 0;
  double best_accuracy = 0.0;
  std::vector<EpochMetrics> history;

  nlohmann::json history_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& m : history) j.push_back(m.to_json());
    return j;
  }
};

// Evaluate `model` on `data`; teacher_count is never used, the count head
// drives how many propositions System 1 scores.
template <typename T>
EvalReport evaluate(const Model<T>& model, const std::vector<Instance>& data) {
  EvalReport rep;
  const int K = model.config().max_props;
  rep.count_confusion.assign(static_cast<size_t>(K), std::vector<int>(static_cast<size_t>(K), 0));
  int neg_n = 0;
  for (const Instance& inst : data) {
    typename Graph<T>::Options opt;
    opt.training = false;
    Graph<T> g(opt);
    Forward f = model.forward(g, inst);
    int pred = model.predict(g, f);
    ++rep.total;
    const bool hit = pred == inst.gold;
    if (hit) ++rep.correct;
    if (inst.count >= 1 && inst.count <= 10) {
      ++rep.bucket_total[static_cast<size_t>(inst.count - 1)];
      if (hit) ++rep.bucket_correct[static_cast<size_t>(inst.count - 1)];
    }
    int pred_count = Model<T>::argmax_row(g.value(f.count_logits)) + 1;
    if (pred_count == inst.count) ++rep.count_correct;
    if (inst.count >= 1 && inst.count <= K && pred_count >= 1 && pred_count <= K)
      ++rep.count_confusion[static_cast<size_t>(inst.count - 1)][static_cast<size_t>(pred_count - 1)];
    rep.mean_match += static_cast<double>(g.value(f.match_loss).data[0]);
    rep.mean_unif += static_cast<double>(g.value(f.unif_loss).data[0]);
    rep.mean_count_loss += static_cast<double>(g.value(f.count_loss).data[0]);
    if (f.neg_loss >= 0) {
      rep.mean_neg += static_cast<double>(g.value(f.neg_loss).data[0]);
      ++neg_n;
    }
  }
  if (rep.total) {
    rep.mean_match /= rep.total;
    rep.mean_unif /= rep.total;
    rep.mean_count_loss /= rep.total;
  }
  if (neg_n) rep.mean_neg /= neg_n;
  return rep;
}

template <typename T>
TrainResult<T> train(Model<T>& model, const OptimizerConfig& opt,
                     const std::vector<Instance>& train_data,
                     const std::vector<Instance>& valid_data,
                     const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  opt.validate();
  if (train_data.empty()) throw ConfigError("train: empty training set");

  TrainResult<T> result;
  result.best = model.store();
  result.best_accuracy = -1.0;

  std::vector<size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), size_t{0});

  int64_t step = 0;
  for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(opt.seed, 0x5affull + static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(shuffle_rng.next_below(i));
      std::swap(order[i - 1], order[j]);
    }

    EpochMetrics em;
    em.epoch = epoch + 1;
    em.lr = opt.lr_at_epoch(epoch);
    int train_neg_n = 0;

    for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(opt.batch_size)) {
      const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(opt.batch_size));
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      std::map<std::string, Tensor<T>> grads;
      for (size_t bi = b0; bi < b1; ++bi) {
        const Instance& inst = train_data[order[bi]];
        typename Graph<T>::Options gopt;
        gopt.training = true;
        gopt.dropout_rate = opt.dropout;
        gopt.seed = derive_seed(opt.seed, (static_cast<uint64_t>(epoch) << 32) ^ order[bi]);
        Graph<T> g(gopt);
        Forward f = model.forward(g, inst, inst.count);
        g.backward(f.total_loss);
        for (const auto& [name, var] : g.params()) {
          const Tensor<T>& gr = g.grad(var);
          auto it = grads.find(name);
          if (it == grads.end()) {
            Tensor<T> acc(gr.rows, gr.cols);
            it = grads.emplace(name, std::move(acc)).first;
          }
          kernels::add(gr.size(), it->second.data.data(), gr.data.data(), it->second.data.data());
        }
        em.train_loss += static_cast<double>(g.value(f.total_loss).data[0]);
        em.train_match += static_cast<double>(g.value(f.match_loss).data[0]);
        em.train_unif += static_cast<double>(g.value(f.unif_loss).data[0]);
        em.train_count += static_cast<double>(g.value(f.count_loss).data[0]);
        if (f.neg_loss >= 0) {
          em.train_neg += static_cast<double>(g.value(f.neg_loss).data[0]);
          ++train_neg_n;
        }
      }
      for (auto& [name, gr] : grads)
        kernels::scale(gr.size(), static_cast<T>(inv), gr.data.data(), gr.data.data());
      // parameters untouched by this ablation's graph get zero gradients
      for (const auto& [name, e] : model.store().entries())
        if (!grads.count(name)) grads.emplace(name, Tensor<T>(e.value.rows, e.value.cols));
      model.store().adam_step(grads, ++step, epoch, opt);
    }

    const double n = static_cast<double>(train_data.size());
    em.train_loss /= n;
    em.train_match /= n;
    em.train_unif /= n;
    em.train_count /= n;
    if (train_neg_n) em.train_neg /= train_neg_n;

    if (!valid_data.empty()) {
      EvalReport rep = evaluate(model, valid_data);
      em.valid_accuracy = rep.accuracy();
      em.valid_count_accuracy = rep.count_accuracy();
      em.valid_neg = rep.mean_neg;
      if (rep.accuracy() > result.best_accuracy) {
        result.best_accuracy = rep.accuracy();
        result.best_epoch = epoch + 1;
        result.best = model.store();
      }
    } else {
      result.best = model.store();
      result.best_epoch = epoch + 1;
    }
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(em);
    if (on_epoch) on_epoch(em);
  }
  return result;
}

}  // namespace ndcr
