#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ndcr/common.hpp"
#include "ndcr/tensor.hpp"

namespace ndcr {

struct OptimizerConfig {
  double learning_rate = 6e-5;
  int batch_size = 36;
  double dropout = 0.1;
  int max_epochs = 30;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  uint64_t seed = 10;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("optimizer: learning rate must be > 0");
    if (dropout < 0 || dropout >= 1) throw ConfigError("optimizer: dropout must be in [0,1)");
    if (max_epochs < 1) throw ConfigError("optimizer: max epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("optimizer: batch size must be >= 1");
  }

  // Linear decay over completed epochs, clamped at zero.
  double lr_at_epoch(int completed_epochs) const {
    double f = 1.0 - static_cast<double>(completed_epochs) / max_epochs;
    return learning_rate * std::max(0.0, f);
  }
};

// Named parameters plus Adam moments. Uses std::map so iteration order (and
// therefore update order) is name-sorted and deterministic.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> m;  // first moment
    Tensor<T> v;  // second moment
  };

  void add(const std::string& name, Tensor<T> value) {
    if (entries_.count(name)) throw ConfigError("param store: duplicate name '" + name + "'");
    Entry e;
    e.m = Tensor<T>(value.rows, value.cols);
    e.v = Tensor<T>(value.rows, value.cols);
    e.value = std::move(value);
    entries_.emplace(name, std::move(e));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("param store: unknown parameter '" + name + "'");
    return it->second.value;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("param store: unknown parameter '" + name + "'");
    return it->second.value;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  size_t count() const { return entries_.size(); }

  size_t total_elements() const {
    size_t n = 0;
    for (const auto& [k, e] : entries_) n += e.value.size();
    return n;
  }

  // Bias-corrected Adam step at global step `step_index` (1-based) with the
  // learning rate decayed by completed epochs.
  void adam_step(const std::map<std::string, Tensor<T>>& grads, int64_t step_index,
                 int completed_epochs, const OptimizerConfig& cfg) {
    cfg.validate();
    if (step_index < 1) throw ConfigError("adam: step index must be >= 1");
    const double lr = cfg.lr_at_epoch(completed_epochs);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_index));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_index));
    for (auto& [name, e] : entries_) {
      auto git = grads.find(name);
      if (git == grads.end())
        throw ConfigError("adam: missing gradient for parameter '" + name + "'");
      const Tensor<T>& g = git->second;
      if (g.rows != e.value.rows || g.cols != e.value.cols)
        throw ShapeError("adam: gradient shape mismatch for '" + name + "'");
      for (size_t i = 0; i < g.size(); ++i) {
        double gi = static_cast<double>(g.data[i]);
        double m = cfg.beta1 * static_cast<double>(e.m.data[i]) + (1.0 - cfg.beta1) * gi;
        double v = cfg.beta2 * static_cast<double>(e.v.data[i]) + (1.0 - cfg.beta2) * gi * gi;
        e.m.data[i] = static_cast<T>(m);
        e.v.data[i] = static_cast<T>(v);
        double mhat = m / bc1;
        double vhat = v / bc2;
        e.value.data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
      }
    }
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
};

}  // namespace ndcr
