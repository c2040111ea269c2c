#pragma once

#include <cmath>
#include <map>
#include <string>

#include "snt/rng.hpp"
#include "snt/tensor.hpp"

namespace snt {

// A named state tensor. Trainable entries take gradients and optimizer
// updates; non-trainable entries are buffers (batch-norm running stats) that
// still serialize into checkpoints. wd_exempt marks norms/biases that skip
// weight decay.
template <class T>
struct ParamEntry {
  TensorT<T> tensor;
  bool trainable = true;
  bool wd_exempt = false;
};

template <class T>
class ParamStoreT {
 public:
  TensorT<T>& declare(const std::string& name, Shape shape, bool trainable = true,
                      bool wd_exempt = false) {
    auto [it, inserted] = entries_.try_emplace(name);
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    it->second.tensor = TensorT<T>::zeros(shape, trainable);
    it->second.trainable = trainable;
    it->second.wd_exempt = wd_exempt;
    return it->second.tensor;
  }

  TensorT<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
  }

  const TensorT<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  // Lexicographic iteration order; checkpoint layout relies on it.
  std::map<std::string, ParamEntry<T>>& entries() { return entries_; }
  const std::map<std::string, ParamEntry<T>>& entries() const { return entries_; }

  void zero_grads() {
    for (auto& [name, e] : entries_) {
      if (e.trainable) e.tensor.zero_grad();
    }
  }

  std::int64_t trainable_count() const {
    std::int64_t n = 0;
    for (const auto& [name, e] : entries_) {
      if (e.trainable) n += e.tensor.numel();
    }
    return n;
  }

 private:
  std::map<std::string, ParamEntry<T>> entries_;
};

using ParamStore = ParamStoreT<float>;

// Kaiming fan-in init for conv/linear weights.
template <class T>
void fill_kaiming(TensorT<T>& t, int fan_in, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  T* p = t.data();
  const std::int64_t sz = t.numel();
  for (std::int64_t i = 0; i < sz; ++i) p[i] = static_cast<T>(rng.normal(0.0, std_dev));
}

template <class T>
void fill_constant(TensorT<T>& t, T v) {
  T* p = t.data();
  const std::int64_t sz = t.numel();
  for (std::int64_t i = 0; i < sz; ++i) p[i] = v;
}

}  // namespace snt
