#pragma once
// Parameter storage, per-forward binding of parameters into a graph, and the
// few layer types both sub-networks are assembled from.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdage/autograd.hpp"

namespace crowdage::nn {

using ag::Shape;
using ag::Var;

template <class T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
};

template <class T>
class ParamStore {
 public:
  int add(std::string name, Shape shape, std::vector<T> value) {
    if (ag::numel(shape) != value.size()) throw std::invalid_argument("ParamStore::add: size mismatch");
    params_.push_back({std::move(name), std::move(shape), std::move(value)});
    return static_cast<int>(params_.size()) - 1;
  }
  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& p : params_)
      out.add(p.name, p.shape, std::vector<U>(p.value.begin(), p.value.end()));
    return out;
  }

  /// FNV-1a over names, shapes and raw value bytes.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& p : params_) {
      mix(p.name.data(), p.name.size());
      mix(p.shape.data(), p.shape.size() * sizeof(int));
      mix(p.value.data(), p.value.size() * sizeof(T));
    }
    return h;
  }

  bool operator==(const ParamStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& a = params_[i];
      const auto& b = o.params_[i];
      if (a.name != b.name || a.shape != b.shape || a.value.size() != b.value.size()) return false;
      if (std::memcmp(a.value.data(), b.value.data(), a.value.size() * sizeof(T)) != 0) return false;
    }
    return true;
  }

 private:
  std::vector<Parameter<T>> params_;
};

/// Gradient buffers aligned with a ParamStore.
template <class T>
using Grads = std::vector<std::vector<T>>;

template <class T>
Grads<T> zero_grads(const ParamStore<T>& store) {
  Grads<T> g(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) g[i].assign(store[i].value.size(), T(0));
  return g;
}

/// Binds a ParamStore into one forward graph. Each parameter becomes a leaf
/// on first use; a non-trainable binding yields constants, so no gradient is
/// ever computed for it.
template <class T>
class Binding {
 public:
  Binding(const ParamStore<T>& store, bool trainable) : store_(&store), trainable_(trainable), leaves_(store.size()) {}

  Var<T> operator()(int id) {
    auto& slot = leaves_.at(id);
    if (!slot.defined()) {
      const auto& p = (*store_)[id];
      slot = trainable_ ? ag::leaf<T>(p.shape, p.value) : ag::constant<T>(p.shape, p.value);
    }
    return slot;
  }

  bool trainable() const { return trainable_; }

  /// Adds leaf gradients (after ag::backward) into `acc`.
  void collect(Grads<T>& acc) const {
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i].defined()) continue;
      auto g = leaves_[i].grad();
      if (g.empty()) continue;
      for (std::size_t j = 0; j < g.size(); ++j) acc[i][j] += g[j];
    }
  }

 private:
  const ParamStore<T>* store_;
  bool trainable_;
  std::vector<Var<T>> leaves_;
};

/// He-normal weights scaled by `gain`, zero bias.
struct Conv {
  int weight = -1, bias = -1;
  int in = 0, out = 0, kernel = 3, stride = 1, pad = 1;

  template <class T>
  static Conv make(ParamStore<T>& store, const std::string& name, int in, int out, int kernel,
                   int stride, std::mt19937_64& rng, double gain = 1.0, double bias_init = 0.0) {
    Conv c;
    c.in = in;
    c.out = out;
    c.kernel = kernel;
    c.stride = stride;
    c.pad = kernel / 2;
    const double fan_in = static_cast<double>(in) * kernel * kernel;
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / fan_in));
    std::vector<T> w(static_cast<std::size_t>(out) * in * kernel * kernel);
    for (auto& v : w) v = static_cast<T>(dist(rng));
    c.weight = store.add(name + ".weight", {out, in, kernel, kernel}, std::move(w));
    c.bias = store.add(name + ".bias", {out}, std::vector<T>(out, static_cast<T>(bias_init)));
    return c;
  }

  template <class T>
  Var<T> operator()(Binding<T>& p, const Var<T>& x) const {
    return ag::conv2d(x, p(weight), p(bias), stride, pad);
  }
};

struct Linear {
  int weight = -1, bias = -1;
  int in = 0, out = 0;

  template <class T>
  static Linear make(ParamStore<T>& store, const std::string& name, int in, int out,
                     std::mt19937_64& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in));
    std::vector<T> w(static_cast<std::size_t>(out) * in);
    for (auto& v : w) v = static_cast<T>(dist(rng));
    l.weight = store.add(name + ".weight", {out, in}, std::move(w));
    l.bias = store.add(name + ".bias", {out}, std::vector<T>(out, T(0)));
    return l;
  }

  template <class T>
  Var<T> operator()(Binding<T>& p, const Var<T>& x) const {
    return ag::linear(x, p(weight), p(bias));
  }
};

/// Two 3x3 convolutions with an identity or 1x1 projection shortcut.
struct ResidualBlock {
  Conv conv1, conv2, shortcut;
  bool project = false;

  template <class T>
  static ResidualBlock make(ParamStore<T>& store, const std::string& name, int in, int out,
                            int stride, std::mt19937_64& rng) {
    ResidualBlock b;
    b.conv1 = Conv::make(store, name + ".conv1", in, out, 3, stride, rng);
    b.conv2 = Conv::make(store, name + ".conv2", out, out, 3, 1, rng, 0.5);
    b.project = (in != out || stride != 1);
    if (b.project) b.shortcut = Conv::make(store, name + ".shortcut", in, out, 1, stride, rng, 0.5);
    return b;
  }

  template <class T>
  Var<T> operator()(Binding<T>& p, const Var<T>& x) const {
    Var<T> y = conv2(p, ag::relu(conv1(p, x)));
    Var<T> s = project ? shortcut(p, x) : x;
    return ag::relu(ag::add(y, s));
  }
};

}  // namespace crowdage::nn
