#pragma once

// Named parameters and the small layer wrappers the networks are built from.

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "dmvfn/ops.hpp"
#include "dmvfn/random.hpp"

namespace dmvfn {

/// A trainable tensor plus its AdamW state.
template <class T>
struct Param {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::int64_t step = 0;
};

enum class Init { kaiming, zeros, constant };

/// Owns the parameters of a model. Names are unique; insertion order is
/// stable and defines serialization order.
template <class T>
class ParamSet {
 public:
  Tensor<T> create(const std::string& name, Shape dims, Init init, Rng& rng, std::int64_t fan_in = 1,
                   T constant = T{0}) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Tensor<T> t(dims, T{0});
    auto v = t.mutable_values();
    switch (init) {
      case Init::kaiming: {
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& e : v) e = static_cast<T>(rng.normal() * sd);
        break;
      }
      case Init::constant:
        for (auto& e : v) e = constant;
        break;
      case Init::zeros:
        break;
    }
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back(Param<T>{name, t, std::vector<T>(v.size(), T{0}), std::vector<T>(v.size(), T{0}), 0});
    return t;
  }

  std::deque<Param<T>>& params() { return params_; }
  const std::deque<Param<T>>& params() const { return params_; }

  Param<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Param<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

 private:
  std::deque<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Conv {
  Tensor<T> weight, bias;
  int stride = 1, pad = 0;
  bool transposed = false;

  static Conv make(ParamSet<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout, int k, int stride,
                   int pad, Rng& rng, bool transposed = false, bool zero_init = false) {
    Conv c;
    c.stride = stride;
    c.pad = pad;
    c.transposed = transposed;
    const Shape wd = transposed ? Shape{cin, cout, k, k} : Shape{cout, cin, k, k};
    c.weight = ps.create(name + ".weight", wd, zero_init ? Init::zeros : Init::kaiming, rng, cin * k * k);
    c.bias = ps.create(name + ".bias", Shape{cout}, Init::zeros, rng);
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return transposed ? transposed_conv2d(x, weight, bias, stride, pad) : conv2d(x, weight, bias, stride, pad);
  }

  std::int64_t in_channels() const { return transposed ? weight.dim(0) : weight.dim(1); }
  std::int64_t out_channels() const { return transposed ? weight.dim(1) : weight.dim(0); }
  std::int64_t kernel() const { return weight.dim(2); }
};

/// conv followed by PReLU (per-channel slope, initialised to 0.25).
template <class T>
struct ConvAct {
  Conv<T> conv;
  Tensor<T> slope;

  static ConvAct make(ParamSet<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout, int k,
                      int stride, int pad, Rng& rng) {
    ConvAct c;
    c.conv = Conv<T>::make(ps, name, cin, cout, k, stride, pad, rng);
    c.slope = ps.create(name + ".prelu", Shape{cout}, Init::constant, rng, 1, T(0.25));
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return prelu(conv(x), slope); }
};

template <class T>
struct Linear {
  Tensor<T> weight, bias;

  static Linear make(ParamSet<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
                     bool zero_init = false) {
    Linear l;
    l.weight = ps.create(name + ".weight", Shape{out, in}, zero_init ? Init::zeros : Init::kaiming, rng, in);
    l.bias = ps.create(name + ".bias", Shape{out}, Init::zeros, rng);
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
};

}  // namespace dmvfn
