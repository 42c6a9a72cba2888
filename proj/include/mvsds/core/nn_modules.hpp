#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mvsds/core/nn_ops.hpp"
#include "mvsds/core/rng.hpp"

namespace mvsds {

// Named parameter tree. Creation order is recorded so iteration, checkpoints
// and optimizer sweeps are deterministic. `param()` either creates a tensor
// (fresh model) or returns the preloaded one (checkpoint restore), so layer
// wiring is identical on both paths.
template <typename T>
class ParamTree {
 public:
  using InitFn = std::function<Tensor<T>()>;

  Var<T> param(const std::string& name, const Shape& shape, const InitFn& init) {
    auto it = params_.find(name);
    if (it != params_.end()) {
      MVSDS_CHECK(it->second->value.shape() == shape, "parameter ", name,
                  " has shape ", shape_str(it->second->value.shape()),
                  ", expected ", shape_str(shape));
      return it->second;
    }
    Tensor<T> value = init();
    MVSDS_CHECK(value.shape() == shape, "initializer shape mismatch for ", name);
    Var<T> v = make_param(std::move(value));
    params_.emplace(name, v);
    order_.push_back(name);
    return v;
  }

  void load_tensor(const std::string& name, Tensor<T> value) {
    MVSDS_CHECK(!params_.count(name), "duplicate tensor ", name);
    params_.emplace(name, make_param(std::move(value)));
    order_.push_back(name);
  }

  bool has(const std::string& name) const { return params_.count(name) != 0; }

  Var<T> get(const std::string& name) const {
    auto it = params_.find(name);
    MVSDS_CHECK(it != params_.end(), "unknown parameter ", name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& name : order_) n += params_.at(name)->value.numel();
    return n;
  }

  void zero_grad() {
    for (const auto& name : order_) params_.at(name)->zero_grad();
  }

  bool all_finite() const {
    for (const auto& name : order_)
      if (!params_.at(name)->value.all_finite()) return false;
    return true;
  }

  // Deep copy of all parameter values.
  std::map<std::string, Tensor<T>> snapshot() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& name : order_) out[name] = params_.at(name)->value.clone();
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Var<T>> params_;
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <typename T>
typename ParamTree<T>::InitFn init_fanin_normal(Shape shape, int64_t fan_in,
                                                Rng& rng) {
  return [shape, fan_in, &rng] {
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    return Tensor<T>::randn(shape, rng, scale);
  };
}

template <typename T>
typename ParamTree<T>::InitFn init_zeros(Shape shape) {
  return [shape] { return Tensor<T>::zeros(shape); };
}

template <typename T>
typename ParamTree<T>::InitFn init_ones(Shape shape) {
  return [shape] { return Tensor<T>::full(shape, T(1)); };
}

template <typename T>
typename ParamTree<T>::InitFn init_uniform(Shape shape, T lo, T hi, Rng& rng) {
  return [shape, lo, hi, &rng] { return Tensor<T>::rand_uniform(shape, rng, lo, hi); };
}

// ---------------------------------------------------------------------------
// Layers. Thin handles over tree-owned parameters.
// ---------------------------------------------------------------------------

template <typename T>
struct LinearLayer {
  Var<T> w, b;

  static LinearLayer create(ParamTree<T>& tree, const std::string& name,
                            int64_t in, int64_t out, Rng& rng,
                            bool zero_init = false) {
    LinearLayer l;
    l.w = tree.param(name + ".w", {out, in},
                     zero_init ? init_zeros<T>({out, in})
                               : init_fanin_normal<T>({out, in}, in, rng));
    l.b = tree.param(name + ".b", {out}, init_zeros<T>({out}));
    return l;
  }

  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
};

template <typename T>
struct Conv2dLayer {
  Var<T> w, b;
  int64_t stride = 1, pad = 1;

  static Conv2dLayer create(ParamTree<T>& tree, const std::string& name,
                            int64_t in_ch, int64_t out_ch, int64_t k, Rng& rng,
                            int64_t stride = 1, int64_t pad = 1,
                            bool zero_init = false) {
    Conv2dLayer l;
    int64_t fan_in = in_ch * k * k;
    l.w = tree.param(name + ".w", {out_ch, in_ch, k, k},
                     zero_init ? init_zeros<T>({out_ch, in_ch, k, k})
                               : init_fanin_normal<T>({out_ch, in_ch, k, k},
                                                      fan_in, rng));
    l.b = tree.param(name + ".b", {out_ch}, init_zeros<T>({out_ch}));
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <typename T>
struct GroupNormLayer {
  Var<T> gamma, beta;
  int64_t groups = 8;

  static GroupNormLayer create(ParamTree<T>& tree, const std::string& name,
                               int64_t channels, int64_t groups) {
    GroupNormLayer l;
    l.gamma = tree.param(name + ".gamma", {channels}, init_ones<T>({channels}));
    l.beta = tree.param(name + ".beta", {channels}, init_zeros<T>({channels}));
    l.groups = groups;
    return l;
  }

  Var<T> operator()(const Var<T>& x) const {
    return group_norm(x, groups, gamma, beta);
  }
};

// ---------------------------------------------------------------------------
// AdamW optimizer (decoupled weight decay).
// ---------------------------------------------------------------------------

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  AdamWConfig& config() { return cfg_; }
  const AdamWConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  // One update over every parameter that accumulated a gradient this step.
  void step(ParamTree<T>& tree) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& name : tree.names()) {
      Var<T> p = tree.get(name);
      if (!p->grad.defined()) continue;
      auto& st = states_[name];
      if (!st.m.defined()) {
        st.m = Tensor<T>::zeros(p->value.shape());
        st.v = Tensor<T>::zeros(p->value.shape());
      }
      const int64_t n = p->value.numel();
      T* w = p->value.data();
      const T* g = p->grad.data();
      T* m = st.m.data();
      T* v = st.v.data();
      for (int64_t i = 0; i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
        double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps) +
                              cfg_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg_.lr * update);
      }
    }
  }

 private:
  struct State {
    Tensor<T> m, v;
  };
  AdamWConfig cfg_;
  std::unordered_map<std::string, State> states_;
  int64_t t_ = 0;
};

}  // namespace mvsds
