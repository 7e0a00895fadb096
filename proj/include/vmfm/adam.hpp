#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>

#include "vmfm/errors.hpp"
#include "vmfm/nets.hpp"

namespace vmfm::optim {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class S>
struct ParamMoments {
  Vec<S> m, v;
  std::uint64_t t = 0;
};

// Adam keyed by parameter name, with per-parameter step counters so groups
// that train in alternation (generator vs critic) each see the bias
// correction that matches their own update count.
template <class S>
class Adam {
 public:
  AdamConfig cfg;
  std::map<std::string, ParamMoments<S>> slots;

  explicit Adam(net::Models<S>& models, AdamConfig cfg_in = {}) : cfg(cfg_in) {
    models.visit([this](const std::string& name, Tensor<S>& t) { names_[&t] = name; });
  }

  const std::string& name_of(const Tensor<S>* t) const {
    auto it = names_.find(t);
    if (it == names_.end()) throw invariant_error("optimizer: unregistered parameter tensor");
    return it->second;
  }

  // One update from the gradients accumulated on the binding's leaves. A
  // tensor bound more than once in the graph (shared layers used by several
  // forwards) gets the sum of its leaves' gradients and a single update;
  // tensors whose leaves never saw a gradient are left untouched.
  void step(const net::Binding<S>& bind) {
    std::map<std::string, std::pair<Tensor<S>*, Vec<S>>> grads;
    for (const auto& [tensor, var] : bind.entries) {
      if (!var->grad_ready) continue;
      const std::string& name = name_of(tensor);
      auto [it, fresh] = grads.try_emplace(name, tensor, Vec<S>());
      if (fresh) it->second.second = Vec<S>::Zero(tensor->size());
      it->second.second += var->grad.v;
    }
    for (auto& [name, tg] : grads) {
      Tensor<S>* tensor = tg.first;
      const Vec<S>& g = tg.second;
      ParamMoments<S>& s = slots[name];
      if (s.m.size() == 0) {
        s.m = Vec<S>::Zero(tensor->size());
        s.v = Vec<S>::Zero(tensor->size());
      }
      if (s.m.size() != tensor->size())
        throw invariant_error("optimizer: moment size mismatch for " + name);
      s.t += 1;
      const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
      s.m = b1 * s.m + (S(1) - b1) * g;
      s.v = b2 * s.v + (S(1) - b2) * g.square();
      const double c1 = 1.0 - std::pow(cfg.beta1, double(s.t));
      const double c2 = 1.0 - std::pow(cfg.beta2, double(s.t));
      const S scale = S(cfg.lr / c1);
      const S vc = S(1.0 / c2);
      tensor->v -= scale * s.m / ((s.v * vc).sqrt() + S(cfg.eps));
    }
  }

 private:
  std::unordered_map<const Tensor<S>*, std::string> names_;
};

}  // namespace vmfm::optim
