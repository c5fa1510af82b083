// Adam with decoupled weight decay, fixed learning rate. Decay applies to
// weight matrices only; vectors (biases, norm gains, tokens) are exempt.
#pragma once

#include <cmath>
#include <vector>

#include "evl/nn.hpp"

namespace evl {

template <class S>
struct AdamW {
  S lr;
  S beta1 = S(0.9);
  S beta2 = S(0.999);
  S eps = S(1e-8);
  S weight_decay = S(0.01);
  std::int64_t step_count = 0;
  std::vector<std::vector<S>> m, v;

  explicit AdamW(S learning_rate, S wd = S(0.01)) : lr(learning_rate), weight_decay(wd) {}

  void step(const ParamRefs<S>& params) {
    if (m.empty()) {
      m.resize(params.size());
      v.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params[i]->t.values().size(), S(0));
        v[i].assign(params[i]->t.values().size(), S(0));
      }
    }
    ++step_count;
    const S bc1 = S(1) - std::pow(beta1, static_cast<S>(step_count));
    const S bc2 = S(1) - std::pow(beta2, static_cast<S>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter<S>& p = *params[i];
      if (!p.trainable) continue;
      auto& vals = p.t.values();
      const auto& g = p.t.grad_view();
      if (g.empty()) continue;
      const bool decay = p.t.rank() >= 2 && weight_decay > S(0);
      for (std::size_t j = 0; j < vals.size(); ++j) {
        if (decay) vals[j] -= lr * weight_decay * vals[j];
        m[i][j] = beta1 * m[i][j] + (S(1) - beta1) * g[j];
        v[i][j] = beta2 * v[i][j] + (S(1) - beta2) * g[j] * g[j];
        const S mhat = m[i][j] / bc1;
        const S vhat = v[i][j] / bc2;
        vals[j] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }

  void zero_grad(const ParamRefs<S>& params) {
    for (auto* p : params) p->t.zero_grad();
  }
};

}  // namespace evl
