// Central-difference gradient oracle, independent of the reverse-mode path.
#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "evl/tensor.hpp"

namespace evl {

struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// (f(x + h e_i) - f(x - h e_i)) / 2h per element. Meaningful only with
// S = double; float rounding swamps h = 1e-4 differences.
template <class S>
Tensor<S> finite_difference_gradient(const std::function<Tensor<S>(const Tensor<S>&)>& f,
                                     const Tensor<S>& x, S h) {
  NoGradGuard ng;
  Tensor<S> g = Tensor<S>::zeros(x.shape());
  Tensor<S> probe = x.clone_detached(false);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const S x0 = x.values()[static_cast<std::size_t>(i)];
    probe.values()[static_cast<std::size_t>(i)] = x0 + h;
    Tensor<S> fp = f(probe);
    if (fp.numel() != 1)
      throw ContractError("finite_difference_gradient: f must be scalar-valued");
    probe.values()[static_cast<std::size_t>(i)] = x0 - h;
    Tensor<S> fm = f(probe);
    probe.values()[static_cast<std::size_t>(i)] = x0;
    g.values()[static_cast<std::size_t>(i)] = (fp.item() - fm.item()) / (S(2) * h);
  }
  return g;
}

// |a - b| <= atol + rtol * max(|a|, |b|) per element; returns the worst
// violation margin (<= 0 means pass).
template <class A, class B, class S>
S gradient_mismatch(const A& ad, const B& fd, S atol, S rtol) {
  S worst = -atol;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const S scale = std::max(std::abs(ad[i]), std::abs(fd[i]));
    worst = std::max(worst, std::abs(ad[i] - fd[i]) - (atol + rtol * scale));
  }
  return worst;
}

}  // namespace evl
