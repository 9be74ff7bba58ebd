#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ess/errors.hpp"
#include "ess/tape.hpp"

namespace ess {

template <class Real>
void zero_grads(std::span<Param<Real>* const> params) {
  for (auto* p : params) p->zero_grad();
}

template <class Real>
void require_finite_grads(std::span<Param<Real>* const> params) {
  for (auto* p : params)
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
}

// Scales all gradients so their joint L2 norm is at most max_norm.
template <class Real>
double clip_global_norm(std::span<Param<Real>* const> params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    for (Real g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const Real s = static_cast<Real>(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->grad.values()) g *= s;
  }
  return norm;
}

// Plain stochastic gradient descent.
template <class Real>
class Sgd {
 public:
  explicit Sgd(double lr) : lr_(lr) {}

  void step(std::span<Param<Real>* const> params) {
    require_finite_grads(params);
    for (auto* p : params)
      for (std::size_t i = 0; i < p->value.numel(); ++i)
        p->value[i] -= static_cast<Real>(lr_) * p->grad[i];
  }

  double lr() const { return lr_; }

 private:
  double lr_;
};

// Adam with bias correction. Moment slots are keyed by position in the
// parameter list fixed at construction, keeping updates order-deterministic.
template <class Real>
class Adam {
 public:
  Adam(std::vector<Param<Real>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
      m_.push_back(Tensor<Real>::zeros(p->value.shape()));
      v_.push_back(Tensor<Real>::zeros(p->value.shape()));
    }
  }

  void step() {
    require_finite_grads<Real>(params_);
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (std::size_t j = 0; j < p.value.numel(); ++j) {
        const double g = static_cast<double>(p.grad[j]);
        double m = beta1_ * static_cast<double>(m_[i][j]) + (1.0 - beta1_) * g;
        double v = beta2_ * static_cast<double>(v_[i][j]) + (1.0 - beta2_) * g * g;
        m_[i][j] = static_cast<Real>(m);
        v_[i][j] = static_cast<Real>(v);
        p.value[j] -= static_cast<Real>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

  const std::vector<Param<Real>*>& params() const { return params_; }

 private:
  std::vector<Param<Real>*> params_;
  std::vector<Tensor<Real>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace ess
