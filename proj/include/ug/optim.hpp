#pragma once

#include <cmath>
#include <vector>

#include "ug/tensor.hpp"

namespace ug {

// ADAM with standard bias correction.
template <typename Real>
class AdamT {
 public:
  AdamT(std::vector<ParameterT<Real>*> params, Real lr, Real beta1 = Real(0.9),
        Real beta2 = Real(0.999), Real eps = Real(1e-8))
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape);
      v_.emplace_back(p->value.shape);
    }
  }

  void step() {
    ++t_;
    const Real bc1 = Real(1) - std::pow(beta1_, Real(t_));
    const Real bc2 = Real(1) - std::pow(beta2_, Real(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.trainable) continue;
      for (size_t j = 0; j < p.value.numel(); ++j) {
        const Real g = p.grad.data[j];
        m_[i].data[j] = beta1_ * m_[i].data[j] + (Real(1) - beta1_) * g;
        v_[i].data[j] = beta2_ * v_[i].data[j] + (Real(1) - beta2_) * g * g;
        const Real mhat = m_[i].data[j] / bc1;
        const Real vhat = v_[i].data[j] / bc2;
        p.value.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  const std::vector<ParameterT<Real>*>& params() const { return params_; }

 private:
  std::vector<ParameterT<Real>*> params_;
  Real lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<TensorT<Real>> m_, v_;
};

// RMSProp without momentum. Weight-clipped critics destabilize under
// momentum, so the critic uses this rule.
template <typename Real>
class RmsPropT {
 public:
  RmsPropT(std::vector<ParameterT<Real>*> params, Real lr, Real alpha = Real(0.9),
           Real eps = Real(1e-8))
      : params_(std::move(params)), lr_(lr), alpha_(alpha), eps_(eps) {
    for (auto* p : params_) cache_.emplace_back(p->value.shape);
  }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.trainable) continue;
      for (size_t j = 0; j < p.value.numel(); ++j) {
        const Real g = p.grad.data[j];
        cache_[i].data[j] = alpha_ * cache_[i].data[j] + (Real(1) - alpha_) * g * g;
        p.value.data[j] -= lr_ * g / (std::sqrt(cache_[i].data[j]) + eps_);
      }
    }
  }

  const std::vector<ParameterT<Real>*>& params() const { return params_; }

 private:
  std::vector<ParameterT<Real>*> params_;
  Real lr_, alpha_, eps_;
  std::vector<TensorT<Real>> cache_;
};

// Plain SGD with momentum, used by the downstream classifier.
template <typename Real>
class SgdMomentumT {
 public:
  SgdMomentumT(std::vector<ParameterT<Real>*> params, Real lr, Real momentum = Real(0.9))
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    for (auto* p : params_) vel_.emplace_back(p->value.shape);
  }

  void step() {
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (!p.trainable) continue;
      for (size_t j = 0; j < p.value.numel(); ++j) {
        vel_[i].data[j] = momentum_ * vel_[i].data[j] - lr_ * p.grad.data[j];
        p.value.data[j] += vel_[i].data[j];
      }
    }
  }

 private:
  std::vector<ParameterT<Real>*> params_;
  Real lr_, momentum_;
  std::vector<TensorT<Real>> vel_;
};

template <typename Real>
void clip_params(const std::vector<ParameterT<Real>*>& params, Real bound) {
  if (bound <= Real(0)) throw NumericsError("clip_params: bound must be positive");
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (auto& v : p->value.data) v = std::min(bound, std::max(-bound, v));
  }
}

using Adam = AdamT<float>;
using RmsProp = RmsPropT<float>;
using SgdMomentum = SgdMomentumT<float>;

}  // namespace ug
