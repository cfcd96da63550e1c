#pragma once

// Adam updates bound to named parameter lists, one optimizer per network.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stylemorph/core/tensor.hpp"
#include "stylemorph/nets/modules.hpp"

namespace stylemorph::train {

// Adam over a fixed parameter list. Moments are plain buffers outside the
// graph; step() consumes gradients aligned with the parameter order and
// mutates the parameters in place.
class Adam {
 public:
  Adam() = default;
  Adam(nets::ParamList params, double lr, double beta1, double beta2, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& [name, p] : params_) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
    }
  }

  const nets::ParamList& params() const { return params_; }
  double lr() const { return lr_; }
  long step_count() const { return t_; }
  const std::vector<Tensor>& moments_m() const { return m_; }
  const std::vector<Tensor>& moments_v() const { return v_; }

  void step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size())
      throw std::invalid_argument("Adam::step: expected " + std::to_string(params_.size()) +
                                  " gradients, got " + std::to_string(grads.size()));
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor p = params_[i].second;
      const Tensor& g = grads[i];
      if (!g.defined() || g.shape() != p.shape())
        throw std::invalid_argument("Adam::step: gradient shape mismatch at " + params_[i].first);
      double* pm = m_[i].ptr();
      double* pv = v_[i].ptr();
      double* pp = p.ptr();
      const double* pg = g.ptr();
      for (int64_t j = 0; j < p.numel(); ++j) {
        pm[j] = beta1_ * pm[j] + (1.0 - beta1_) * pg[j];
        pv[j] = beta2_ * pv[j] + (1.0 - beta2_) * pg[j] * pg[j];
        const double mhat = pm[j] / bc1;
        const double vhat = pv[j] / bc2;
        pp[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  // Checkpoint restore; moment shapes must match the bound parameters.
  void restore(long step_count, const std::vector<Tensor>& m, const std::vector<Tensor>& v) {
    if (m.size() != params_.size() || v.size() != params_.size())
      throw std::invalid_argument("Adam::restore: moment count mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
      if (m[i].shape() != params_[i].second.shape() || v[i].shape() != params_[i].second.shape())
        throw std::invalid_argument("Adam::restore: moment shape mismatch at " + params_[i].first);
      m_[i].data() = m[i].data();
      v_[i].data() = v[i].data();
    }
    t_ = step_count;
  }

 private:
  nets::ParamList params_;
  double lr_ = 0.0;
  double beta1_ = 0.0;
  double beta2_ = 0.0;
  double eps_ = 1e-8;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// One optimizer per live network. Slots for networks a configuration lacks
// hold an empty Adam whose step is a no-op. The shadow copies have no slot:
// they are never trained.
struct OptimizerSet {
  Adam g, f, e, d;
};

}  // namespace stylemorph::train
