#pragma once

#include <cmath>
#include <vector>

#include "ens/graph.hpp"

namespace ens {

// SGD with momentum and cosine-decayed step size.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor*> params, double lr, int total_steps,
              double momentum = 0.9, double lr_floor_frac = 0.01)
      : params_(std::move(params)),
        lr0_(lr),
        total_steps_(total_steps),
        momentum_(momentum),
        lr_floor_frac_(lr_floor_frac) {
    vel_.reserve(params_.size());
    for (Tensor* p : params_)
      vel_.emplace_back(p->shape[0], p->shape[1], p->shape[2], p->shape[3]);
  }

  double lr_at(int step) const {
    if (total_steps_ <= 1) return lr0_;
    double t = static_cast<double>(step) / (total_steps_ - 1);
    double floor = lr0_ * lr_floor_frac_;
    return floor + 0.5 * (lr0_ - floor) * (1.0 + std::cos(3.14159265358979323846 * t));
  }

  // Applies one update from the gradients accumulated on `g`.
  void step(const Graph& g, int step_idx) {
    double lr = lr_at(step_idx);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor* p = params_[i];
      if (!g.has_param(*p)) continue;
      const Tensor& grad = g.grad_of(*p);
      Tensor& v = vel_[i];
      for (std::size_t j = 0; j < p->numel(); ++j) {
        v.data[j] = momentum_ * v.data[j] + grad.data[j];
        p->data[j] -= lr * v.data[j];
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> vel_;
  double lr0_;
  int total_steps_;
  double momentum_;
  double lr_floor_frac_;
};

// Adam with the same cosine step-size decay.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, double lr, int total_steps, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8, double lr_floor_frac = 0.01)
      : params_(std::move(params)),
        lr0_(lr),
        total_steps_(total_steps),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps),
        lr_floor_frac_(lr_floor_frac) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Tensor* p : params_) {
      m_.emplace_back(p->shape[0], p->shape[1], p->shape[2], p->shape[3]);
      v_.emplace_back(p->shape[0], p->shape[1], p->shape[2], p->shape[3]);
    }
  }

  double lr_at(int step) const {
    if (total_steps_ <= 1) return lr0_;
    double t = static_cast<double>(step) / (total_steps_ - 1);
    double floor = lr0_ * lr_floor_frac_;
    return floor + 0.5 * (lr0_ - floor) * (1.0 + std::cos(3.14159265358979323846 * t));
  }

  void step(const Graph& g, int step_idx) {
    ++t_;
    double lr = lr_at(step_idx);
    double c1 = 1.0 - std::pow(beta1_, t_), c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor* p = params_[i];
      if (!g.has_param(*p)) continue;
      const Tensor& grad = g.grad_of(*p);
      for (std::size_t j = 0; j < p->numel(); ++j) {
        double gj = grad.data[j];
        m_[i].data[j] = beta1_ * m_[i].data[j] + (1.0 - beta1_) * gj;
        v_[i].data[j] = beta2_ * v_[i].data[j] + (1.0 - beta2_) * gj * gj;
        p->data[j] -=
            lr * (m_[i].data[j] / c1) / (std::sqrt(v_[i].data[j] / c2) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  double lr0_;
  int total_steps_;
  double beta1_, beta2_, eps_, lr_floor_frac_;
  long t_ = 0;
};

}  // namespace ens
