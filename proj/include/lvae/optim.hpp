#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lvae/model.hpp"

namespace lvae {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction.  Moment buffers follow the model's parameter
/// visiting order and carry the parameter names for checkpointing.
template <class T>
class Adam {
public:
  Adam() = default;
  Adam(Model<T>& model, AdamConfig cfg) : cfg_(cfg) {
    model.visit_params([&](nn::Param<T>& p) {
      m_.push_back({"adam.m/" + p.name, nn::Mat<T>::Zero(p.value.rows(), p.value.cols())});
      v_.push_back({"adam.v/" + p.name, nn::Mat<T>::Zero(p.value.rows(), p.value.cols())});
    });
  }

  const AdamConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }
  void set_steps(std::int64_t t) { t_ = t; }

  void step(Model<T>& model) {
    ++t_;
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2), eps = static_cast<T>(cfg_.eps);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    std::size_t k = 0;
    model.visit_params([&](nn::Param<T>& p) {
      auto& m = m_[k].value;
      auto& v = v_[k].value;
      ++k;
      m = b1 * m + (T(1) - b1) * p.grad;
      v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
      if (lr == T(0)) return;
      p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    });
  }

  template <class Fn>
  void visit_buffers(Fn&& fn) {
    for (auto& b : m_) fn(b);
    for (auto& b : v_) fn(b);
  }

private:
  AdamConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<nn::Buffer<T>> m_, v_;
};

}  // namespace lvae
