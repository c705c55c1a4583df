// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Named parameter sets with a freeze bit, AdamW, and warmup LR schedules.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "gag/errors.hpp"
#include "gag/tensor.hpp"

namespace gag::num {

// Insertion-ordered parameter registry. Freezing flips requires_grad on every
// tensor so frozen weights never enter the autodiff graph as differentiable
// leaves; optimizers refuse to touch a frozen set outright.
template <class S>
class ParamSet {
 public:
  void add(const std::string& name, Tensor<S> t) {
    if (index_.count(name)) raise(ErrorCode::conflict, "duplicate parameter " + name);
    t.set_requires_grad(!frozen_);
    index_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
  }

  Tensor<S>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) raise(ErrorCode::input, "unknown parameter " + name);
    return tensors_[it->second];
  }

  const Tensor<S>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) raise(ErrorCode::input, "unknown parameter " + name);
    return tensors_[it->second];
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }
  size_t size() const { return tensors_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor<S>& at(size_t i) { return tensors_[i]; }
  const Tensor<S>& at(size_t i) const { return tensors_[i]; }

  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& t : tensors_) t.set_requires_grad(!frozen);
  }
  bool frozen() const { return frozen_; }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> tensors_;
  std::unordered_map<std::string, size_t> index_;
  bool frozen_ = false;
};

// Learning-rate schedule with a linear warmup followed by cosine or linear
// decay. Warmup spans max(1, round(ratio * total)) steps when ratio > 0.
struct LrSchedule {
  enum class Decay { cosine, linear, constant };

  Decay decay = Decay::cosine;
  double base_lr = 0.0;
  double warmup_ratio = 0.0;
  int64_t total_steps = 0;

  int64_t warmup_steps() const {
    if (warmup_ratio <= 0.0) return 0;
    return std::max<int64_t>(1, static_cast<int64_t>(std::llround(warmup_ratio * static_cast<double>(total_steps))));
  }

  double at(int64_t step) const {
    if (total_steps <= 0) raise(ErrorCode::config, "schedule total_steps must be positive");
    if (step < 0 || step >= total_steps) raise(ErrorCode::range, "schedule step " + std::to_string(step));
    const int64_t w = warmup_steps();
    if (step < w) return base_lr * static_cast<double>(step + 1) / static_cast<double>(w);
    if (decay == Decay::constant) return base_lr;
    const double span = static_cast<double>(std::max<int64_t>(1, total_steps - w));
    const double p = static_cast<double>(step - w) / span;
    if (decay == Decay::cosine) return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * p));
    return base_lr * (1.0 - p);
  }
};

template <class S>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(ParamSet<S>& params, Options opt) : params_(&params), opt_(opt) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params.at(i).size(), 0.0);
      v_[i].assign(params.at(i).size(), 0.0);
    }
  }

  // One decoupled-weight-decay Adam update at the given learning rate.
  // grad_scale divides the accumulated gradients first (micro-batching).
  void step(double lr, double grad_scale = 1.0) {
    if (params_->frozen())
      raise(ErrorCode::frozen_discipline, "optimizer step on a frozen parameter set");
    ++t_;
    const double b1c = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double b2c = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_->size(); ++i) {
      Tensor<S>& p = params_->at(i);
      auto g = p.grad();
      auto w = p.raw();
      for (int64_t j = 0; j < p.size(); ++j) {
        const double gj = static_cast<double>(g[j]) / grad_scale;
        m_[i][j] = opt_.beta1 * m_[i][j] + (1.0 - opt_.beta1) * gj;
        v_[i][j] = opt_.beta2 * v_[i][j] + (1.0 - opt_.beta2) * gj * gj;
        const double mhat = m_[i][j] / b1c;
        const double vhat = v_[i][j] / b2c;
        double wj = static_cast<double>(w[j]);
        wj -= lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * wj);
        w[j] = static_cast<S>(wj);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  ParamSet<S>* params_;
  Options opt_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace gag::num
