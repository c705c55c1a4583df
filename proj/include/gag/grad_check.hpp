// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference verification of reverse-mode gradients.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "gag/errors.hpp"
#include "gag/optim.hpp"
#include "gag/tensor.hpp"

namespace gag::num {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_name;
  int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
  int64_t checked = 0;
};

// Compares analytic gradients of loss_fn against a five-point central
// difference over every scalar in `params` (or a seeded subsample of
// max_per_tensor entries). The higher-order stencil tolerates the larger
// step needed to keep roundoff below truncation when true gradients are
// tiny relative to the loss. loss_fn must rebuild its graph on each call
// and be pure in the parameters.
template <class S, class LossFn>
GradCheckReport check_gradients(ParamSet<S>& params, LossFn&& loss_fn, double h_base = 1e-3,
                                int64_t max_per_tensor = -1, uint64_t subsample_seed = 0) {
  params.zero_grad();
  Tensor<S> loss = loss_fn();
  if (!std::isfinite(static_cast<double>(loss.item())))
    raise(ErrorCode::numeric, "gradient check: loss is not finite");
  loss.backward();

  std::vector<std::vector<S>> analytic(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    auto g = params.at(i).grad();
    analytic[i].assign(g.begin(), g.end());
  }

  RandomStream pick(subsample_seed);
  GradCheckReport rep;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<S>& p = params.at(i);
    std::vector<int64_t> idx(p.size());
    for (int64_t j = 0; j < p.size(); ++j) idx[j] = j;
    if (max_per_tensor > 0 && p.size() > max_per_tensor) {
      pick.shuffle(idx);
      idx.resize(max_per_tensor);
    }
    auto w = p.raw();
    for (int64_t j : idx) {
      const S orig = w[j];
      const double h = h_base * std::max(1.0, std::abs(static_cast<double>(orig)));
      double lp1, lm1, lp2, lm2;
      {
        NoGradGuard ng;
        auto eval_at = [&](double delta) {
          w[j] = static_cast<S>(static_cast<double>(orig) + delta);
          return static_cast<double>(loss_fn().item());
        };
        lp1 = eval_at(h);
        lm1 = eval_at(-h);
        lp2 = eval_at(2.0 * h);
        lm2 = eval_at(-2.0 * h);
        w[j] = orig;
      }
      if (!std::isfinite(lp1) || !std::isfinite(lm1) || !std::isfinite(lp2) || !std::isfinite(lm2))
        raise(ErrorCode::numeric, "gradient check: perturbed loss is not finite");
      const double fd = (8.0 * (lp1 - lm1) - (lp2 - lm2)) / (12.0 * h);
      const double ad = static_cast<double>(analytic[i][j]);
      const double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-8});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_name = params.names()[i];
        rep.worst_index = j;
        rep.worst_analytic = ad;
        rep.worst_fd = fd;
      }
    }
  }
  return rep;
}

}  // namespace gag::num
