// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "gag/grad_check.hpp"
#include "gag/optim.hpp"
#include "gag/tensor.hpp"

using namespace gag;
using namespace gag::num;

using T64 = Tensor<double>;

TEST_CASE("matmul forward matches hand result") {
  auto a = T64::from_vector({2, 2}, {1, 2, 3, 4});
  auto b = T64::from_vector({2, 1}, {5, 6});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.values()[0] == doctest::Approx(17.0));
  CHECK(c.values()[1] == doctest::Approx(39.0));
}

TEST_CASE("matmul_nt forward matches hand result") {
  auto a = T64::from_vector({1, 2}, {1, 2});
  auto b = T64::from_vector({2, 2}, {3, 4, 5, 6});
  auto c = matmul_nt(a, b);
  CHECK(c.values()[0] == doctest::Approx(11.0));
  CHECK(c.values()[1] == doctest::Approx(17.0));
}

TEST_CASE("matmul shape mismatch raises dimension error") {
  auto a = T64::zeros({2, 3});
  auto b = T64::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), GagError);
  try {
    matmul(a, b);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::dimension_mismatch);
  }
}

TEST_CASE("softmax of log-integers gives exact ratios") {
  auto x = T64::from_vector({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
  auto y = softmax(x);
  CHECK(y.values()[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  CHECK(y.values()[2] == doctest::Approx(3.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("softmax is invariant to a large constant shift") {
  auto x = T64::from_vector({3}, {10000.0, 10001.0, 10002.0});
  auto y = softmax(x);
  double s = y.values()[0] + y.values()[1] + y.values()[2];
  CHECK(std::isfinite(y.values()[2]));
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax backward matches hand derivation") {
  auto x = T64::from_vector({2}, {0.0, 0.0}, true);
  auto y = softmax(x);
  auto sel = T64::from_vector({2}, {1.0, 0.0});
  auto loss = sum(mul(y, sel));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(-0.25).epsilon(1e-12));
}

TEST_CASE("gelu(1) matches the exact erf form") {
  auto x = T64::from_vector({1}, {1.0});
  CHECK(gelu(x).values()[0] == doctest::Approx(0.8413447460685429).epsilon(1e-10));
  auto z = T64::from_vector({1}, {0.0});
  CHECK(gelu(z).values()[0] == doctest::Approx(0.0));
}

TEST_CASE("rmsnorm forward on a hand case") {
  auto x = T64::from_vector({1, 2}, {3.0, 4.0});
  auto g = T64::from_vector({2}, {1.0, 1.0});
  auto y = rmsnorm(x, g, 0.0);
  CHECK(y.values()[0] == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-12));
}

TEST_CASE("uniform logits give log-vocab nll") {
  const int v = 256;
  auto logits = T64::zeros({1, v});
  auto loss = nll_masked(logits, {7}, {1});
  CHECK(loss.item() == doctest::Approx(std::log(256.0)).epsilon(1e-12));
}

TEST_CASE("nll with everything masked raises degenerate_mask") {
  auto logits = T64::zeros({2, 4});
  try {
    nll_masked(logits, {0, 1}, {0, 0});
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::degenerate_mask);
  }
}

TEST_CASE("causal softmax zeroes the strict upper triangle") {
  RandomStream rng(3);
  auto x = T64::randn({4, 4}, rng, 1.0);
  auto y = causal_softmax(x);
  for (int i = 0; i < 4; ++i) {
    double row = 0.0;
    for (int j = 0; j < 4; ++j) {
      if (j > i) CHECK(y.at(i, j) == 0.0);
      row += y.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("replace_row routes gradients around the replaced row") {
  auto x = T64::from_vector({2, 2}, {1, 2, 3, 4}, true);
  auto z = T64::from_vector({2}, {9, 9}, true);
  auto out = replace_row(x, 0, z);
  CHECK(out.at(0, 0) == 9.0);
  CHECK(out.at(1, 1) == 4.0);
  auto loss = sum(out);
  loss.backward();
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[3] == 1.0);
  CHECK(z.grad()[0] == 1.0);
  CHECK(z.grad()[1] == 1.0);
}

TEST_CASE("gather_rows accumulates over repeated ids") {
  auto tab = T64::from_vector({2, 2}, {1, 2, 3, 4}, true);
  auto out = gather_rows(tab, {0, 0, 1});
  CHECK(out.shape() == Shape{3, 2});
  sum(out).backward();
  CHECK(tab.grad()[0] == 2.0);
  CHECK(tab.grad()[1] == 2.0);
  CHECK(tab.grad()[2] == 1.0);
  CHECK(tab.grad()[3] == 1.0);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  auto x = T64::from_vector({2}, {1.0, 2.0}, true);
  sum(x).backward();
  sum(x).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 2.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
  auto x = T64::from_vector({2}, {1.0, 2.0}, true);
  NoGradGuard ng;
  auto y = scale(x, 2.0);
  CHECK(!y.requires_grad());
}

TEST_CASE("finite differences validate a feedforward composite") {
  RandomStream rng(7);
  ParamSet<double> ps;
  ps.add("x", T64::randn({3, 4}, rng, 0.8));
  ps.add("g", T64::rand_uniform({4}, rng, 0.5, 1.5));
  ps.add("w", T64::randn({4, 5}, rng, 0.6));
  ps.add("b", T64::randn({5}, rng, 0.3));
  ps.set_frozen(false);
  std::vector<int> targets{1, 3, 0};
  std::vector<uint8_t> mask{1, 0, 1};
  auto loss_fn = [&] {
    auto h = rmsnorm(ps.get("x"), ps.get("g"), 1e-6);
    auto y = gelu(add_rowvec(matmul(h, ps.get("w")), ps.get("b")));
    return nll_masked(y, targets, mask);
  };
  auto rep = check_gradients(ps, loss_fn, 1e-5);
  CHECK(rep.checked == 3 * 4 + 4 + 4 * 5 + 5);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate an attention composite") {
  RandomStream rng(11);
  ParamSet<double> ps;
  ps.add("q", T64::randn({4, 3}, rng, 0.7));
  ps.add("k", T64::randn({4, 3}, rng, 0.7));
  ps.add("v", T64::randn({4, 3}, rng, 0.7));
  auto loss_fn = [&] {
    auto scores = scale(matmul_nt(ps.get("q"), ps.get("k")), 1.0 / std::sqrt(3.0));
    auto attn = causal_softmax(scores);
    auto h = matmul(attn, ps.get("v"));
    return mean(mul(h, h));
  };
  auto rep = check_gradients(ps, loss_fn, 1e-5);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("finite differences validate gather/replace/concat/slice composite") {
  RandomStream rng(13);
  ParamSet<double> ps;
  ps.add("tab", T64::randn({6, 4}, rng, 0.9));
  ps.add("z", T64::randn({4}, rng, 0.9));
  auto loss_fn = [&] {
    auto e = gather_rows(ps.get("tab"), {2, 5, 2, 0});
    auto injected = replace_row(e, 1, ps.get("z"));
    auto both = concat_rows<double>({injected, slice_rows(e, 0, 2)});
    auto left = slice_cols(both, 0, 2);
    auto r = row_of(both, 3);
    return add(mean(mul(left, left)), mean(mul(r, r)));
  };
  auto rep = check_gradients(ps, loss_fn, 1e-5);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("adamw single step matches hand computation") {
  ParamSet<double> ps;
  ps.add("w", T64::from_vector({1}, {1.0}));
  AdamW<double> opt(ps, {0.9, 0.999, 1e-8, 0.01});
  ps.get("w").zero_grad();
  // plant the gradient by running a graph: loss = 0.5 * w
  auto loss = scale(ps.get("w"), 0.5);
  sum(loss).backward();
  CHECK(ps.get("w").grad()[0] == doctest::Approx(0.5).epsilon(1e-15));
  opt.step(0.1);
  // m=0.05 v=2.5e-4 mhat=0.5 vhat=0.25; w -= 0.1*(0.5/(0.5+1e-8) + 0.01*1)
  CHECK(ps.get("w").values()[0] == doctest::Approx(0.899000002).epsilon(1e-12));
}

TEST_CASE("grad_scale averages accumulated micro-batch gradients") {
  ParamSet<double> a, b;
  a.add("w", T64::from_vector({1}, {1.0}));
  b.add("w", T64::from_vector({1}, {1.0}));
  AdamW<double> oa(a, {});
  AdamW<double> ob(b, {});
  a.zero_grad();
  sum(scale(a.get("w"), 0.5)).backward();
  sum(scale(a.get("w"), 0.5)).backward();
  oa.step(0.1, 2.0);
  b.zero_grad();
  sum(scale(b.get("w"), 0.5)).backward();
  ob.step(0.1, 1.0);
  CHECK(a.get("w").values()[0] == doctest::Approx(b.get("w").values()[0]).epsilon(1e-15));
}

TEST_CASE("stepping a frozen parameter set raises frozen_discipline") {
  ParamSet<double> ps;
  ps.add("w", T64::from_vector({1}, {1.0}));
  AdamW<double> opt(ps, {});
  ps.set_frozen(true);
  try {
    opt.step(0.1);
    CHECK(false);
  } catch (const GagError& e) {
    CHECK(e.code() == ErrorCode::frozen_discipline);
  }
}

TEST_CASE("frozen tensors stay out of the autodiff graph") {
  ParamSet<double> ps;
  ps.add("w", T64::from_vector({2}, {1.0, 2.0}));
  ps.set_frozen(true);
  auto loss = sum(scale(ps.get("w"), 3.0));
  CHECK(!loss.requires_grad());
  loss.backward();  // no-op on a non-grad root
  CHECK(ps.get("w").grad()[0] == 0.0);
}

TEST_CASE("warmup plus cosine decay hits pinned values") {
  LrSchedule s{LrSchedule::Decay::cosine, 1.0, 0.1, 20};
  CHECK(s.warmup_steps() == 2);
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.at(1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.at(2) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.at(11) == doctest::Approx(0.5).epsilon(1e-12));  // halfway through decay
}

TEST_CASE("warmup plus linear decay hits pinned values") {
  LrSchedule s{LrSchedule::Decay::linear, 2.0, 0.1, 20};
  CHECK(s.at(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.at(2) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(s.at(11) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(s.at(20), GagError);
}

TEST_CASE("random streams are reproducible across instances") {
  RandomStream a(42), b(42);
  for (int i = 0; i < 64; ++i) CHECK(a.next_u64() == b.next_u64());
  RandomStream c(42), d(42);
  for (int i = 0; i < 64; ++i) CHECK(c.normal() == d.normal());
  RandomStream e(1), f(2);
  bool differ = false;
  for (int i = 0; i < 8; ++i) differ = differ || (e.next_u64() != f.next_u64());
  CHECK(differ);
}

TEST_CASE("uniform_index stays in range and covers values") {
  RandomStream rng(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 2000; ++i) {
    int64_t k = rng.uniform_index(7);
    REQUIRE(k >= 0);
    REQUIRE(k < 7);
    ++hits[k];
  }
  for (int h : hits) CHECK(h > 0);
}
