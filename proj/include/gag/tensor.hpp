// Copyright (c) 2026 The gaglite authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors (rank 0..2) with reverse-mode gradients.
// The scalar type is a template parameter: float for runtime, double for
// finite-difference verification.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "gag/errors.hpp"

namespace gag::num {

using Shape = std::vector<int64_t>;

inline int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

// Deterministic stream of uniforms / normals. Hand-rolled transforms so the
// produced values depend only on the seed, not on the standard library.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  double uniform() {  // [0,1)
    return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double normal() {  // Box-Muller
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  int64_t uniform_index(int64_t n) {  // [0,n)
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t bound = UINT64_MAX - UINT64_MAX % un;
    uint64_t x;
    do {
      x = eng_();
    } while (x >= bound);
    return static_cast<int64_t>(x % un);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_index(i + 1);
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Graph construction can be disabled for inference-only passes.
inline bool& autograd_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(autograd_enabled()) { autograd_enabled() = false; }
  ~NoGradGuard() { autograd_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class S>
class Tensor {
  struct Node {
    Shape shape;
    std::vector<S> val;
    std::vector<S> grad;  // empty until first backward touches it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;

    void ensure_grad() {
      if (grad.empty()) grad.assign(val.size(), S(0));
    }
  };

 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->val.assign(shape_size(t.n_->shape), S(0));
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.n_->val) x = value;
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_size(shape))
      raise(ErrorCode::dimension_mismatch,
            "tensor data length " + std::to_string(data.size()) + " != product of " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->val = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar_value(S v, bool requires_grad = false) {
    return from_vector({}, {v}, requires_grad);
  }

  static Tensor randn(Shape shape, RandomStream& rng, S stddev, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.n_->val) x = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  static Tensor rand_uniform(Shape shape, RandomStream& rng, S lo, S hi, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.n_->val) x = lo + static_cast<S>(rng.uniform()) * (hi - lo);
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t rank() const { return static_cast<int64_t>(n_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(n_->val.size()); }
  int64_t rows() const { return rank() == 2 ? n_->shape[0] : 1; }
  int64_t cols() const { return rank() == 2 ? n_->shape[1] : (rank() == 1 ? n_->shape[0] : 1); }

  std::span<const S> values() const { return {n_->val.data(), n_->val.size()}; }
  // Mutable access; intended for leaf initialization and finite-difference
  // perturbation only. Mutating an interior graph node invalidates gradients.
  std::span<S> raw() { return {n_->val.data(), n_->val.size()}; }

  S item() const {
    if (size() != 1) raise(ErrorCode::dimension_mismatch, "item() on non-scalar " + shape_str(shape()));
    return n_->val[0];
  }

  S at(int64_t r, int64_t c) const { return n_->val[r * cols() + c]; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  std::span<const S> grad() const {
    n_->ensure_grad();
    return {n_->grad.data(), n_->grad.size()};
  }

  void zero_grad() { n_->grad.assign(n_->val.size(), S(0)); }

  bool all_finite() const {
    for (S x : n_->val)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  // Reverse-mode sweep from a scalar root. Gradients accumulate into every
  // reachable node with requires_grad set.
  void backward() {
    if (size() != 1) raise(ErrorCode::dimension_mismatch, "backward() root must be scalar");
    if (!n_->requires_grad) return;
    std::vector<Node*> order;
    topo(order);
    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backfn) node->backfn(*node);
    }
  }

  // -- graph plumbing used by the op definitions below --
  using NodePtr = std::shared_ptr<Node>;
  NodePtr node() const { return n_; }

  static Tensor make_op(Shape shape, std::vector<S> val, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backfn) {
    Tensor t = from_vector(std::move(shape), std::move(val));
    if (!autograd_enabled()) return t;
    bool rg = false;
    for (const Tensor& in : inputs) rg = rg || in.requires_grad();
    if (!rg) return t;
    t.n_->requires_grad = true;
    for (Tensor& in : inputs) t.n_->parents.push_back(in.n_);
    t.n_->backfn = std::move(backfn);
    return t;
  }

 private:
  void topo(std::vector<Node*>& order) const {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* p = node->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          p->ensure_grad();
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  NodePtr n_;
};

// ---------------------------------------------------------------------------
// raw matmul kernels (row-major)

namespace detail {

// C[m,n] (+)= A[m,k] * B[k,n]
template <class S, bool Acc>
void mm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  if constexpr (!Acc) std::fill(c, c + m * n, S(0));
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const S av = arow[l];
      if (av == S(0)) continue;
      const S* brow = b + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class S, bool Acc>
void mm_nt(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  if constexpr (!Acc) std::fill(c, c + m * n, S(0));
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = S(0);
      for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
template <class S, bool Acc>
void mm_tn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  if constexpr (!Acc) std::fill(c, c + k * n, S(0));
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const S av = arow[l];
      if (av == S(0)) continue;
      S* crow = c + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class S>
inline S gelu_value(S x) {
  return S(0.5) * x * (S(1) + static_cast<S>(std::erf(static_cast<double>(x) * 0.7071067811865475)));
}

template <class S>
inline S gelu_grad(S x) {
  const double xd = static_cast<double>(x);
  const double cdf = 0.5 * (1.0 + std::erf(xd * 0.7071067811865475));
  const double pdf = std::exp(-0.5 * xd * xd) * 0.3989422804014327;  // 1/sqrt(2*pi)
  return static_cast<S>(cdf + xd * pdf);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// operations

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    raise(ErrorCode::dimension_mismatch,
          "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<S> out(m * n);
  detail::mm_nn<S, false>(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nt<S, true>(node.grad.data(), bn->val.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn<S, true>(an->val.data(), node.grad.data(), bn->grad.data(), m, k, n);
    }
  });
}

// a * b^T; the attention-score form (rows of b are the keys).
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    raise(ErrorCode::dimension_mismatch,
          "matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<S> out(m * n);
  detail::mm_nt<S, false>(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nn<S, true>(node.grad.data(), bn->val.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn<S, true>(node.grad.data(), an->val.data(), bn->grad.data(), m, n, k);
    }
  });
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    raise(ErrorCode::dimension_mismatch, "add " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.values().begin(), a.values().end());
  for (int64_t i = 0; i < b.size(); ++i) out[i] += b.values()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i];
    }
  });
}

// rows of a plus the vector v
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& a, const Tensor<S>& v) {
  if (a.rank() != 2 || v.rank() != 1 || a.shape()[1] != v.shape()[0])
    raise(ErrorCode::dimension_mismatch,
          "add_rowvec " + shape_str(a.shape()) + " + " + shape_str(v.shape()));
  const int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<S> out(a.values().begin(), a.values().end());
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] += v.values()[j];
  auto an = a.node(), vn = v.node();
  return Tensor<S>::make_op({m, n}, std::move(out), {a, v}, [an, vn, m, n](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    }
    if (vn->requires_grad) {
      vn->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) vn->grad[j] += node.grad[i * n + j];
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    raise(ErrorCode::dimension_mismatch, "sub " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.values().begin(), a.values().end());
  for (int64_t i = 0; i < b.size(); ++i) out[i] -= b.values()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] -= node.grad[i];
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    raise(ErrorCode::dimension_mismatch, "mul " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i] * bn->val[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) bn->grad[i] += node.grad[i] * an->val[i];
    }
  });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  std::vector<S> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a.values()[i] * c;
  auto an = a.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [an, c](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i] * c;
  });
}

// exact-erf GELU, elementwise
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  std::vector<S> out(a.size());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = detail::gelu_value(a.values()[i]);
  auto an = a.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [an](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i)
      an->grad[i] += node.grad[i] * detail::gelu_grad(an->val[i]);
  });
}

// softmax along the last axis (each row; a rank-1 input is one row),
// computed with max subtraction.
template <class S>
Tensor<S> softmax(const Tensor<S>& a) {
  const int64_t m = a.rows(), n = a.cols();
  std::vector<S> out(a.size());
  const S* x = a.values().data();
  for (int64_t i = 0; i < m; ++i) {
    S mx = x[i * n];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
    S sum = S(0);
    for (int64_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(x[i * n + j] - mx);
      sum += out[i * n + j];
    }
    for (int64_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  auto an = a.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [an, m, n](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      const S* y = node.val.data() + i * n;
      const S* dy = node.grad.data() + i * n;
      S dot = S(0);
      for (int64_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      S* dx = an->grad.data() + i * n;
      for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

// Row i is a softmax over columns 0..i; the rest of the row is exactly zero.
template <class S>
Tensor<S> causal_softmax(const Tensor<S>& a) {
  if (a.rank() != 2 || a.shape()[0] != a.shape()[1])
    raise(ErrorCode::dimension_mismatch, "causal_softmax needs square input, got " + shape_str(a.shape()));
  const int64_t t = a.shape()[0];
  std::vector<S> out(a.size(), S(0));
  const S* x = a.values().data();
  for (int64_t i = 0; i < t; ++i) {
    S mx = x[i * t];
    for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, x[i * t + j]);
    S sum = S(0);
    for (int64_t j = 0; j <= i; ++j) {
      out[i * t + j] = std::exp(x[i * t + j] - mx);
      sum += out[i * t + j];
    }
    for (int64_t j = 0; j <= i; ++j) out[i * t + j] /= sum;
  }
  auto an = a.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a}, [an, t](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < t; ++i) {
      const S* y = node.val.data() + i * t;
      const S* dy = node.grad.data() + i * t;
      S dot = S(0);
      for (int64_t j = 0; j <= i; ++j) dot += y[j] * dy[j];
      S* dx = an->grad.data() + i * t;
      for (int64_t j = 0; j <= i; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
}

// y = x / sqrt(mean(x^2) + eps) * g, per row
template <class S>
Tensor<S> rmsnorm(const Tensor<S>& a, const Tensor<S>& g, S eps) {
  const int64_t m = a.rows(), n = a.cols();
  if (g.rank() != 1 || g.shape()[0] != n)
    raise(ErrorCode::dimension_mismatch, "rmsnorm gain " + shape_str(g.shape()) + " vs cols " + std::to_string(n));
  std::vector<S> out(a.size());
  std::vector<S> rinv(m);
  const S* x = a.values().data();
  const S* gv = g.values().data();
  for (int64_t i = 0; i < m; ++i) {
    S ms = S(0);
    for (int64_t j = 0; j < n; ++j) ms += x[i * n + j] * x[i * n + j];
    ms /= static_cast<S>(n);
    rinv[i] = S(1) / std::sqrt(ms + eps);
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * rinv[i] * gv[j];
  }
  auto an = a.node(), gn = g.node();
  return Tensor<S>::make_op(a.shape(), std::move(out), {a, g},
                            [an, gn, m, n, rinv = std::move(rinv)](auto& node) {
    for (int64_t i = 0; i < m; ++i) {
      const S r = rinv[i];
      const S* xi = an->val.data() + i * n;
      const S* dyi = node.grad.data() + i * n;
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int64_t j = 0; j < n; ++j) gn->grad[j] += dyi[j] * xi[j] * r;
      }
      if (an->requires_grad) {
        an->ensure_grad();
        S dot = S(0);
        for (int64_t j = 0; j < n; ++j) dot += dyi[j] * gn->val[j] * xi[j];
        const S k = r * r * r * dot / static_cast<S>(n);
        S* dxi = an->grad.data() + i * n;
        for (int64_t j = 0; j < n; ++j) dxi[j] += dyi[j] * gn->val[j] * r - k * xi[j];
      }
    }
  });
}

// out[i] = table[ids[i]]; gradient scatter-adds into the table.
template <class S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) raise(ErrorCode::dimension_mismatch, "gather_rows table must be rank 2");
  const int64_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids)
    if (id < 0 || id >= v) raise(ErrorCode::range, "gather_rows id " + std::to_string(id) + " out of " + std::to_string(v));
  const int64_t m = static_cast<int64_t>(ids.size());
  std::vector<S> out(m * d);
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(table.values().data() + static_cast<int64_t>(ids[i]) * d, d, out.data() + i * d);
  auto tn = table.node();
  return Tensor<S>::make_op({m, d}, std::move(out), {table}, [tn, ids, d](auto& node) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      const S* src = node.grad.data() + static_cast<int64_t>(i) * d;
      S* dst = tn->grad.data() + static_cast<int64_t>(ids[i]) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <class S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) raise(ErrorCode::input, "concat_rows of nothing");
  const int64_t n = parts[0].cols();
  int64_t m = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[1] != n)
      raise(ErrorCode::dimension_mismatch, "concat_rows column mismatch");
    m += p.shape()[0];
  }
  std::vector<S> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<typename Tensor<S>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return Tensor<S>::make_op({m, n}, std::move(out), parts, [nodes, n](auto& node) {
    int64_t row = 0;
    for (auto& pn : nodes) {
      const int64_t pm = pn->shape[0];
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (int64_t i = 0; i < pm * n; ++i) pn->grad[i] += node.grad[row * n + i];
      }
      row += pm;
    }
  });
}

template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) raise(ErrorCode::input, "concat_cols of nothing");
  const int64_t m = parts[0].rows();
  int64_t n = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != m)
      raise(ErrorCode::dimension_mismatch, "concat_cols row mismatch");
    n += p.shape()[1];
  }
  std::vector<S> out(m * n);
  int64_t col = 0;
  for (const auto& p : parts) {
    const int64_t pn = p.shape()[1];
    for (int64_t i = 0; i < m; ++i)
      std::copy_n(p.values().data() + i * pn, pn, out.data() + i * n + col);
    col += pn;
  }
  std::vector<typename Tensor<S>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return Tensor<S>::make_op({m, n}, std::move(out), parts, [nodes, m, n](auto& node) {
    int64_t col = 0;
    for (auto& pn : nodes) {
      const int64_t w = pn->shape[1];
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < w; ++j) pn->grad[i * w + j] += node.grad[i * n + col + j];
      }
      col += w;
    }
  });
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int64_t r0, int64_t r1) {
  if (a.rank() != 2 || r0 < 0 || r1 > a.shape()[0] || r0 >= r1)
    raise(ErrorCode::range, "slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + shape_str(a.shape()));
  const int64_t n = a.shape()[1], m = r1 - r0;
  std::vector<S> out(a.values().begin() + r0 * n, a.values().begin() + r1 * n);
  auto an = a.node();
  return Tensor<S>::make_op({m, n}, std::move(out), {a}, [an, r0, m, n](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m * n; ++i) an->grad[r0 * n + i] += node.grad[i];
  });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int64_t c0, int64_t c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.shape()[1] || c0 >= c1)
    raise(ErrorCode::range, "slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + shape_str(a.shape()));
  const int64_t m = a.shape()[0], n = a.shape()[1], w = c1 - c0;
  std::vector<S> out(m * w);
  for (int64_t i = 0; i < m; ++i)
    std::copy_n(a.values().data() + i * n + c0, w, out.data() + i * w);
  auto an = a.node();
  return Tensor<S>::make_op({m, w}, std::move(out), {a}, [an, c0, m, n, w](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) an->grad[i * n + c0 + j] += node.grad[i * w + j];
  });
}

// Copy of a with row r replaced by `row` (rank 1). Gradient to a skips the
// replaced row; gradient to `row` is exactly that row of the output grad.
template <class S>
Tensor<S> replace_row(const Tensor<S>& a, int64_t r, const Tensor<S>& row) {
  if (a.rank() != 2 || row.rank() != 1 || row.shape()[0] != a.shape()[1])
    raise(ErrorCode::dimension_mismatch,
          "replace_row " + shape_str(a.shape()) + " row " + shape_str(row.shape()));
  if (r < 0 || r >= a.shape()[0]) raise(ErrorCode::range, "replace_row index " + std::to_string(r));
  const int64_t m = a.shape()[0], n = a.shape()[1];
  std::vector<S> out(a.values().begin(), a.values().end());
  std::copy_n(row.values().data(), n, out.data() + r * n);
  auto an = a.node(), rn = row.node();
  return Tensor<S>::make_op({m, n}, std::move(out), {a, row}, [an, rn, r, n](auto& node) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) {
        const int64_t rowi = static_cast<int64_t>(i) / n;
        if (rowi != r) an->grad[i] += node.grad[i];
      }
    }
    if (rn->requires_grad) {
      rn->ensure_grad();
      for (int64_t j = 0; j < n; ++j) rn->grad[j] += node.grad[r * n + j];
    }
  });
}

template <class S>
Tensor<S> row_of(const Tensor<S>& a, int64_t r) {
  if (a.rank() != 2 || r < 0 || r >= a.shape()[0])
    raise(ErrorCode::range, "row_of " + std::to_string(r) + " of " + shape_str(a.shape()));
  const int64_t n = a.shape()[1];
  std::vector<S> out(a.values().begin() + r * n, a.values().begin() + (r + 1) * n);
  auto an = a.node();
  return Tensor<S>::make_op({n}, std::move(out), {a}, [an, r, n](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t j = 0; j < n; ++j) an->grad[r * n + j] += node.grad[j];
  });
}

// Same data, new shape; gradients pass through untouched.
template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (shape_size(shape) != a.size())
    raise(ErrorCode::dimension_mismatch,
          "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<S> out(a.values().begin(), a.values().end());
  auto an = a.node();
  return Tensor<S>::make_op(std::move(shape), std::move(out), {a}, [an](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
  });
}

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S s = S(0);
  for (S x : a.values()) s += x;
  auto an = a.node();
  return Tensor<S>::make_op({}, {s}, {a}, [an](auto& node) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (S& g : an->grad) g += node.grad[0];
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / static_cast<S>(a.size()));
}

// Mean of -log softmax(logits)[target] over positions where mask is set.
template <class S>
Tensor<S> nll_masked(const Tensor<S>& logits, const std::vector<int>& targets,
                     const std::vector<uint8_t>& mask) {
  if (logits.rank() != 2) raise(ErrorCode::dimension_mismatch, "nll_masked logits must be rank 2");
  const int64_t t = logits.shape()[0], v = logits.shape()[1];
  if (static_cast<int64_t>(targets.size()) != t || static_cast<int64_t>(mask.size()) != t)
    raise(ErrorCode::dimension_mismatch, "nll_masked targets/mask length mismatch");
  int64_t count = 0;
  for (uint8_t m : mask)
    if (m) ++count;
  if (count == 0) raise(ErrorCode::degenerate_mask, "nll_masked: every position is masked out");
  const S* x = logits.values().data();
  double loss = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || targets[i] >= v)
      raise(ErrorCode::range, "nll_masked target " + std::to_string(targets[i]));
    double mx = x[i * v];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(x[i * v + j]));
    double sum = 0.0;
    for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(x[i * v + j]) - mx);
    loss += mx + std::log(sum) - static_cast<double>(x[i * v + targets[i]]);
  }
  loss /= static_cast<double>(count);
  auto ln = logits.node();
  return Tensor<S>::make_op({}, {static_cast<S>(loss)}, {logits},
                            [ln, targets, mask, t, v, count](auto& node) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const S g = node.grad[0] / static_cast<S>(count);
    for (int64_t i = 0; i < t; ++i) {
      if (!mask[i]) continue;
      const S* xi = ln->val.data() + i * v;
      S mx = xi[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
      S sum = S(0);
      for (int64_t j = 0; j < v; ++j) sum += std::exp(xi[j] - mx);
      S* dxi = ln->grad.data() + i * v;
      for (int64_t j = 0; j < v; ++j) dxi[j] += g * std::exp(xi[j] - mx) / sum;
      dxi[targets[i]] -= g;
    }
  });
}

}  // namespace gag::num
