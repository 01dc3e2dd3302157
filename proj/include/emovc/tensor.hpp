// Copyright (c) 2026 emovc authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef EMOVC_TENSOR_HPP_
#define EMOVC_TENSOR_HPP_

// Reverse-mode autodiff over dense tensors, sized for the small networks in
// this project. Each op builds a node holding its value and a backward
// closure; Tensor::backward() runs a topological sweep. GEMMs go through
// Eigen; convolutions are im2col + GEMM with the column buffer recomputed in
// the backward pass instead of cached.

#include <Eigen/Core>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "emovc/common.hpp"

namespace emovc::ad {

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

template <class T>
struct Node {
  std::vector<int> shape;
  std::vector<T> v;
  std::vector<T> g;
  bool rg = false;  // participates in the backward sweep
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> back;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), T(0));
  }
};

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
class Tensor {
 public:
  NodePtr<T> n;

  Tensor() = default;
  explicit Tensor(NodePtr<T> node) : n(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->v.assign(node->numel(), T(0));
    return Tensor(node);
  }
  static Tensor full(std::vector<int> shape, T value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.n->v.begin(), t.n->v.end(), value);
    return t;
  }
  static Tensor from_data(std::vector<int> shape, std::vector<T> data) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->v = std::move(data);
    if (static_cast<int64_t>(node->v.size()) != node->numel())
      throw std::invalid_argument("tensor data size does not match shape");
    return Tensor(node);
  }
  // Trainable parameter: leaf that accumulates gradient.
  static Tensor param(std::vector<int> shape, std::vector<T> data) {
    Tensor t = from_data(std::move(shape), std::move(data));
    t.n->rg = true;
    return t;
  }

  bool defined() const { return n != nullptr; }
  const std::vector<int>& shape() const { return n->shape; }
  int dim(int i) const { return n->shape[i]; }
  int64_t numel() const { return n->numel(); }
  bool requires_grad() const { return n->rg; }

  std::vector<T>& values() { return n->v; }
  const std::vector<T>& values() const { return n->v; }
  std::vector<T>& grad() {
    n->ensure_grad();
    return n->g;
  }

  T item() const {
    if (n->numel() != 1) throw std::logic_error("item() on non-scalar tensor");
    return n->v[0];
  }

  void zero_grad() { n->g.assign(n->v.size(), T(0)); }

  // Reverse sweep from a scalar output.
  void backward() {
    if (n->numel() != 1) throw std::logic_error("backward() needs a scalar loss");
    // Topological order via iterative post-order DFS.
    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({n.get(), 0});
    seen.insert(n.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node<T>* p = node->parents[idx++].get();
        if (p->rg && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        topo.push_back(node);
        stack.pop_back();
      }
    }
    n->ensure_grad();
    n->g[0] += T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
      if ((*it)->back) (*it)->back();
  }
};

namespace detail {

template <class T>
inline Tensor<T> make_out(std::vector<int> shape) {
  return Tensor<T>::zeros(std::move(shape));
}

template <class T>
inline bool track(std::initializer_list<const Tensor<T>*> inputs) {
  if (!g_grad_enabled) return false;
  for (auto* t : inputs)
    if ((*t).n->rg) return true;
  return false;
}

template <class T>
inline void attach(Tensor<T>& out, std::initializer_list<Tensor<T>> parents,
                   std::function<void()> back) {
  out.n->rg = true;
  for (const auto& p : parents) out.n->parents.push_back(p.n);
  out.n->back = std::move(back);
}

template <class T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ------------------------------- elementwise -------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = a.n->v[i] + b.n->v[i];
  if (detail::track<T>({&a, &b})) {
    auto an = a.n, bn = b.n;
    auto on = out.n.get();
    detail::attach(out, {a, b}, [an, bn, on, n] {
      if (an->rg) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i];
      }
      if (bn->rg) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bn->g[i] += on->g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = a.n->v[i] - b.n->v[i];
  if (detail::track<T>({&a, &b})) {
    auto an = a.n, bn = b.n;
    auto on = out.n.get();
    detail::attach(out, {a, b}, [an, bn, on, n] {
      if (an->rg) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i];
      }
      if (bn->rg) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bn->g[i] -= on->g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = a.n->v[i] * b.n->v[i];
  if (detail::track<T>({&a, &b})) {
    auto an = a.n, bn = b.n;
    auto on = out.n.get();
    detail::attach(out, {a, b}, [an, bn, on, n] {
      if (an->rg) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i] * bn->v[i];
      }
      if (bn->rg) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) bn->g[i] += on->g[i] * an->v[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = a.n->v[i] / b.n->v[i];
  if (detail::track<T>({&a, &b})) {
    auto an = a.n, bn = b.n;
    auto on = out.n.get();
    detail::attach(out, {a, b}, [an, bn, on, n] {
      if (an->rg) {
        an->ensure_grad();
        for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i] / bn->v[i];
      }
      if (bn->rg) {
        bn->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          bn->g[i] -= on->g[i] * an->v[i] / (bn->v[i] * bn->v[i]);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T alpha) {
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = a.n->v[i] * alpha;
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, n, alpha] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i] * alpha;
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = a.n->v[i] + c;
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, n] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i];
    });
  }
  return out;
}

template <class T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF df) {
  auto out = detail::make_out<T>(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = f(a.n->v[i]);
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, n, df] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i] * df(an->v[i], on->v[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary_op(a,
                  [](T x) { return x / (T(1) + std::exp(-x)); },
                  [](T x, T) {
                    T s = T(1) / (T(1) + std::exp(-x));
                    return s * (T(1) + x * (T(1) - s));
                  });
}

template <class T>
Tensor<T> tanh_(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::tanh(x); },
                  [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                  [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> exp_(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return unary_op(a,
                  [lo, hi](T x) { return std::min(hi, std::max(lo, x)); },
                  [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

// 1/sqrt(x + eps)
template <class T>
Tensor<T> rsqrt_eps(const Tensor<T>& a, T eps) {
  return unary_op(a,
                  [eps](T x) { return T(1) / std::sqrt(x + eps); },
                  [eps](T x, T y) { return T(-0.5) * y / (x + eps); });
}

// ------------------------------- shape ops ---------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
  auto out = Tensor<T>::from_data(std::move(shape), a.n->v);
  if (out.numel() != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    const int64_t n = a.numel();
    detail::attach(out, {a}, [an, on, n] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[i];
    });
  }
  return out;
}

// Concatenate along dim 1. Supports rank 2, 3 or 4; leading dim is batch.
template <class T>
Tensor<T> concat_dim1(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size() || sa.size() < 2 || sa[0] != sb[0])
    throw std::invalid_argument("concat_dim1: incompatible shapes");
  int64_t inner_a = 1, inner_b = 1;
  for (size_t i = 2; i < sa.size(); ++i) {
    if (sa[i] != sb[i]) throw std::invalid_argument("concat_dim1: trailing dims differ");
    inner_a *= sa[i];
  }
  inner_b = inner_a;
  const int B = sa[0], Ca = sa[1], Cb = sb[1];
  std::vector<int> oshape = sa;
  oshape[1] = Ca + Cb;
  auto out = detail::make_out<T>(oshape);
  const int64_t stride_a = Ca * inner_a, stride_b = Cb * inner_b;
  const int64_t ostride = stride_a + stride_b;
  for (int i = 0; i < B; ++i) {
    std::copy_n(a.n->v.data() + i * stride_a, stride_a, out.n->v.data() + i * ostride);
    std::copy_n(b.n->v.data() + i * stride_b, stride_b,
                out.n->v.data() + i * ostride + stride_a);
  }
  if (detail::track<T>({&a, &b})) {
    auto an = a.n, bn = b.n;
    auto on = out.n.get();
    detail::attach(out, {a, b}, [an, bn, on, B, stride_a, stride_b, ostride] {
      if (an->rg) {
        an->ensure_grad();
        for (int i = 0; i < B; ++i)
          for (int64_t j = 0; j < stride_a; ++j)
            an->g[i * stride_a + j] += on->g[i * ostride + j];
      }
      if (bn->rg) {
        bn->ensure_grad();
        for (int i = 0; i < B; ++i)
          for (int64_t j = 0; j < stride_b; ++j)
            bn->g[i * stride_b + j] += on->g[i * ostride + stride_a + j];
      }
    });
  }
  return out;
}

// [B, C, Tlen] -> [B, C] at time index t.
template <class T>
Tensor<T> select_time(const Tensor<T>& a, int t) {
  const auto& s = a.shape();
  if (s.size() != 3) throw std::invalid_argument("select_time: rank-3 input expected");
  const int B = s[0], C = s[1], Tlen = s[2];
  if (t < 0 || t >= Tlen) throw std::invalid_argument("select_time: index out of range");
  auto out = detail::make_out<T>({B, C});
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) out.n->v[i * C + c] = a.n->v[(i * C + c) * Tlen + t];
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, B, C, Tlen, t] {
      an->ensure_grad();
      for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c)
          an->g[(i * C + c) * Tlen + t] += on->g[i * C + c];
    });
  }
  return out;
}

// ------------------------------ reductions ---------------------------------

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  auto out = detail::make_out<T>({1});
  const int64_t n = a.numel();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += a.n->v[i];
  out.n->v[0] = s / static_cast<T>(n);
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, n] {
      an->ensure_grad();
      const T w = on->g[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) an->g[i] += w;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  auto out = detail::make_out<T>({1});
  const int64_t n = a.numel();
  T s = 0;
  for (int64_t i = 0; i < n; ++i) s += a.n->v[i];
  out.n->v[0] = s;
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, n] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->g[i] += on->g[0];
    });
  }
  return out;
}

// Mean of (i,i) entries of a square matrix.
template <class T>
Tensor<T> diag_mean(const Tensor<T>& a) {
  const auto& s = a.shape();
  if (s.size() != 2 || s[0] != s[1]) throw std::invalid_argument("diag_mean: square matrix expected");
  const int N = s[0];
  auto out = detail::make_out<T>({1});
  T acc = 0;
  for (int i = 0; i < N; ++i) acc += a.n->v[i * N + i];
  out.n->v[0] = acc / static_cast<T>(N);
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, N] {
      an->ensure_grad();
      const T w = on->g[0] / static_cast<T>(N);
      for (int i = 0; i < N; ++i) an->g[i * N + i] += w;
    });
  }
  return out;
}

// Per-(batch,channel) spatial mean: [B,C,spatial...] -> [B,C].
template <class T>
Tensor<T> mean_spatial(const Tensor<T>& a) {
  const auto& s = a.shape();
  if (s.size() < 3) throw std::invalid_argument("mean_spatial: rank >= 3 expected");
  const int B = s[0], C = s[1];
  int64_t S = 1;
  for (size_t i = 2; i < s.size(); ++i) S *= s[i];
  auto out = detail::make_out<T>({B, C});
  for (int i = 0; i < B * C; ++i) {
    T acc = 0;
    const T* p = a.n->v.data() + i * S;
    for (int64_t j = 0; j < S; ++j) acc += p[j];
    out.n->v[i] = acc / static_cast<T>(S);
  }
  if (detail::track<T>({&a})) {
    auto an = a.n;
    auto on = out.n.get();
    detail::attach(out, {a}, [an, on, B, C, S] {
      an->ensure_grad();
      for (int i = 0; i < B * C; ++i) {
        const T w = on->g[i] / static_cast<T>(S);
        T* p = an->g.data() + i * S;
        for (int64_t j = 0; j < S; ++j) p[j] += w;
      }
    });
  }
  return out;
}

// ----------------------- broadcasts over channels --------------------------

namespace detail {
enum class BcOp { Add, Sub, Mul };

template <class T>
Tensor<T> bc_channel(const Tensor<T>& x, const Tensor<T>& y, BcOp op) {
  const auto& sx = x.shape();
  const auto& sy = y.shape();
  if (sx.size() < 3 || sy.size() != 2 || sy[0] != sx[0] || sy[1] != sx[1])
    throw std::invalid_argument("bc_channel: want x=[B,C,...], y=[B,C]");
  const int B = sx[0], C = sx[1];
  int64_t S = 1;
  for (size_t i = 2; i < sx.size(); ++i) S *= sx[i];
  auto out = make_out<T>(sx);
  for (int i = 0; i < B * C; ++i) {
    const T yv = y.n->v[i];
    const T* px = x.n->v.data() + i * S;
    T* po = out.n->v.data() + i * S;
    switch (op) {
      case BcOp::Add: for (int64_t j = 0; j < S; ++j) po[j] = px[j] + yv; break;
      case BcOp::Sub: for (int64_t j = 0; j < S; ++j) po[j] = px[j] - yv; break;
      case BcOp::Mul: for (int64_t j = 0; j < S; ++j) po[j] = px[j] * yv; break;
    }
  }
  if (track<T>({&x, &y})) {
    auto xn = x.n, yn = y.n;
    auto on = out.n.get();
    attach(out, {x, y}, [xn, yn, on, B, C, S, op] {
      if (xn->rg) {
        xn->ensure_grad();
        for (int i = 0; i < B * C; ++i) {
          const T yv = yn->v[i];
          T* gx = xn->g.data() + i * S;
          const T* go = on->g.data() + i * S;
          if (op == BcOp::Mul)
            for (int64_t j = 0; j < S; ++j) gx[j] += go[j] * yv;
          else
            for (int64_t j = 0; j < S; ++j) gx[j] += go[j];
        }
      }
      if (yn->rg) {
        yn->ensure_grad();
        for (int i = 0; i < B * C; ++i) {
          const T* go = on->g.data() + i * S;
          T acc = 0;
          if (op == BcOp::Mul) {
            const T* px = xn->v.data() + i * S;
            for (int64_t j = 0; j < S; ++j) acc += go[j] * px[j];
          } else {
            for (int64_t j = 0; j < S; ++j) acc += go[j];
          }
          yn->g[i] += (op == BcOp::Sub) ? -acc : acc;
        }
      }
    });
  }
  return out;
}
}  // namespace detail

template <class T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::bc_channel(x, y, detail::BcOp::Add);
}
template <class T>
Tensor<T> sub_channel(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::bc_channel(x, y, detail::BcOp::Sub);
}
template <class T>
Tensor<T> mul_channel(const Tensor<T>& x, const Tensor<T>& y) {
  return detail::bc_channel(x, y, detail::BcOp::Mul);
}

// y = x * gamma[C] + beta[C] over [B,C,spatial...].
template <class T>
Tensor<T> affine_channel(const Tensor<T>& x, const Tensor<T>& gamma,
                         const Tensor<T>& beta) {
  const auto& s = x.shape();
  if (s.size() < 3 || gamma.shape() != std::vector<int>{s[1]} ||
      beta.shape() != std::vector<int>{s[1]})
    throw std::invalid_argument("affine_channel: want x=[B,C,...], gamma/beta=[C]");
  const int B = s[0], C = s[1];
  int64_t S = 1;
  for (size_t i = 2; i < s.size(); ++i) S *= s[i];
  auto out = detail::make_out<T>(s);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T g = gamma.n->v[c], bt = beta.n->v[c];
      const T* px = x.n->v.data() + (b * C + c) * S;
      T* po = out.n->v.data() + (b * C + c) * S;
      for (int64_t j = 0; j < S; ++j) po[j] = px[j] * g + bt;
    }
  if (detail::track<T>({&x, &gamma, &beta})) {
    auto xn = x.n, gn = gamma.n, bn = beta.n;
    auto on = out.n.get();
    detail::attach(out, {x, gamma, beta}, [xn, gn, bn, on, B, C, S] {
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* go = on->g.data() + (b * C + c) * S;
          if (xn->rg) {
            xn->ensure_grad();
            const T g = gn->v[c];
            T* gx = xn->g.data() + (b * C + c) * S;
            for (int64_t j = 0; j < S; ++j) gx[j] += go[j] * g;
          }
          if (gn->rg) {
            gn->ensure_grad();
            const T* px = xn->v.data() + (b * C + c) * S;
            T acc = 0;
            for (int64_t j = 0; j < S; ++j) acc += go[j] * px[j];
            gn->g[c] += acc;
          }
          if (bn->rg) {
            bn->ensure_grad();
            T acc = 0;
            for (int64_t j = 0; j < S; ++j) acc += go[j];
            bn->g[c] += acc;
          }
        }
    });
  }
  return out;
}

// x[N...] op broadcast scalar tensor s[1].
template <class T>
Tensor<T> add_bscalar(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw std::invalid_argument("add_bscalar: scalar expected");
  auto out = detail::make_out<T>(x.shape());
  const int64_t n = x.numel();
  const T sv = s.n->v[0];
  for (int64_t i = 0; i < n; ++i) out.n->v[i] = x.n->v[i] + sv;
  if (detail::track<T>({&x, &s})) {
    auto xn = x.n, sn = s.n;
    auto on = out.n.get();
    detail::attach(out, {x, s}, [xn, sn, on, n] {
      if (xn->rg) {
        xn->ensure_grad();
        for (int64_t i = 0; i < n; ++i) xn->g[i] += on->g[i];
      }
      if (sn->rg) {
        sn->ensure_grad();
        T acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += on->g[i];
        sn->g[0] += acc;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub_bscalar(const Tensor<T>& x, const Tensor<T>& s) {
  return add_bscalar(x, scale(s, T(-1)));
}

// ------------------------------- dense math --------------------------------

// [M,K] x [K,N] -> [M,N]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw std::invalid_argument("matmul: incompatible shapes");
  const int M = sa[0], K = sa[1], N = sb[1];
  auto out = detail::make_out<T>({M, N});
  {
    detail::ECMap<T> A(a.n->v.data(), M, K), B(b.n->v.data(), K, N);
    detail::EMap<T> O(out.n->v.data(), M, N);
    O.noalias() = A * B;
  }
  if (detail::track<T>({&a, &b})) {
    auto an = a.n, bn = b.n;
    auto on = out.n.get();
    detail::attach(out, {a, b}, [an, bn, on, M, K, N] {
      detail::ECMap<T> G(on->g.data(), M, N);
      if (an->rg) {
        an->ensure_grad();
        detail::ECMap<T> B(bn->v.data(), K, N);
        detail::EMap<T> GA(an->g.data(), M, K);
        GA.noalias() += G * B.transpose();
      }
      if (bn->rg) {
        bn->ensure_grad();
        detail::ECMap<T> A(an->v.data(), M, K);
        detail::EMap<T> GB(bn->g.data(), K, N);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

// y = x + bias, x=[B,D], bias=[D]
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& bias) {
  const auto& s = x.shape();
  if (s.size() != 2 || bias.shape() != std::vector<int>{s[1]})
    throw std::invalid_argument("add_rowvec: want x=[B,D], bias=[D]");
  const int B = s[0], D = s[1];
  auto out = detail::make_out<T>(s);
  for (int i = 0; i < B; ++i)
    for (int j = 0; j < D; ++j)
      out.n->v[i * D + j] = x.n->v[i * D + j] + bias.n->v[j];
  if (detail::track<T>({&x, &bias})) {
    auto xn = x.n, bn = bias.n;
    auto on = out.n.get();
    detail::attach(out, {x, bias}, [xn, bn, on, B, D] {
      if (xn->rg) {
        xn->ensure_grad();
        for (int64_t i = 0; i < int64_t(B) * D; ++i) xn->g[i] += on->g[i];
      }
      if (bn->rg) {
        bn->ensure_grad();
        for (int i = 0; i < B; ++i)
          for (int j = 0; j < D; ++j) bn->g[j] += on->g[i * D + j];
      }
    });
  }
  return out;
}

// L2-normalize rows of [B,D].
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  const auto& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("l2_normalize_rows: rank-2 expected");
  const int B = s[0], D = s[1];
  auto out = detail::make_out<T>(s);
  std::vector<T> norms(B);
  for (int i = 0; i < B; ++i) {
    T acc = 0;
    for (int j = 0; j < D; ++j) acc += x.n->v[i * D + j] * x.n->v[i * D + j];
    norms[i] = std::sqrt(acc + eps);
    for (int j = 0; j < D; ++j) out.n->v[i * D + j] = x.n->v[i * D + j] / norms[i];
  }
  if (detail::track<T>({&x})) {
    auto xn = x.n;
    auto on = out.n.get();
    detail::attach(out, {x}, [xn, on, B, D, norms] {
      xn->ensure_grad();
      for (int i = 0; i < B; ++i) {
        T dot = 0;
        for (int j = 0; j < D; ++j) dot += on->g[i * D + j] * on->v[i * D + j];
        for (int j = 0; j < D; ++j)
          xn->g[i * D + j] += (on->g[i * D + j] - on->v[i * D + j] * dot) / norms[i];
      }
    });
  }
  return out;
}

// ------------------------------ convolutions -------------------------------

namespace detail {

// im2col for NCHW input, zero padding. cols is [Cin*kh*kw, OH*OW] row-major.
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int sh, int sw,
            int ph, int pw, int OH, int OW, T* cols) {
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        T* row = cols + ((c * kh + i) * kw + j) * (OH * OW);
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * sh - ph + i;
          if (ih < 0 || ih >= H) {
            std::fill_n(row + oh * OW, OW, T(0));
            continue;
          }
          const T* src = x + (c * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * sw - pw + j;
            row[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, int C, int H, int W, int kh, int kw, int sh,
                int sw, int ph, int pw, int OH, int OW, T* gx) {
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const T* row = cols + ((c * kh + i) * kw + j) * (OH * OW);
        for (int oh = 0; oh < OH; ++oh) {
          const int ih = oh * sh - ph + i;
          if (ih < 0 || ih >= H) continue;
          T* dst = gx + (c * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * sw - pw + j;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * OW + ow];
          }
        }
      }
}

}  // namespace detail

// x=[B,Cin,H,W], w=[Cout,Cin,kh,kw], bias=[Cout]; zero 'same-style' padding
// given explicitly. Output [B,Cout,OH,OW].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int sh, int sw, int ph, int pw) {
  const auto& sx = x.shape();
  const auto& swt = w.shape();
  if (sx.size() != 4 || swt.size() != 4 || sx[1] != swt[1])
    throw std::invalid_argument("conv2d: bad shapes");
  const int B = sx[0], Cin = sx[1], H = sx[2], W = sx[3];
  const int Cout = swt[0], kh = swt[2], kw = swt[3];
  if (bias.shape() != std::vector<int>{Cout})
    throw std::invalid_argument("conv2d: bias shape");
  const int OH = (H + 2 * ph - kh) / sh + 1;
  const int OW = (W + 2 * pw - kw) / sw + 1;
  if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv2d: empty output");
  auto out = detail::make_out<T>({B, Cout, OH, OW});
  const int K = Cin * kh * kw;
  const int64_t P = int64_t(OH) * OW;

#pragma omp parallel
  {
    std::vector<T> cols(K * P);
#pragma omp for schedule(static)
    for (int b = 0; b < B; ++b) {
      detail::im2col(x.n->v.data() + int64_t(b) * Cin * H * W, Cin, H, W, kh, kw,
                     sh, sw, ph, pw, OH, OW, cols.data());
      detail::ECMap<T> Wm(w.n->v.data(), Cout, K);
      detail::ECMap<T> Cm(cols.data(), K, P);
      detail::EMap<T> Om(out.n->v.data() + int64_t(b) * Cout * P, Cout, P);
      Om.noalias() = Wm * Cm;
      for (int c = 0; c < Cout; ++c)
        Om.row(c).array() += bias.n->v[c];
    }
  }

  if (detail::track<T>({&x, &w, &bias})) {
    auto xn = x.n, wn = w.n, bn = bias.n;
    auto on = out.n.get();
    detail::attach(out, {x, w, bias},
                   [xn, wn, bn, on, B, Cin, H, W, Cout, kh, kw, sh, sw, ph, pw,
                    OH, OW, K, P] {
      const bool need_x = xn->rg, need_w = wn->rg, need_b = bn->rg;
      if (need_x) xn->ensure_grad();
      if (need_w) wn->ensure_grad();
      if (need_b) bn->ensure_grad();
      int nth = 1;
#ifdef _OPENMP
      nth = omp_get_max_threads();
#endif
      std::vector<std::vector<T>> wgrad_acc(need_w ? nth : 0);
      std::vector<std::vector<T>> bgrad_acc(need_b ? nth : 0);
#pragma omp parallel
      {
        int tid = 0;
#ifdef _OPENMP
        tid = omp_get_thread_num();
#endif
        std::vector<T> cols(K * P), gcols(K * P);
        if (need_w) wgrad_acc[tid].assign(size_t(Cout) * K, T(0));
        if (need_b) bgrad_acc[tid].assign(Cout, T(0));
#pragma omp for schedule(static)
        for (int b = 0; b < B; ++b) {
          detail::ECMap<T> G(on->g.data() + int64_t(b) * Cout * P, Cout, P);
          // recompute cols (cheaper than caching them across the step)
          if (need_w || need_x)
            detail::im2col(xn->v.data() + int64_t(b) * Cin * H * W, Cin, H, W,
                           kh, kw, sh, sw, ph, pw, OH, OW, cols.data());
          if (need_w) {
            detail::ECMap<T> Cm(cols.data(), K, P);
            detail::EMap<T> GW(wgrad_acc[tid].data(), Cout, K);
            GW.noalias() += G * Cm.transpose();
          }
          if (need_b) {
            for (int c = 0; c < Cout; ++c) bgrad_acc[tid][c] += G.row(c).sum();
          }
          if (need_x) {
            detail::ECMap<T> Wm(wn->v.data(), Cout, K);
            detail::EMap<T> GC(gcols.data(), K, P);
            GC.noalias() = Wm.transpose() * G;
            detail::col2im_add(gcols.data(), Cin, H, W, kh, kw, sh, sw, ph, pw,
                               OH, OW, xn->g.data() + int64_t(b) * Cin * H * W);
          }
        }
      }
      if (need_w)
        for (auto& acc : wgrad_acc)
          for (size_t i = 0; i < acc.size(); ++i) wn->g[i] += acc[i];
      if (need_b)
        for (auto& acc : bgrad_acc)
          for (int c = 0; c < Cout; ++c) bn->g[c] += acc[c];
    });
  }
  return out;
}

// Nearest-neighbor 2x upsampling on [B,C,H,W].
template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4) throw std::invalid_argument("upsample2: rank-4 expected");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  auto out = detail::make_out<T>({B, C, H * 2, W * 2});
  for (int bc = 0; bc < B * C; ++bc) {
    const T* src = x.n->v.data() + int64_t(bc) * H * W;
    T* dst = out.n->v.data() + int64_t(bc) * 4 * H * W;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const T v = src[i * W + j];
        T* d = dst + (2 * i) * (2 * W) + 2 * j;
        d[0] = v;
        d[1] = v;
        d[2 * W] = v;
        d[2 * W + 1] = v;
      }
  }
  if (detail::track<T>({&x})) {
    auto xn = x.n;
    auto on = out.n.get();
    detail::attach(out, {x}, [xn, on, B, C, H, W] {
      xn->ensure_grad();
      for (int bc = 0; bc < B * C; ++bc) {
        T* gx = xn->g.data() + int64_t(bc) * H * W;
        const T* go = on->g.data() + int64_t(bc) * 4 * H * W;
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            const T* g = go + (2 * i) * (2 * W) + 2 * j;
            gx[i * W + j] += g[0] + g[1] + g[2 * W] + g[2 * W + 1];
          }
      }
    });
  }
  return out;
}

// ------------------------------ losses -------------------------------------

// Mean cross entropy over the batch; logits [B,K], labels are class indices.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || static_cast<int>(labels.size()) != s[0])
    throw std::invalid_argument("cross_entropy: want logits [B,K] and B labels");
  const int B = s[0], K = s[1];
  auto out = detail::make_out<T>({1});
  std::vector<T> probs(size_t(B) * K);
  T loss = 0;
  for (int i = 0; i < B; ++i) {
    const T* row = logits.n->v.data() + i * K;
    T mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    const T logz = std::log(z) + mx;
    for (int k = 0; k < K; ++k) probs[i * K + k] = std::exp(row[k] - logz);
    if (labels[i] < 0 || labels[i] >= K)
      throw std::invalid_argument("cross_entropy: label out of range");
    loss += logz - row[labels[i]];
  }
  out.n->v[0] = loss / static_cast<T>(B);
  if (detail::track<T>({&logits})) {
    auto ln = logits.n;
    auto on = out.n.get();
    detail::attach(out, {logits}, [ln, on, B, K, probs, labels] {
      ln->ensure_grad();
      const T w = on->g[0] / static_cast<T>(B);
      for (int i = 0; i < B; ++i)
        for (int k = 0; k < K; ++k)
          ln->g[i * K + k] += w * (probs[i * K + k] - (labels[i] == k ? T(1) : T(0)));
    });
  }
  return out;
}

// (1/B) sum_i w_i * mean_j (pred_ij - target_ij)^2; target/weights constant.
template <class T>
Tensor<T> weighted_mse(const Tensor<T>& pred, const Tensor<T>& target,
                       const std::vector<T>& w) {
  detail::check_same_shape(pred, target, "weighted_mse");
  const int B = pred.shape()[0];
  if (static_cast<int>(w.size()) != B)
    throw std::invalid_argument("weighted_mse: weight count != batch");
  const int64_t E = pred.numel() / B;
  auto out = detail::make_out<T>({1});
  T loss = 0;
  for (int i = 0; i < B; ++i) {
    const T* p = pred.n->v.data() + i * E;
    const T* t = target.n->v.data() + i * E;
    T acc = 0;
    for (int64_t j = 0; j < E; ++j) {
      const T d = p[j] - t[j];
      acc += d * d;
    }
    loss += w[i] * acc / static_cast<T>(E);
  }
  out.n->v[0] = loss / static_cast<T>(B);
  if (detail::track<T>({&pred})) {
    auto pn = pred.n, tn = target.n;
    auto on = out.n.get();
    detail::attach(out, {pred, target}, [pn, tn, on, B, E, w] {
      if (!pn->rg) return;
      pn->ensure_grad();
      const T g0 = on->g[0];
      for (int i = 0; i < B; ++i) {
        const T c = T(2) * w[i] * g0 / (static_cast<T>(E) * static_cast<T>(B));
        T* gp = pn->g.data() + i * E;
        const T* p = pn->v.data() + i * E;
        const T* t = tn->v.data() + i * E;
        for (int64_t j = 0; j < E; ++j) gp[j] += c * (p[j] - t[j]);
      }
    });
  }
  return out;
}

// (1/B) sum_i w_i * mean_j |pred_ij - target_ij|; subgradient 0 at ties.
template <class T>
Tensor<T> weighted_mae(const Tensor<T>& pred, const Tensor<T>& target,
                       const std::vector<T>& w) {
  detail::check_same_shape(pred, target, "weighted_mae");
  const int B = pred.shape()[0];
  if (static_cast<int>(w.size()) != B)
    throw std::invalid_argument("weighted_mae: weight count != batch");
  const int64_t E = pred.numel() / B;
  auto out = detail::make_out<T>({1});
  T loss = 0;
  for (int i = 0; i < B; ++i) {
    const T* p = pred.n->v.data() + i * E;
    const T* t = target.n->v.data() + i * E;
    T acc = 0;
    for (int64_t j = 0; j < E; ++j) acc += std::abs(p[j] - t[j]);
    loss += w[i] * acc / static_cast<T>(E);
  }
  out.n->v[0] = loss / static_cast<T>(B);
  if (detail::track<T>({&pred})) {
    auto pn = pred.n, tn = target.n;
    auto on = out.n.get();
    detail::attach(out, {pred, target}, [pn, tn, on, B, E, w] {
      if (!pn->rg) return;
      pn->ensure_grad();
      const T g0 = on->g[0];
      for (int i = 0; i < B; ++i) {
        const T c = w[i] * g0 / (static_cast<T>(E) * static_cast<T>(B));
        T* gp = pn->g.data() + i * E;
        const T* p = pn->v.data() + i * E;
        const T* t = tn->v.data() + i * E;
        for (int64_t j = 0; j < E; ++j) {
          const T d = p[j] - t[j];
          gp[j] += c * (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)));
        }
      }
    });
  }
  return out;
}

// out_i = a_i * s_i + c_i with per-sample scalar a (constant) and constant
// tensor c. Used for the single-step posterior-mean reconstruction, which is
// affine in the score.
template <class T>
Tensor<T> persample_affine(const Tensor<T>& s, const std::vector<T>& a,
                           const Tensor<T>& c) {
  detail::check_same_shape(s, c, "persample_affine");
  const int B = s.shape()[0];
  if (static_cast<int>(a.size()) != B)
    throw std::invalid_argument("persample_affine: coefficient count != batch");
  const int64_t E = s.numel() / B;
  auto out = detail::make_out<T>(s.shape());
  for (int i = 0; i < B; ++i) {
    const T ai = a[i];
    const T* ps = s.n->v.data() + i * E;
    const T* pc = c.n->v.data() + i * E;
    T* po = out.n->v.data() + i * E;
    for (int64_t j = 0; j < E; ++j) po[j] = ai * ps[j] + pc[j];
  }
  if (detail::track<T>({&s})) {
    auto sn = s.n, cn = c.n;
    auto on = out.n.get();
    detail::attach(out, {s, c}, [sn, cn, on, B, E, a] {
      if (!sn->rg) return;
      sn->ensure_grad();
      for (int i = 0; i < B; ++i) {
        const T ai = a[i];
        T* gs = sn->g.data() + i * E;
        const T* go = on->g.data() + i * E;
        for (int64_t j = 0; j < E; ++j) gs[j] += ai * go[j];
      }
    });
  }
  return out;
}

// Pairwise diagonal-Gaussian log density matrix:
//   out[i][j] = log N(e_j; mu_i, diag(exp(logv_i))).
// Used by the contrastive log-ratio MI bound (positive pairs on the
// diagonal, negatives everywhere else).
template <class T>
Tensor<T> gaussian_logq_matrix(const Tensor<T>& mu, const Tensor<T>& logv,
                               const Tensor<T>& e) {
  const auto& s = mu.shape();
  if (s.size() != 2 || logv.shape() != s || e.shape() != s)
    throw std::invalid_argument("gaussian_logq_matrix: want three [N,D] tensors");
  const int N = s[0], D = s[1];
  constexpr T kLog2Pi = T(1.8378770664093454835606594728112);
  auto out = detail::make_out<T>({N, N});
  for (int i = 0; i < N; ++i) {
    const T* mi = mu.n->v.data() + i * D;
    const T* lvi = logv.n->v.data() + i * D;
    T base = 0;
    for (int d = 0; d < D; ++d) base += lvi[d];
    base = T(-0.5) * (base + D * kLog2Pi);
    for (int j = 0; j < N; ++j) {
      const T* ej = e.n->v.data() + j * D;
      T q = 0;
      for (int d = 0; d < D; ++d) {
        const T r = ej[d] - mi[d];
        q += r * r * std::exp(-lvi[d]);
      }
      out.n->v[i * N + j] = base - T(0.5) * q;
    }
  }
  if (detail::track<T>({&mu, &logv, &e})) {
    auto mn = mu.n, ln = logv.n, en = e.n;
    auto on = out.n.get();
    detail::attach(out, {mu, logv, e}, [mn, ln, en, on, N, D] {
      const bool gm = mn->rg, gl = ln->rg, ge = en->rg;
      if (gm) mn->ensure_grad();
      if (gl) ln->ensure_grad();
      if (ge) en->ensure_grad();
      for (int i = 0; i < N; ++i) {
        const T* mi = mn->v.data() + i * D;
        const T* lvi = ln->v.data() + i * D;
        for (int j = 0; j < N; ++j) {
          const T g = on->g[i * N + j];
          if (g == T(0)) continue;
          const T* ej = en->v.data() + j * D;
          for (int d = 0; d < D; ++d) {
            const T iv = std::exp(-lvi[d]);
            const T r = ej[d] - mi[d];
            if (gm) mn->g[i * D + d] += g * r * iv;
            if (gl) ln->g[i * D + d] += g * T(0.5) * (r * r * iv - T(1));
            if (ge) en->g[j * D + d] -= g * r * iv;
          }
        }
      }
    });
  }
  return out;
}

// Detached copy: same values, no graph history.
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from_data(a.shape(), a.n->v);
}

}  // namespace emovc::ad

#endif  // EMOVC_TENSOR_HPP_
