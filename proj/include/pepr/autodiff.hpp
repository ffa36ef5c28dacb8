#pragma once

// Minimal tape-free reverse-mode automatic differentiation over dense arrays.
//
// A Var<T> owns a node holding its value, an optional gradient buffer, its
// parents and a backward closure. Graphs are rebuilt every forward pass and
// released when the last Var referencing them goes away. Parameters are leaf
// Vars with requires_grad set; their gradients accumulate across backward
// calls until zero_grad().

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "pepr/error.hpp"

namespace pepr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables graph construction in scope (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const T*)> backward;

  T* grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Var constant(Shape shape, std::vector<T> value) {
    require(numel(shape) == value.size(), "Var: value size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Var(std::move(n));
  }
  static Var constant(Shape shape, T fill = T(0)) {
    std::vector<T> v(numel(shape), fill);
    return constant(std::move(shape), std::move(v));
  }
  static Var parameter(Shape shape, std::vector<T> value) {
    Var v = constant(std::move(shape), std::move(value));
    v.node_->requires_grad = true;
    return v;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T item() const {
    require(size() == 1, "Var::item on non-scalar " + shape_str(shape()));
    return node_->value[0];
  }

  // Empty span when no gradient has been accumulated.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->value.size()}; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds a result node; the backward closure is attached only when grad mode
// is on and at least one parent needs a gradient.
template <class T, class Backward>
Var<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Var<T>> parents, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.ptr());
      n->backward = std::forward<Backward>(backward);
    }
  }
  return Var<T>(std::move(n));
}

template <class T>
Var<T> make_result_many(Shape shape, std::vector<T> value, const std::vector<Var<T>>& parents,
                        std::function<void(const T*)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& p : parents) n->parents.push_back(p.ptr());
      n->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(n));
}

// Gradient accumulation target, or nullptr when the parent needs none.
template <class T>
T* grad_target(Node<T>* n) {
  return n->requires_grad ? n->grad_buffer() : nullptr;
}

template <class T>
void backward(const Var<T>& root, T seed = T(1)) {
  require(root.size() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(n->grad.data());
  }
  // Intermediate gradients are no longer needed; leaves keep theirs.
  for (Node<T>* n : order)
    if (n->backward) std::vector<T>().swap(n->grad);
}

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

inline Eigen::Index ix(std::size_t v) { return static_cast<Eigen::Index>(v); }

// ---------------------------------------------------------------- structure

template <class T>
Var<T> stop_gradient(const Var<T>& x) {
  return Var<T>::constant(x.shape(), std::vector<T>(x.value().begin(), x.value().end()));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  require(numel(shape) == x.size(), "reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Node<T>* xn = x.node();
  const std::size_t n = x.size();
  return make_result<T>(std::move(shape), std::vector<T>(x.value().begin(), x.value().end()), {x},
                        [xn, n](const T* g) {
                          if (T* gx = grad_target(xn))
                            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
                        });
}

template <class T>
Var<T> transpose(const Var<T>& x) {
  require(x.shape().size() == 2, "transpose: need a matrix");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  MapR<T>(out.data(), ix(c), ix(r)) = CMapR<T>(x.data(), ix(r), ix(c)).transpose();
  Node<T>* xn = x.node();
  return make_result<T>({c, r}, std::move(out), {x}, [xn, r, c](const T* g) {
    if (T* gx = grad_target(xn)) MapR<T>(gx, ix(r), ix(c)) += CMapR<T>(g, ix(c), ix(r)).transpose();
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, std::size_t start, std::size_t len) {
  require(x.shape().size() == 2 && start + len <= x.dim(1), "slice_cols: out of range");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * len);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data() + i * c + start, len, out.data() + i * len);
  Node<T>* xn = x.node();
  return make_result<T>({r, len}, std::move(out), {x}, [xn, r, c, start, len](const T* g) {
    if (T* gx = grad_target(xn))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) gx[i * c + start + j] += g[i * len + j];
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t r = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.shape().size() == 2 && p.dim(0) == r, "concat_cols: row mismatch");
    total += p.dim(1);
  }
  std::vector<T> out(r * total);
  std::size_t off = 0;
  std::vector<Node<T>*> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < r; ++i) std::copy_n(p.data() + i * w, w, out.data() + i * total + off);
    off += w;
    nodes.push_back(p.node());
    widths.push_back(w);
  }
  return make_result_many<T>({r, total}, std::move(out), parts, [nodes, widths, r, total](const T* g) {
    std::size_t o = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (T* gp = grad_target(nodes[k]))
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + o + j];
      o += widths[k];
    }
  });
}

template <class T>
Var<T> gather_rows(const Var<T>& table, const std::vector<std::size_t>& rows) {
  require(table.shape().size() == 2, "gather_rows: need a matrix");
  const std::size_t n = table.dim(0), d = table.dim(1);
  std::vector<T> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < n, "gather_rows: index out of range");
    std::copy_n(table.data() + rows[i] * d, d, out.data() + i * d);
  }
  Node<T>* tn = table.node();
  return make_result<T>({rows.size(), d}, std::move(out), {table}, [tn, rows, d](const T* g) {
    if (T* gt = grad_target(tn))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[rows[i] * d + j] += g[i * d + j];
  });
}

// ---------------------------------------------------------------- arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Node<T>*an = a.node(), *bn = b.node();
  const std::size_t n = out.size();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn, n](const T* g) {
    if (T* ga = grad_target(an))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (T* gb = grad_target(bn))
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  Node<T>* an = a.node();
  const std::size_t n = out.size();
  return make_result<T>(a.shape(), std::move(out), {a}, [an, n, s](const T* g) {
    if (T* ga = grad_target(an))
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * s;
  });
}

// Sum of scalars weighted by constants.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  require(terms.size() == weights.size() && !terms.empty(), "weighted_sum: size mismatch");
  T total = 0;
  std::vector<Node<T>*> nodes;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    require(terms[i].size() == 1, "weighted_sum: terms must be scalars");
    total += weights[i] * terms[i].item();
    nodes.push_back(terms[i].node());
  }
  return make_result_many<T>({1}, {total}, terms, [nodes, weights](const T* g) {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (T* gi = grad_target(nodes[i])) gi[0] += weights[i] * g[0];
  });
}

// x[m,n] + b[n] broadcast over rows.
template <class T>
Var<T> add_row_bias(const Var<T>& x, const Var<T>& b) {
  require(x.shape().size() == 2 && b.size() == x.dim(1), "add_row_bias: shape mismatch");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(x.value().begin(), x.value().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b.data()[j];
  Node<T>*xn = x.node(), *bn = b.node();
  return make_result<T>(x.shape(), std::move(out), {x, b}, [xn, bn, m, n](const T* g) {
    if (T* gx = grad_target(xn))
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += g[i];
    if (T* gb = grad_target(bn))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

// a[m,k] * b[k,n]
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
          "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MapR<T>(out.data(), ix(m), ix(n)).noalias() = CMapR<T>(a.data(), ix(m), ix(k)) * CMapR<T>(b.data(), ix(k), ix(n));
  Node<T>*an = a.node(), *bn = b.node();
  return make_result<T>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const T* g) {
    CMapR<T> G(g, ix(m), ix(n));
    if (T* ga = grad_target(an)) MapR<T>(ga, ix(m), ix(k)).noalias() += G * CMapR<T>(bn->value.data(), ix(k), ix(n)).transpose();
    if (T* gb = grad_target(bn)) MapR<T>(gb, ix(k), ix(n)).noalias() += CMapR<T>(an->value.data(), ix(m), ix(k)).transpose() * G;
  });
}

// a[m,k] * b[n,k]^T
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
          "matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n);
  MapR<T>(out.data(), ix(m), ix(n)).noalias() =
      CMapR<T>(a.data(), ix(m), ix(k)) * CMapR<T>(b.data(), ix(n), ix(k)).transpose();
  Node<T>*an = a.node(), *bn = b.node();
  return make_result<T>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](const T* g) {
    CMapR<T> G(g, ix(m), ix(n));
    if (T* ga = grad_target(an)) MapR<T>(ga, ix(m), ix(k)).noalias() += G * CMapR<T>(bn->value.data(), ix(n), ix(k));
    if (T* gb = grad_target(bn)) MapR<T>(gb, ix(n), ix(k)).noalias() += G.transpose() * CMapR<T>(an->value.data(), ix(m), ix(k));
  });
}

// ---------------------------------------------------------------- pointwise

template <class T, class F, class DF>
Var<T> pointwise(const Var<T>& x, F f, DF df) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  Node<T>* xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {x}, [xn, df](const T* g) {
    if (T* gx = grad_target(xn))
      for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g[i] * df(xn->value[i]);
  });
}

template <class T>
T sigmoid_value(T z) {
  return z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

template <class T>
T softplus_value(T z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return pointwise(x, [](T z) { return sigmoid_value(z); },
                   [](T z) {
                     const T s = sigmoid_value(z);
                     return s * (T(1) - s);
                   });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  return pointwise(x, [](T z) { return softplus_value(z); }, [](T z) { return sigmoid_value(z); });
}

template <class T>
Var<T> silu(const Var<T>& x) {
  return pointwise(x, [](T z) { return z * sigmoid_value(z); },
                   [](T z) {
                     const T s = sigmoid_value(z);
                     return s * (T(1) + z * (T(1) - s));
                   });
}

// tanh approximation
template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T c = T(0.7978845608028654);
  constexpr T a = T(0.044715);
  return pointwise(x, [](T z) { return T(0.5) * z * (T(1) + std::tanh(c * (z + a * z * z * z))); },
                   [](T z) {
                     const T u = c * (z + a * z * z * z);
                     const T t = std::tanh(u);
                     const T du = c * (T(1) + T(3) * a * z * z);
                     return T(0.5) * (T(1) + t) + T(0.5) * z * (T(1) - t * t) * du;
                   });
}

template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  require(x.shape().size() == 2, "softmax_rows: need a matrix");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = x.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += out[i * n + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
  }
  Node<T>* xn = x.node();
  auto result = make_result<T>({m, n}, std::move(out), {x}, nullptr);
  if (result.requires_grad()) {
    Node<T>* yn = result.node();
    yn->backward = [xn, yn, m, n](const T* g) {
      T* gx = grad_target(xn);
      if (!gx) return;
      for (std::size_t i = 0; i < m; ++i) {
        const T* y = yn->value.data() + i * n;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[j] * (g[i * n + j] - dot);
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------- normalization

// Normalizes each of `groups` contiguous blocks of `x` (viewed as
// [groups, block]) and applies a per-channel affine; `channel_of(i)` maps a
// flat index to its affine channel.
namespace detail {

template <class T, class ChannelOf>
Var<T> grouped_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, std::size_t groups, T eps,
                    ChannelOf channel_of) {
  const std::size_t total = x.size();
  require(groups > 0 && total % groups == 0, "norm: size not divisible by group count");
  const std::size_t block = total / groups;
  std::vector<T> xhat(total), rstd(groups), out(total);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const T* xs = x.data() + gi * block;
    T mean = 0;
    for (std::size_t i = 0; i < block; ++i) mean += xs[i];
    mean /= static_cast<T>(block);
    T var = 0;
    for (std::size_t i = 0; i < block; ++i) var += (xs[i] - mean) * (xs[i] - mean);
    var /= static_cast<T>(block);
    rstd[gi] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < block; ++i) {
      const std::size_t f = gi * block + i;
      xhat[f] = (xs[i] - mean) * rstd[gi];
      const std::size_t c = channel_of(f);
      out[f] = gain.data()[c] * xhat[f] + bias.data()[c];
    }
  }
  Node<T>*xn = x.node(), *gn = gain.node(), *bn = bias.node();
  return make_result<T>(x.shape(), std::move(out), {x, gain, bias},
                        [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), groups, block,
                         channel_of](const T* g) {
                          T* gx = grad_target(xn);
                          T* gg = grad_target(gn);
                          T* gb = grad_target(bn);
                          std::vector<T> dxhat(block);
                          for (std::size_t gi = 0; gi < groups; ++gi) {
                            T sum_d = 0, sum_dx = 0;
                            for (std::size_t i = 0; i < block; ++i) {
                              const std::size_t f = gi * block + i;
                              const std::size_t c = channel_of(f);
                              if (gg) gg[c] += g[f] * xhat[f];
                              if (gb) gb[c] += g[f];
                              dxhat[i] = g[f] * gn->value[c];
                              sum_d += dxhat[i];
                              sum_dx += dxhat[i] * xhat[f];
                            }
                            if (!gx) continue;
                            const T inv = T(1) / static_cast<T>(block);
                            for (std::size_t i = 0; i < block; ++i) {
                              const std::size_t f = gi * block + i;
                              gx[f] += rstd[gi] * (dxhat[i] - sum_d * inv - xhat[f] * sum_dx * inv);
                            }
                          }
                        });
}

}  // namespace detail

// x[C,H,W] with C divisible by groups; gain/bias [C].
template <class T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, std::size_t groups, T eps = T(1e-5)) {
  require(x.shape().size() == 3, "group_norm: need [C,H,W]");
  const std::size_t c = x.dim(0);
  const std::size_t hw = x.dim(1) * x.dim(2);
  require(c % groups == 0 && gain.size() == c && bias.size() == c, "group_norm: bad channel/group configuration");
  return detail::grouped_norm(x, gain, bias, groups, eps, [hw](std::size_t f) { return f / hw; });
}

// Normalizes each row of x[m,n]; gain/bias [n].
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  require(x.shape().size() == 2, "layer_norm: need a matrix");
  const std::size_t n = x.dim(1);
  require(gain.size() == n && bias.size() == n, "layer_norm: affine size mismatch");
  return detail::grouped_norm(x, gain, bias, x.dim(0), eps, [n](std::size_t f) { return f % n; });
}

// ---------------------------------------------------------------- spatial

// x[Cin,H,W], weight[Cout, Cin*k*k], bias[Cout] -> [Cout, Ho, Wo].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t kernel, std::size_t stride,
              std::size_t pad) {
  require(x.shape().size() == 3, "conv2d: input must be [C,H,W]");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = bias.size();
  const std::size_t kk = cin * kernel * kernel;
  require(weight.size() == cout * kk, "conv2d: weight shape mismatch");
  require(h + 2 * pad >= kernel && w + 2 * pad >= kernel, "conv2d: input smaller than kernel");
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  const std::size_t hw = ho * wo;

  // cols[(ci,ky,kx), (oy,ox)]
  auto cols = std::make_shared<std::vector<T>>(kk * hw, T(0));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < kernel; ++ky)
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        T* row = cols->data() + ((ci * kernel + ky) * kernel + kx) * hw;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long jx = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (jx < 0 || jx >= static_cast<long>(w)) continue;
            row[oy * wo + ox] = x.data()[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(jx)];
          }
        }
      }
  std::vector<T> out(cout * hw);
  MapR<T> O(out.data(), ix(cout), ix(hw));
  O.noalias() = CMapR<T>(weight.data(), ix(cout), ix(kk)) * CMapR<T>(cols->data(), ix(kk), ix(hw));
  for (std::size_t co = 0; co < cout; ++co) O.row(ix(co)).array() += bias.data()[co];

  Node<T>*xn = x.node(), *wn = weight.node(), *bn = bias.node();
  return make_result<T>({cout, ho, wo}, std::move(out), {x, weight, bias},
                        [=](const T* g) {
                          CMapR<T> G(g, ix(cout), ix(hw));
                          if (T* gw = grad_target(wn))
                            MapR<T>(gw, ix(cout), ix(kk)).noalias() += G * CMapR<T>(cols->data(), ix(kk), ix(hw)).transpose();
                          if (T* gb = grad_target(bn))
                            for (std::size_t co = 0; co < cout; ++co) gb[co] += G.row(ix(co)).sum();
                          if (T* gx = grad_target(xn)) {
                            MatR<T> dcols = CMapR<T>(wn->value.data(), ix(cout), ix(kk)).transpose() * G;
                            for (std::size_t ci = 0; ci < cin; ++ci)
                              for (std::size_t ky = 0; ky < kernel; ++ky)
                                for (std::size_t kx = 0; kx < kernel; ++kx) {
                                  const T* row = dcols.data() + ((ci * kernel + ky) * kernel + kx) * hw;
                                  for (std::size_t oy = 0; oy < ho; ++oy) {
                                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                                    for (std::size_t ox = 0; ox < wo; ++ox) {
                                      const long jx = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                      if (jx < 0 || jx >= static_cast<long>(w)) continue;
                                      gx[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(jx)] +=
                                          row[oy * wo + ox];
                                    }
                                  }
                                }
                          }
                        });
}

namespace detail {

struct Tap {
  std::size_t lo, hi;
  double w_hi;
};

// Half-pixel-center bilinear sampling positions for one axis.
inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t factor) {
  std::vector<Tap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

// x[h*w, C] (row-major spatial, channels last) -> [(h*f)*(w*f), C].
template <class T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t h, std::size_t w, std::size_t factor) {
  require(x.shape().size() == 2 && x.dim(0) == h * w, "upsample_bilinear: shape mismatch");
  const std::size_t c = x.dim(1);
  const auto ty = detail::bilinear_taps(h, factor);
  const auto tx = detail::bilinear_taps(w, factor);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<T> out(oh * ow * c);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const T wy = static_cast<T>(ty[oy].w_hi);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T wx = static_cast<T>(tx[ox].w_hi);
      const T* a = x.data() + (ty[oy].lo * w + tx[ox].lo) * c;
      const T* b = x.data() + (ty[oy].lo * w + tx[ox].hi) * c;
      const T* d = x.data() + (ty[oy].hi * w + tx[ox].lo) * c;
      const T* e = x.data() + (ty[oy].hi * w + tx[ox].hi) * c;
      T* o = out.data() + (oy * ow + ox) * c;
      for (std::size_t k = 0; k < c; ++k)
        o[k] = (T(1) - wy) * ((T(1) - wx) * a[k] + wx * b[k]) + wy * ((T(1) - wx) * d[k] + wx * e[k]);
    }
  }
  Node<T>* xn = x.node();
  return make_result<T>({oh * ow, c}, std::move(out), {x}, [=](const T* g) {
    T* gx = grad_target(xn);
    if (!gx) return;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const T wy = static_cast<T>(ty[oy].w_hi);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T wx = static_cast<T>(tx[ox].w_hi);
        const T* go = g + (oy * ow + ox) * c;
        T* a = gx + (ty[oy].lo * w + tx[ox].lo) * c;
        T* b = gx + (ty[oy].lo * w + tx[ox].hi) * c;
        T* d = gx + (ty[oy].hi * w + tx[ox].lo) * c;
        T* e = gx + (ty[oy].hi * w + tx[ox].hi) * c;
        for (std::size_t k = 0; k < c; ++k) {
          a[k] += (T(1) - wy) * (T(1) - wx) * go[k];
          b[k] += (T(1) - wy) * wx * go[k];
          d[k] += wy * (T(1) - wx) * go[k];
          e[k] += wy * wx * go[k];
        }
      }
    }
  });
}

}  // namespace pepr::ad
