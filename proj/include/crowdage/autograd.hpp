#pragma once
// Minimal reverse-mode differentiation over dense tensors. Each operation
// records its parents and a closure that pushes the output gradient back to
// them; `backward` walks the recorded graph in reverse topological order.
//
// Graphs are per forward pass and own no global state, so independent
// forward passes may run on separate threads.

#include <Eigen/Core>

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "crowdage/planar.hpp"

namespace crowdage::ag {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const T> value() const { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  T item() const {
    assert(size() == 1);
    return node_->value[0];
  }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <class T>
Var<T> constant(Shape shape, std::vector<T> value) {
  if (numel(shape) != value.size()) throw std::invalid_argument("constant: shape/value mismatch");
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return Var<T>(std::move(n));
}

template <class T>
Var<T> leaf(Shape shape, std::vector<T> value) {
  Var<T> v = constant<T>(std::move(shape), std::move(value));
  v.node()->requires_grad = true;
  return v;
}

template <class T>
Var<T> from_planar(const Planar<T>& p, bool requires_grad = false) {
  return requires_grad ? leaf<T>({p.channels, p.height, p.width}, p.data)
                       : constant<T>({p.channels, p.height, p.width}, p.data);
}

template <class T>
Planar<T> to_planar(const Var<T>& v) {
  if (v.shape().size() != 3) throw std::invalid_argument("to_planar: expected C x H x W");
  Planar<T> p(v.dim(0), v.dim(1), v.dim(2));
  std::copy(v.value().begin(), v.value().end(), p.data.begin());
  return p;
}

/// Result of an op; parents are retained only when a gradient can flow.
template <class T>
Var<T> make_result(Shape shape, std::vector<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents)
    if (p.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) {
    for (auto& p : parents) n->parents.push_back(p.ptr());
    n->backward = std::move(bw);
  }
  return Var<T>(std::move(n));
}

/// Accumulates d(root)/d(node) into every reachable node that requires grad.
template <class T>
void backward(const Var<T>& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  std::vector<T> out(a.value().begin(), a.value().end());
  for (auto& v : out) v *= s;
  return make_result<T>(a.shape(), std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// Sum of scalar vars; an empty list yields a constant zero.
template <class T>
Var<T> sum_scalars(const std::vector<Var<T>>& xs) {
  T total = T(0);
  for (const auto& x : xs) {
    if (x.size() != 1) throw std::invalid_argument("sum_scalars: non-scalar input");
    total += x.item();
  }
  return make_result<T>({1}, {total}, xs, [](Node<T>& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer()[0] += self.grad[0];
  });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (self.value[i] > T(0)) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-a.value()[i]));
  return make_result<T>(a.shape(), std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T(1) - y);
    }
  });
}

/// Channel concatenation of two C x H x W tensors.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("concat_channels: spatial shape mismatch");
  std::vector<T> out(a.value().begin(), a.value().end());
  out.insert(out.end(), b.value().begin(), b.value().end());
  const std::size_t split = a.size();
  return make_result<T>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)}, std::move(out), {a, b},
                        [split](Node<T>& self) {
                          if (self.parents[0]->requires_grad) {
                            auto& g = self.parents[0]->grad_buffer();
                            for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
                          }
                          if (self.parents[1]->requires_grad) {
                            auto& g = self.parents[1]->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
                          }
                        });
}

template <class T>
Var<T> upsample_nearest2x(const Var<T>& a) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  std::vector<T> out(static_cast<std::size_t>(c) * 4 * h * w);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x)
        out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + x] =
            a.value()[(static_cast<std::size_t>(ch) * h + y / 2) * w + x / 2];
  return make_result<T>({c, 2 * h, 2 * w}, std::move(out), {a}, [c, h, w](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int x = 0; x < 2 * w; ++x)
          g[(static_cast<std::size_t>(ch) * h + y / 2) * w + x / 2] +=
              self.grad[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + x];
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& a) {
  const int c = a.dim(0);
  const std::size_t plane = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
  std::vector<T> out(c, T(0));
  for (int ch = 0; ch < c; ++ch) {
    T s = T(0);
    for (std::size_t i = 0; i < plane; ++i) s += a.value()[ch * plane + i];
    out[ch] = s / static_cast<T>(plane);
  }
  return make_result<T>({c}, std::move(out), {a}, [c, plane](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      const T d = self.grad[ch] / static_cast<T>(plane);
      for (std::size_t i = 0; i < plane; ++i) g[ch * plane + i] += d;
    }
  });
}

/// Inverted dropout; identity outside training or when rate is zero.
template <class T>
Var<T> dropout(const Var<T>& a, double rate, bool training, std::mt19937_64& rng) {
  if (!training || rate <= 0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * mask[i];
  return make_result<T>(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

/// y = W x + b with W stored row-major as [out, in].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int out_n = w.dim(0), in_n = w.dim(1);
  if (static_cast<int>(x.size()) != in_n) throw std::invalid_argument("linear: input size mismatch");
  const T* wv = w.value().data();
  const T* xv = x.value().data();
  std::vector<T> out(out_n);
  for (int o = 0; o < out_n; ++o) {
    T acc = b.value()[o];
    for (int i = 0; i < in_n; ++i) acc += wv[static_cast<std::size_t>(o) * in_n + i] * xv[i];
    out[o] = acc;
  }
  return make_result<T>({out_n}, std::move(out), {x, w, b}, [out_n, in_n](Node<T>& self) {
    const T* g = self.grad.data();
    Node<T>& xn = *self.parents[0];
    Node<T>& wn = *self.parents[1];
    Node<T>& bn = *self.parents[2];
    if (xn.requires_grad) {
      auto& gx = xn.grad_buffer();
      for (int o = 0; o < out_n; ++o)
        for (int i = 0; i < in_n; ++i) gx[i] += wn.value[static_cast<std::size_t>(o) * in_n + i] * g[o];
    }
    if (wn.requires_grad) {
      auto& gw = wn.grad_buffer();
      for (int o = 0; o < out_n; ++o)
        for (int i = 0; i < in_n; ++i) gw[static_cast<std::size_t>(o) * in_n + i] += g[o] * xn.value[i];
    }
    if (bn.requires_grad) {
      auto& gb = bn.grad_buffer();
      for (int o = 0; o < out_n; ++o) gb[o] += g[o];
    }
  });
}

/// 2-D convolution of a C x H x W input with weights [O, C, k, k] and bias
/// [O], via im2col and a single GEMM.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  if (x.shape().size() != 3 || w.shape().size() != 4 || w.dim(1) != x.dim(0))
    throw std::invalid_argument("conv2d: shape mismatch");
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), k = w.dim(2);
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: output would be empty");
  const int rows = C * k * k;
  const int cols_n = Ho * Wo;
  const bool direct = (k == 1 && stride == 1 && pad == 0);

  auto cols = std::make_shared<std::vector<T>>();
  if (!direct) {
    cols->assign(static_cast<std::size_t>(rows) * cols_n, T(0));
    const T* xv = x.value().data();
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* dst = cols->data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            const T* src = xv + (static_cast<std::size_t>(c) * H + iy) * W;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) dst[oy * Wo + ox] = src[ix];
            }
          }
        }
  }
  const T* col_data = direct ? x.value().data() : cols->data();
  Eigen::Map<const Mat> Wm(w.value().data(), O, rows);
  Eigen::Map<const Mat> Cm(col_data, rows, cols_n);
  std::vector<T> out(static_cast<std::size_t>(O) * cols_n);
  Eigen::Map<Mat> Om(out.data(), O, cols_n);
  Om.noalias() = Wm * Cm;
  for (int o = 0; o < O; ++o) Om.row(o).array() += b.value()[o];

  return make_result<T>(
      {O, Ho, Wo}, std::move(out), {x, w, b},
      [=](Node<T>& self) {
        Node<T>& xn = *self.parents[0];
        Node<T>& wn = *self.parents[1];
        Node<T>& bn = *self.parents[2];
        Eigen::Map<const Mat> G(self.grad.data(), O, cols_n);
        const T* cd = direct ? xn.value.data() : cols->data();
        if (wn.requires_grad) {
          Eigen::Map<const Mat> Cm2(cd, rows, cols_n);
          Eigen::Map<Mat>(wn.grad_buffer().data(), O, rows).noalias() += G * Cm2.transpose();
        }
        if (bn.requires_grad) {
          auto& gb = bn.grad_buffer();
          for (int o = 0; o < O; ++o) {
            const T* row = self.grad.data() + static_cast<std::size_t>(o) * cols_n;
            T acc = T(0);
            for (int i = 0; i < cols_n; ++i) acc += row[i];
            gb[o] += acc;
          }
        }
        if (xn.requires_grad) {
          Eigen::Map<const Mat> Wm2(wn.value.data(), O, rows);
          auto& gx = xn.grad_buffer();
          if (direct) {
            Eigen::Map<Mat>(gx.data(), rows, cols_n).noalias() += Wm2.transpose() * G;
          } else {
            Mat dcols = Wm2.transpose() * G;
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const T* src = dcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
                  for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = gx.data() + (static_cast<std::size_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                      const int ix = ox * stride - pad + kx;
                      if (ix >= 0 && ix < W) dst[ix] += src[oy * Wo + ox];
                    }
                  }
                }
          }
        }
      });
}

/// Bilinear gather according to a precomputed plan; differentiable with
/// respect to the source values only.
template <class T>
Var<T> sample(const Var<T>& x, std::shared_ptr<const SamplePlan> plan) {
  if (x.shape().size() != 3 || x.dim(1) != plan->in_h || x.dim(2) != plan->in_w)
    throw std::invalid_argument("sample: plan does not match input");
  const int C = x.dim(0);
  const std::size_t in_plane = static_cast<std::size_t>(plan->in_h) * plan->in_w;
  const std::size_t out_plane = static_cast<std::size_t>(plan->out_h) * plan->out_w;
  std::vector<T> out(C * out_plane, T(0));
  for (int c = 0; c < C; ++c) {
    const T* s = x.value().data() + c * in_plane;
    T* d = out.data() + c * out_plane;
    for (std::size_t o = 0; o < out_plane; ++o) {
      T acc = T(0);
      for (int q = 0; q < 4; ++q)
        if (plan->weights[o][q] != 0.0) acc += static_cast<T>(plan->weights[o][q]) * s[plan->taps[o][q]];
      d[o] = acc;
    }
  }
  return make_result<T>({C, plan->out_h, plan->out_w}, std::move(out), {x},
                        [plan, C, in_plane, out_plane](Node<T>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (int c = 0; c < C; ++c) {
                            T* d = g.data() + c * in_plane;
                            const T* go = self.grad.data() + c * out_plane;
                            for (std::size_t o = 0; o < out_plane; ++o)
                              for (int q = 0; q < 4; ++q)
                                if (plan->weights[o][q] != 0.0)
                                  d[plan->taps[o][q]] += static_cast<T>(plan->weights[o][q]) * go[o];
                          }
                        });
}

template <class T>
std::vector<T> softmax_values(std::span<const T> z) {
  const T mx = *std::max_element(z.begin(), z.end());
  std::vector<T> p(z.size());
  T s = T(0);
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (auto& v : p) v /= s;
  return p;
}

template <class T>
Var<T> softmax(const Var<T>& z) {
  return make_result<T>(z.shape(), softmax_values<T>(z.value()), {z}, [](Node<T>& self) {
    T dot = T(0);
    for (std::size_t i = 0; i < self.value.size(); ++i) dot += self.value[i] * self.grad[i];
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.value[i] * (self.grad[i] - dot);
  });
}

/// sum_i i * p_i over a 1-D distribution.
template <class T>
Var<T> expected_index(const Var<T>& p) {
  T m = T(0);
  for (std::size_t i = 0; i < p.size(); ++i) m += static_cast<T>(i) * p.value()[i];
  return make_result<T>({1}, {m}, {p}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(i) * self.grad[0];
  });
}

}  // namespace crowdage::ag
