#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mslau/kernels.hpp"
#include "mslau/tensor.hpp"

// Reverse-mode autodiff over a dynamically built graph. Each operation
// produces a node holding its value, a zero-initialized gradient of the same
// shape, references to its inputs, and a pullback that scatters the node's
// gradient into the inputs' gradients.

namespace mslau {
namespace ad {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;
    const char* op = "leaf";
    bool requires_grad = false;

    explicit Node(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
};

template <typename T>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var leaf(Tensor<T> v, bool requires_grad) {
        auto n = std::make_shared<Node<T>>(std::move(v));
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    const Tensor<T>& val() const { return node_->value; }
    Tensor<T>& grad() { return node_->grad; }
    const Tensor<T>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor<T>(node_->value.shape()); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }
    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->value.shape(); }
    int64_t dim(int i) const { return node_->value.dim(i); }

  private:
    std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Tensor<T> v) {
    return Var<T>::leaf(std::move(v), false);
}

template <typename T>
Var<T> param(Tensor<T> v) {
    return Var<T>::leaf(std::move(v), true);
}

template <typename T, typename F>
Var<T> make_op(const char* tag, Tensor<T> value, std::vector<Var<T>> inputs, F backfn) {
    auto n = std::make_shared<Node<T>>(std::move(value));
    n->op = tag;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    n->requires_grad = needs;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    if (needs) n->backprop = std::move(backfn);
    return Var<T>(std::move(n));
}

// Accumulate g into target's grad if it participates in differentiation.
template <typename T>
inline void accum(const std::shared_ptr<Node<T>>& target, const Tensor<T>& g) {
    if (!target->requires_grad) return;
    T* dst = target->grad.data();
    const T* src = g.data();
    const int64_t n = target->grad.size();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

// -------------------------------------------------------------- backward ---

// Reverse topological traversal from a scalar root; gradients accumulate
// additively across fan-out.
template <typename T>
void backward(const Var<T>& root) {
    if (root.val().size() != 1) throw_contract("backward: root must be scalar, got " + shape_str(root.shape()));
    // iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({root.node().get(), 0});
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node<T>* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// ------------------------------------------------------------ elementwise ---

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "add");
    Tensor<T> y = a.val();
    const T* pb = b.val().data();
    for (int64_t i = 0; i < y.size(); ++i) y[i] += pb[i];
    return make_op<T>("add", std::move(y), {a, b}, [pa = a.node(), pb2 = b.node()](Node<T>& self) {
        accum(pa, self.grad);
        accum(pb2, self.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "sub");
    Tensor<T> y = a.val();
    const T* pb = b.val().data();
    for (int64_t i = 0; i < y.size(); ++i) y[i] -= pb[i];
    return make_op<T>("sub", std::move(y), {a, b}, [pa = a.node(), pb2 = b.node()](Node<T>& self) {
        accum(pa, self.grad);
        if (pb2->requires_grad) {
            Tensor<T> g(self.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
            accum(pb2, g);
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "mul");
    Tensor<T> y = a.val();
    const T* pb = b.val().data();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= pb[i];
    return make_op<T>("mul", std::move(y), {a, b}, [pa = a.node(), pb2 = b.node()](Node<T>& self) {
        if (pa->requires_grad) {
            Tensor<T> g(self.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pb2->value[i];
            accum(pa, g);
        }
        if (pb2->requires_grad) {
            Tensor<T> g(self.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * pa->value[i];
            accum(pb2, g);
        }
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a.val(), b.val(), "div");
    Tensor<T> y = a.val();
    const T* pb = b.val().data();
    for (int64_t i = 0; i < y.size(); ++i) y[i] /= pb[i];
    return make_op<T>("div", std::move(y), {a, b}, [pa = a.node(), pb2 = b.node()](Node<T>& self) {
        if (pa->requires_grad) {
            Tensor<T> g(self.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / pb2->value[i];
            accum(pa, g);
        }
        if (pb2->requires_grad) {
            Tensor<T> g(self.grad.shape());
            for (int64_t i = 0; i < g.size(); ++i)
                g[i] = -self.grad[i] * pa->value[i] / (pb2->value[i] * pb2->value[i]);
            accum(pb2, g);
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> y = a.val();
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= c;
    return make_op<T>("scale", std::move(y), {a}, [pa = a.node(), c](Node<T>& self) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = c * self.grad[i];
        accum(pa, g);
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> y = a.val();
    for (int64_t i = 0; i < y.size(); ++i) y[i] += c;
    return make_op<T>("add_scalar", std::move(y), {a}, [pa = a.node()](Node<T>& self) { accum(pa, self.grad); });
}

template <typename T>
Var<T> logv(const Var<T>& a) {
    Tensor<T> y = a.val();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::log(y[i]);
    return make_op<T>("log", std::move(y), {a}, [pa = a.node()](Node<T>& self) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / pa->value[i];
        accum(pa, g);
    });
}

// Subgradient at the clamp boundary is zero.
template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
    Tensor<T> y = a.val();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::min(hi, std::max(lo, y[i]));
    return make_op<T>("clamp", std::move(y), {a}, [pa = a.node(), lo, hi](Node<T>& self) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) {
            const T x = pa->value[i];
            g[i] = (x > lo && x < hi) ? self.grad[i] : T(0);
        }
        accum(pa, g);
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> y = a.val();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = std::max(T(0), y[i]);
    return make_op<T>("relu", std::move(y), {a}, [pa = a.node()](Node<T>& self) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = pa->value[i] > T(0) ? self.grad[i] : T(0);
        accum(pa, g);
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> y(a.shape());
    const T* px = a.val().data();
    for (int64_t i = 0; i < y.size(); ++i) y[i] = kern::gelu_val(px[i]);
    return make_op<T>("gelu", std::move(y), {a}, [pa = a.node()](Node<T>& self) {
        Tensor<T> g(self.grad.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * kern::gelu_grad(pa->value[i]);
        accum(pa, g);
    });
}

// ----------------------------------------------------------------- linalg ---

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> y = kern::matmul_nn(a.val(), b.val());
    return make_op<T>("matmul", std::move(y), {a, b}, [pa = a.node(), pb = b.node()](Node<T>& self) {
        if (pa->requires_grad) accum(pa, kern::matmul_nt(self.grad, pb->value));
        if (pb->requires_grad) accum(pb, kern::matmul_tn(pa->value, self.grad));
    });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b) {
    Tensor<T> y = kern::bmm(a.val(), b.val());
    return make_op<T>("bmm", std::move(y), {a, b}, [pa = a.node(), pb = b.node()](Node<T>& self) {
        if (pa->requires_grad) accum(pa, kern::bmm(self.grad, pb->value, kern::MatOp::nt));
        if (pb->requires_grad) accum(pb, kern::bmm(pa->value, self.grad, kern::MatOp::tn));
    });
}

template <typename T>
Var<T> permute(const Var<T>& a, std::vector<int> perm) {
    Tensor<T> y = kern::permute(a.val(), perm);
    return make_op<T>("permute", std::move(y), {a}, [pa = a.node(), perm](Node<T>& self) {
        accum(pa, kern::permute(self.grad, kern::inverse_perm(perm)));
    });
}

template <typename T>
Var<T> transpose_last2(const Var<T>& a) {
    if (a.val().rank() != 3) throw_dim("transpose_last2: expects rank 3");
    return permute(a, {0, 2, 1});
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
    Tensor<T> y = a.val().reshaped(s);
    return make_op<T>("reshape", std::move(y), {a}, [pa = a.node()](Node<T>& self) {
        accum(pa, self.grad.reshaped(pa->value.shape()));
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    std::vector<const Tensor<T>*> vals;
    vals.reserve(xs.size());
    for (const auto& x : xs) vals.push_back(&x.val());
    Tensor<T> y = kern::concat(vals, axis);
    std::vector<int64_t> offs;
    int64_t off = 0;
    for (const auto& x : xs) {
        offs.push_back(off);
        off += x.val().dim(axis);
    }
    return make_op<T>("concat", std::move(y), xs, [xs, axis, offs](Node<T>& self) {
        for (size_t i = 0; i < xs.size(); ++i) {
            const auto& p = xs[i].node();
            if (!p->requires_grad) continue;
            accum(p, kern::slice(self.grad, axis, offs[i], p->value.dim(axis)));
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& a, int axis, int64_t start, int64_t len) {
    Tensor<T> y = kern::slice(a.val(), axis, start, len);
    return make_op<T>("slice", std::move(y), {a}, [pa = a.node(), axis, start](Node<T>& self) {
        if (!pa->requires_grad) return;
        Tensor<T> g(pa->value.shape());
        kern::slice_scatter_add(g, self.grad, axis, start);
        accum(pa, g);
    });
}

// ------------------------------------------------------------- nn kernels ---

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int64_t stride, int64_t pad, int64_t groups) {
    const bool has_bias = bias.defined();
    Tensor<T> y = kern::conv2d_fwd(x.val(), w.val(), has_bias ? bias.val() : Tensor<T>(), stride, pad, groups);
    std::vector<Var<T>> ins{x, w};
    if (has_bias) ins.push_back(bias);
    return make_op<T>("conv2d", std::move(y), std::move(ins),
                      [px = x.node(), pw = w.node(), pb = has_bias ? bias.node() : nullptr, stride, pad,
                       groups](Node<T>& self) {
                          if (px->requires_grad)
                              accum(px, kern::conv2d_bwd_x(self.grad, px->value, pw->value, stride, pad, groups));
                          if (pw->requires_grad)
                              accum(pw, kern::conv2d_bwd_w(self.grad, px->value, pw->value, stride, pad, groups));
                          if (pb && pb->requires_grad) accum(pb, kern::conv2d_bwd_b(self.grad));
                      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int64_t stride, int64_t pad, int64_t groups) {
    return conv2d(x, w, Var<T>(), stride, pad, groups);
}

template <typename T>
Var<T> bilinear_upsample2x(const Var<T>& x) {
    Tensor<T> y = kern::upsample2x_fwd(x.val());
    const int64_t h = x.val().dim(2), w = x.val().dim(3);
    return make_op<T>("bilinear_upsample2x", std::move(y), {x}, [px = x.node(), h, w](Node<T>& self) {
        accum(px, kern::upsample2x_bwd(self.grad, h, w));
    });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
    Tensor<T> y = kern::softmax_fwd(x.val(), axis);
    return make_op<T>("softmax", std::move(y), {x}, [px = x.node(), axis](Node<T>& self) {
        accum(px, kern::softmax_bwd(self.grad, self.value, axis));
    });
}

// Running statistics live outside the graph and are updated as a side effect
// of the train-mode forward. Only train mode participates in backward.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   const std::shared_ptr<Tensor<T>>& running_mean, const std::shared_ptr<Tensor<T>>& running_var,
                   bool train) {
    auto fwd = kern::batchnorm_fwd(x.val(), gamma.val(), beta.val(), *running_mean, *running_var, train);
    if (!train) {
        // eval mode: affine map of constants, no backward path
        return make_op<T>("batchnorm2d.eval", std::move(fwd.y), {}, [](Node<T>&) {});
    }
    auto mean = std::make_shared<Tensor<T>>(std::move(fwd.mean));
    auto invstd = std::make_shared<Tensor<T>>(std::move(fwd.invstd));
    return make_op<T>("batchnorm2d", std::move(fwd.y), {x, gamma, beta},
                      [px = x.node(), pg = gamma.node(), pb = beta.node(), mean, invstd](Node<T>& self) {
                          auto b = kern::batchnorm_bwd(self.grad, px->value, pg->value, *mean, *invstd);
                          if (px->requires_grad) accum(px, b.dx);
                          if (pg->requires_grad) accum(pg, b.dgamma);
                          if (pb->requires_grad) accum(pb, b.dbeta);
                      });
}

template <typename T>
Var<T> layernorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta) {
    auto fwd = kern::layernorm_fwd(x.val(), gamma.val(), beta.val());
    auto mean = std::make_shared<Tensor<T>>(std::move(fwd.mean));
    auto invstd = std::make_shared<Tensor<T>>(std::move(fwd.invstd));
    return make_op<T>("layernorm", std::move(fwd.y), {x, gamma, beta},
                      [px = x.node(), pg = gamma.node(), pb = beta.node(), mean, invstd](Node<T>& self) {
                          auto b = kern::layernorm_bwd(self.grad, px->value, pg->value, *mean, *invstd);
                          if (px->requires_grad) accum(px, b.dx);
                          if (pg->requires_grad) accum(pg, b.dgamma);
                          if (pb->requires_grad) accum(pb, b.dbeta);
                      });
}

// x[..., C] + b[C]
template <typename T>
Var<T> bias_add_last(const Var<T>& x, const Var<T>& b) {
    const int64_t c = x.val().dim(x.val().rank() - 1);
    if (b.val().dim(0) != c) throw_dim("bias_add_last: extent mismatch");
    Tensor<T> y = x.val();
    const int64_t rows = y.size() / c;
    for (int64_t r = 0; r < rows; ++r) {
        T* p = y.data() + r * c;
        for (int64_t i = 0; i < c; ++i) p[i] += b.val()[i];
    }
    return make_op<T>("bias_add", std::move(y), {x, b}, [px = x.node(), pb = b.node(), c](Node<T>& self) {
        accum(px, self.grad);
        if (pb->requires_grad) {
            Tensor<T> db({c});
            const int64_t rows = self.grad.size() / c;
            for (int64_t r = 0; r < rows; ++r) {
                const T* p = self.grad.data() + r * c;
                for (int64_t i = 0; i < c; ++i) db[i] += p[i];
            }
            accum(pb, db);
        }
    });
}

// token-wise linear map: x[B,N,Cin] * w[Cin,Cout] + b
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& s = x.val().shape();
    const int64_t cin = s.back();
    int64_t rows = x.val().size() / cin;
    Var<T> flat = reshape(x, {rows, cin});
    Var<T> y = matmul(flat, w);
    if (b.defined()) y = bias_add_last(y, b);
    Shape os = s;
    os.back() = w.val().dim(1);
    return reshape(y, os);
}

// broadcast multiply by a one-element parameter
template <typename T>
Var<T> smul(const Var<T>& x, const Var<T>& s) {
    if (s.val().size() != 1) throw_dim("smul: scale must be a single element");
    Tensor<T> y = x.val();
    const T c = s.val()[0];
    for (int64_t i = 0; i < y.size(); ++i) y[i] *= c;
    return make_op<T>("smul", std::move(y), {x, s}, [px = x.node(), ps = s.node()](Node<T>& self) {
        if (px->requires_grad) {
            Tensor<T> g(self.grad.shape());
            const T c = ps->value[0];
            for (int64_t i = 0; i < g.size(); ++i) g[i] = c * self.grad[i];
            accum(px, g);
        }
        if (ps->requires_grad) {
            T acc = 0;
            for (int64_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px->value[i];
            accum(ps, Tensor<T>::scalar(acc));
        }
    });
}

// -------------------------------------------------------------- reductions ---

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    Tensor<T> y = Tensor<T>::scalar(kern::sum_all(x.val()));
    return make_op<T>("sum", std::move(y), {x}, [px = x.node()](Node<T>& self) {
        if (!px->requires_grad) return;
        Tensor<T> g = Tensor<T>::full(px->value.shape(), self.grad[0]);
        accum(px, g);
    });
}

// [B,C,...] -> [C]
template <typename T>
Var<T> per_channel_sum(const Var<T>& x) {
    Tensor<T> y = kern::per_channel_sum(x.val());
    return make_op<T>("per_channel_sum", std::move(y), {x}, [px = x.node()](Node<T>& self) {
        if (!px->requires_grad) return;
        const int64_t b = px->value.dim(0), c = px->value.dim(1);
        const int64_t inner = px->value.size() / (b * c);
        Tensor<T> g(px->value.shape());
        for (int64_t ib = 0; ib < b; ++ib)
            for (int64_t ic = 0; ic < c; ++ic) {
                T* p = g.data() + (ib * c + ic) * inner;
                for (int64_t i = 0; i < inner; ++i) p[i] = self.grad[ic];
            }
        accum(px, g);
    });
}

// --------------------------------------------------------- token <-> map ---

// [B,C,H,W] -> [B,H*W,C]
template <typename T>
Var<T> map_to_tokens(const Var<T>& x) {
    const int64_t b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
    return permute(reshape(x, {b, c, n}), {0, 2, 1});
}

// [B,N,C] -> [B,C,H,W], N == H*W
template <typename T>
Var<T> tokens_to_map(const Var<T>& t, int64_t h, int64_t w) {
    const int64_t b = t.dim(0), c = t.dim(2);
    if (t.dim(1) != h * w) throw_dim("tokens_to_map: token count does not match H*W");
    return reshape(permute(t, {0, 2, 1}), {b, c, h, w});
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
    return add(a, b);
}
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
    return sub(a, b);
}
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
    return mul(a, b);
}

}  // namespace ad
}  // namespace mslau
