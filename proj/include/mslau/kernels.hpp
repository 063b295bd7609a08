#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mslau/tensor.hpp"

// Raw numeric kernels over dense tensors. Every kernel assigns each output
// element to exactly one owner (thread) and accumulates in a fixed order, so
// results are bit-identical regardless of thread count.

namespace mslau {

void set_num_threads(int n);
int num_threads();

namespace kern {

// ---------------------------------------------------------------- matmul ---

// C[M,P] = A[M,K] * B[K,P]
template <typename T>
Tensor<T> matmul_nn(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw_dim("matmul: inputs must be rank 2");
    const int64_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    if (b.dim(0) != k)
        throw_dim("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> c({m, p});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * p > 16384)
    for (int64_t i = 0; i < m; ++i) {
        T* crow = pc + i * p;
        for (int64_t l = 0; l < k; ++l) {
            const T av = pa[i * k + l];
            const T* brow = pb + l * p;
            for (int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C[M,K] = A[M,P] * B[K,P]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const int64_t m = a.dim(0), p = a.dim(1), k = b.dim(0);
    if (b.dim(1) != p) throw_dim("matmul_nt: inner extents differ");
    Tensor<T> c({m, k});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * p > 16384)
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < k; ++j) {
            const T* arow = pa + i * p;
            const T* brow = pb + j * p;
            T acc = 0;
            for (int64_t l = 0; l < p; ++l) acc += arow[l] * brow[l];
            pc[i * k + j] = acc;
        }
    }
    return c;
}

// C[K,P] = A[M,K]^T * B[M,P]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const int64_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    if (b.dim(0) != m) throw_dim("matmul_tn: inner extents differ");
    Tensor<T> c({k, p});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
#pragma omp parallel for schedule(static) if (m * k * p > 16384)
    for (int64_t j = 0; j < k; ++j) {
        T* crow = pc + j * p;
        for (int64_t i = 0; i < m; ++i) {
            const T av = pa[i * k + j];
            const T* brow = pb + i * p;
            for (int64_t l = 0; l < p; ++l) crow[l] += av * brow[l];
        }
    }
    return c;
}

enum class MatOp { nn, nt, tn };

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, MatOp op = MatOp::nn) {
    switch (op) {
        case MatOp::nn: return matmul_nn(a, b);
        case MatOp::nt: return matmul_nt(a, b);
        case MatOp::tn: return matmul_tn(a, b);
    }
    throw_contract("matmul: bad op");
}

// Batched over leading axis: [G,M,K] x [G,K,P] -> [G,M,P]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, MatOp op = MatOp::nn) {
    if (a.rank() != 3 || b.rank() != 3) throw_dim("bmm: inputs must be rank 3");
    if (a.dim(0) != b.dim(0)) throw_dim("bmm: batch extents differ");
    const int64_t g = a.dim(0);
    Shape sa{a.dim(1), a.dim(2)}, sb{b.dim(1), b.dim(2)};
    Tensor<T> first;
    std::vector<Tensor<T>> outs;
    outs.reserve(size_t(g));
    for (int64_t i = 0; i < g; ++i) {
        Tensor<T> ai(sa), bi(sb);
        std::copy_n(a.data() + i * ai.size(), ai.size(), ai.data());
        std::copy_n(b.data() + i * bi.size(), bi.size(), bi.data());
        outs.push_back(matmul(ai, bi, op));
    }
    Shape so{g, outs[0].dim(0), outs[0].dim(1)};
    Tensor<T> out(so);
    for (int64_t i = 0; i < g; ++i) std::copy_n(outs[size_t(i)].data(), outs[size_t(i)].size(), out.data() + i * outs[size_t(i)].size());
    return out;
}

// ---------------------------------------------------------------- conv2d ---

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    const int64_t span = in + 2 * pad - k;
    if (span < 0 || span % stride != 0)
        throw_dim("conv2d: output extent not integral (in=" + std::to_string(in) + " k=" + std::to_string(k) +
                  " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad) + ")");
    return span / stride + 1;
}

// x[B,Cin,H,W], w[Cout,Cin/g,k,k], bias[Cout] or empty -> [B,Cout,H',W']
// Cross-correlation with zero padding.
template <typename T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride, int64_t pad,
                     int64_t groups) {
    if (x.rank() != 4 || w.rank() != 4) throw_dim("conv2d: x and w must be rank 4");
    const int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), cing = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (kh != kw) throw_dim("conv2d: kernel must be square");
    if (groups <= 0 || cin % groups != 0 || cout % groups != 0)
        throw_dim("conv2d: channel extents not divisible by groups");
    if (cing != cin / groups) throw_dim("conv2d: weight input-channel extent mismatch");
    if (!bias.empty() && (bias.rank() != 1 || bias.dim(0) != cout)) throw_dim("conv2d: bias extent mismatch");
    const int64_t oh = conv_out_extent(h, kh, stride, pad);
    const int64_t ow = conv_out_extent(wd, kw, stride, pad);
    const int64_t cpg_out = cout / groups;

    Tensor<T> y({b, cout, oh, ow});
#pragma omp parallel for collapse(2) schedule(static) if (b * cout * oh * ow > 4096)
    for (int64_t ib = 0; ib < b; ++ib) {
        for (int64_t oc = 0; oc < cout; ++oc) {
            const int64_t g = oc / cpg_out;
            const T bv = bias.empty() ? T(0) : bias[oc];
            for (int64_t oy = 0; oy < oh; ++oy) {
                for (int64_t ox = 0; ox < ow; ++ox) {
                    T acc = bv;
                    for (int64_t ic = 0; ic < cing; ++ic) {
                        const int64_t xc = g * cing + ic;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                acc += x.at4(ib, xc, iy, ix) * w.at4(oc, ic, ky, kx);
                            }
                        }
                    }
                    y.at4(ib, oc, oy, ox) = acc;
                }
            }
        }
    }
    return y;
}

// gradient w.r.t. x: gather form, one owner per input element
template <typename T>
Tensor<T> conv2d_bwd_x(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad,
                       int64_t groups) {
    const int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), cing = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t oh = dy.dim(2), ow = dy.dim(3);
    const int64_t cpg_out = cout / groups;
    Tensor<T> dx({b, cin, h, wd});
#pragma omp parallel for collapse(2) schedule(static) if (b * cin * h * wd > 4096)
    for (int64_t ib = 0; ib < b; ++ib) {
        for (int64_t xc = 0; xc < cin; ++xc) {
            const int64_t g = xc / cing;
            const int64_t ic = xc % cing;
            for (int64_t iy = 0; iy < h; ++iy) {
                for (int64_t ix = 0; ix < wd; ++ix) {
                    T acc = 0;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        const int64_t sy = iy + pad - ky;
                        if (sy < 0 || sy % stride != 0) continue;
                        const int64_t oy = sy / stride;
                        if (oy >= oh) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t sx = ix + pad - kx;
                            if (sx < 0 || sx % stride != 0) continue;
                            const int64_t ox = sx / stride;
                            if (ox >= ow) continue;
                            for (int64_t oc = g * cpg_out; oc < (g + 1) * cpg_out; ++oc)
                                acc += dy.at4(ib, oc, oy, ox) * w.at4(oc, ic, ky, kx);
                        }
                    }
                    dx.at4(ib, xc, iy, ix) = acc;
                }
            }
        }
    }
    return dx;
}

template <typename T>
Tensor<T> conv2d_bwd_w(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad,
                       int64_t groups) {
    const int64_t b = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t cout = w.dim(0), cing = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int64_t oh = dy.dim(2), ow = dy.dim(3);
    const int64_t cpg_out = cout / groups;
    Tensor<T> dw(w.shape());
#pragma omp parallel for schedule(static) if (cout * cing * kh * kw > 256)
    for (int64_t oc = 0; oc < cout; ++oc) {
        const int64_t g = oc / cpg_out;
        for (int64_t ic = 0; ic < cing; ++ic) {
            const int64_t xc = g * cing + ic;
            for (int64_t ky = 0; ky < kh; ++ky) {
                for (int64_t kx = 0; kx < kw; ++kx) {
                    T acc = 0;
                    for (int64_t ib = 0; ib < b; ++ib) {
                        for (int64_t oy = 0; oy < oh; ++oy) {
                            const int64_t iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t ox = 0; ox < ow; ++ox) {
                                const int64_t ix = ox * stride + kx - pad;
                                if (ix < 0 || ix >= wd) continue;
                                acc += dy.at4(ib, oc, oy, ox) * x.at4(ib, xc, iy, ix);
                            }
                        }
                    }
                    dw.at4(oc, ic, ky, kx) = acc;
                }
            }
        }
    }
    return dw;
}

template <typename T>
Tensor<T> conv2d_bwd_b(const Tensor<T>& dy) {
    const int64_t b = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
    Tensor<T> db({c});
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* p = dy.data() + (ib * c + ic) * hw;
            T acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            db[ic] += acc;
        }
    return db;
}

// ---------------------------------------------------- bilinear upsample ----

// Sample positions use half-pixel centers: out o reads in coord (o+0.5)/2-0.5,
// clamped to the valid range.
struct Lerp {
    int64_t i0, i1;
    double w0, w1;
};

inline std::vector<Lerp> up2_table(int64_t in) {
    std::vector<Lerp> t(size_t(2 * in));
    for (int64_t o = 0; o < 2 * in; ++o) {
        double c = (double(o) + 0.5) / 2.0 - 0.5;
        if (c < 0) c = 0;
        if (c > double(in - 1)) c = double(in - 1);
        int64_t i0 = int64_t(std::floor(c));
        int64_t i1 = std::min(i0 + 1, in - 1);
        double f = c - double(i0);
        t[size_t(o)] = {i0, i1, 1.0 - f, f};
    }
    return t;
}

template <typename T>
Tensor<T> upsample2x_fwd(const Tensor<T>& x) {
    if (x.rank() != 4) throw_dim("bilinear_upsample2x: input must be rank 4");
    const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const auto ty = up2_table(h);
    const auto tx = up2_table(w);
    Tensor<T> y({b, c, 2 * h, 2 * w});
#pragma omp parallel for collapse(2) schedule(static) if (b * c * h * w > 4096)
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t oy = 0; oy < 2 * h; ++oy) {
                const Lerp& ly = ty[size_t(oy)];
                for (int64_t ox = 0; ox < 2 * w; ++ox) {
                    const Lerp& lx = tx[size_t(ox)];
                    const double v = ly.w0 * (lx.w0 * double(x.at4(ib, ic, ly.i0, lx.i0)) +
                                              lx.w1 * double(x.at4(ib, ic, ly.i0, lx.i1))) +
                                     ly.w1 * (lx.w0 * double(x.at4(ib, ic, ly.i1, lx.i0)) +
                                              lx.w1 * double(x.at4(ib, ic, ly.i1, lx.i1)));
                    y.at4(ib, ic, oy, ox) = T(v);
                }
            }
    return y;
}

template <typename T>
Tensor<T> upsample2x_bwd(const Tensor<T>& dy, int64_t h, int64_t w) {
    const int64_t b = dy.dim(0), c = dy.dim(1);
    const auto ty = up2_table(h);
    const auto tx = up2_table(w);
    Tensor<T> dx({b, c, h, w});
#pragma omp parallel for collapse(2) schedule(static) if (b * c * h * w > 4096)
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic)
            for (int64_t oy = 0; oy < 2 * h; ++oy) {
                const Lerp& ly = ty[size_t(oy)];
                for (int64_t ox = 0; ox < 2 * w; ++ox) {
                    const Lerp& lx = tx[size_t(ox)];
                    const T g = dy.at4(ib, ic, oy, ox);
                    dx.at4(ib, ic, ly.i0, lx.i0) += T(ly.w0 * lx.w0) * g;
                    dx.at4(ib, ic, ly.i0, lx.i1) += T(ly.w0 * lx.w1) * g;
                    dx.at4(ib, ic, ly.i1, lx.i0) += T(ly.w1 * lx.w0) * g;
                    dx.at4(ib, ic, ly.i1, lx.i1) += T(ly.w1 * lx.w1) * g;
                }
            }
    return dx;
}

// --------------------------------------------------------------- softmax ---

// exp-normalization along `axis` with max subtraction
template <typename T>
Tensor<T> softmax_fwd(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank()) throw_dim("softmax: bad axis " + std::to_string(axis));
    const int64_t len = x.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> y(x.shape());
    const T* px = x.data();
    T* py = y.data();
#pragma omp parallel for collapse(2) schedule(static) if (outer * inner > 256)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * len * inner + i;
            T mx = px[base];
            for (int64_t l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
            T sum = 0;
            for (int64_t l = 0; l < len; ++l) {
                const T e = std::exp(px[base + l * inner] - mx);
                py[base + l * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (int64_t l = 0; l < len; ++l) py[base + l * inner] *= inv;
        }
    }
    return y;
}

// dx = y * (dy - sum(dy*y, axis))
template <typename T>
Tensor<T> softmax_bwd(const Tensor<T>& dy, const Tensor<T>& y, int axis) {
    const int64_t len = y.dim(axis);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= y.dim(i);
    for (int i = axis + 1; i < y.rank(); ++i) inner *= y.dim(i);
    Tensor<T> dx(y.shape());
    const T* pdy = dy.data();
    const T* py = y.data();
    T* pdx = dx.data();
#pragma omp parallel for collapse(2) schedule(static) if (outer * inner > 256)
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const int64_t base = o * len * inner + i;
            T dot = 0;
            for (int64_t l = 0; l < len; ++l) dot += pdy[base + l * inner] * py[base + l * inner];
            for (int64_t l = 0; l < len; ++l)
                pdx[base + l * inner] = py[base + l * inner] * (pdy[base + l * inner] - dot);
        }
    }
    return dx;
}

// ----------------------------------------------------------- activations ---

template <typename T>
T gelu_val(T x) {
    const T a = T(0.7978845608028654);  // sqrt(2/pi)
    const T c = T(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(a * (x + c * x * x * x)));
}

template <typename T>
T gelu_grad(T x) {
    const T a = T(0.7978845608028654);
    const T c = T(0.044715);
    const T u = a * (x + c * x * x * x);
    const T t = std::tanh(u);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * a * (T(1) + T(3) * c * x * x);
}

// ------------------------------------------------------------ batch norm ---

template <typename T>
struct BnFwd {
    Tensor<T> y;
    Tensor<T> mean;    // per channel, batch statistics (train mode)
    Tensor<T> invstd;  // 1/sqrt(var+eps)
};

// Per-channel normalization over B*H*W. Train mode uses batch statistics and
// updates running stats in place (momentum 0.1, unbiased running variance).
template <typename T>
BnFwd<T> batchnorm_fwd(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, bool train, T eps = T(1e-5), T momentum = T(0.1)) {
    if (x.rank() != 4) throw_dim("batchnorm2d: input must be rank 4");
    const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.dim(0) != c || beta.dim(0) != c) throw_dim("batchnorm2d: parameter extent mismatch");
    const int64_t m = b * hw;
    Tensor<T> mean({c}), invstd({c});
    Tensor<T> y(x.shape());
    if (train) {
#pragma omp parallel for schedule(static) if (c > 4)
        for (int64_t ic = 0; ic < c; ++ic) {
            T s = 0;
            for (int64_t ib = 0; ib < b; ++ib) {
                const T* p = x.data() + (ib * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) s += p[i];
            }
            const T mu = s / T(m);
            T v = 0;
            for (int64_t ib = 0; ib < b; ++ib) {
                const T* p = x.data() + (ib * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) {
                    const T d = p[i] - mu;
                    v += d * d;
                }
            }
            const T var = v / T(m);
            mean[ic] = mu;
            invstd[ic] = T(1) / std::sqrt(var + eps);
            const T unbiased = m > 1 ? v / T(m - 1) : var;
            running_mean[ic] = (T(1) - momentum) * running_mean[ic] + momentum * mu;
            running_var[ic] = (T(1) - momentum) * running_var[ic] + momentum * unbiased;
            const T g = gamma[ic], bt = beta[ic], is = invstd[ic];
            for (int64_t ib = 0; ib < b; ++ib) {
                const T* p = x.data() + (ib * c + ic) * hw;
                T* q = y.data() + (ib * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * g + bt;
            }
        }
    } else {
#pragma omp parallel for schedule(static) if (c > 4)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T mu = running_mean[ic];
            const T is = T(1) / std::sqrt(running_var[ic] + eps);
            mean[ic] = mu;
            invstd[ic] = is;
            const T g = gamma[ic], bt = beta[ic];
            for (int64_t ib = 0; ib < b; ++ib) {
                const T* p = x.data() + (ib * c + ic) * hw;
                T* q = y.data() + (ib * c + ic) * hw;
                for (int64_t i = 0; i < hw; ++i) q[i] = (p[i] - mu) * is * g + bt;
            }
        }
    }
    return {std::move(y), std::move(mean), std::move(invstd)};
}

template <typename T>
struct BnBwd {
    Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
BnBwd<T> batchnorm_bwd(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& mean,
                       const Tensor<T>& invstd) {
    const int64_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const int64_t m = b * hw;
    Tensor<T> dx(x.shape()), dgamma({c}), dbeta({c});
#pragma omp parallel for schedule(static) if (c > 4)
    for (int64_t ic = 0; ic < c; ++ic) {
        const T mu = mean[ic], is = invstd[ic], g = gamma[ic];
        T sum_dy = 0, sum_dy_xhat = 0;
        for (int64_t ib = 0; ib < b; ++ib) {
            const T* pdy = dy.data() + (ib * c + ic) * hw;
            const T* px = x.data() + (ib * c + ic) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                sum_dy += pdy[i];
                sum_dy_xhat += pdy[i] * (px[i] - mu) * is;
            }
        }
        dgamma[ic] = sum_dy_xhat;
        dbeta[ic] = sum_dy;
        const T k = g * is / T(m);
        for (int64_t ib = 0; ib < b; ++ib) {
            const T* pdy = dy.data() + (ib * c + ic) * hw;
            const T* px = x.data() + (ib * c + ic) * hw;
            T* pdx = dx.data() + (ib * c + ic) * hw;
            for (int64_t i = 0; i < hw; ++i) {
                const T xhat = (px[i] - mu) * is;
                pdx[i] = k * (T(m) * pdy[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    return {std::move(dx), std::move(dgamma), std::move(dbeta)};
}

// ------------------------------------------------------------ layer norm ---

template <typename T>
struct LnFwd {
    Tensor<T> y, mean, invstd;  // mean/invstd per leading position
};

// Normalization over the last axis, eps 1e-6.
template <typename T>
LnFwd<T> layernorm_fwd(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
    const int64_t c = x.dim(x.rank() - 1);
    if (gamma.dim(0) != c || beta.dim(0) != c) throw_dim("layernorm: parameter extent mismatch");
    const int64_t rows = x.size() / c;
    Tensor<T> y(x.shape()), mean({rows}), invstd({rows});
#pragma omp parallel for schedule(static) if (rows > 64)
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = x.data() + r * c;
        T s = 0;
        for (int64_t i = 0; i < c; ++i) s += p[i];
        const T mu = s / T(c);
        T v = 0;
        for (int64_t i = 0; i < c; ++i) {
            const T d = p[i] - mu;
            v += d * d;
        }
        const T is = T(1) / std::sqrt(v / T(c) + eps);
        mean[r] = mu;
        invstd[r] = is;
        T* q = y.data() + r * c;
        for (int64_t i = 0; i < c; ++i) q[i] = (p[i] - mu) * is * gamma[i] + beta[i];
    }
    return {std::move(y), std::move(mean), std::move(invstd)};
}

template <typename T>
struct LnBwd {
    Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
LnBwd<T> layernorm_bwd(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& mean,
                       const Tensor<T>& invstd) {
    const int64_t c = x.dim(x.rank() - 1);
    const int64_t rows = x.size() / c;
    Tensor<T> dx(x.shape()), dgamma({c}), dbeta({c});
    // dgamma/dbeta reduce over rows: accumulate serially for determinism
    for (int64_t r = 0; r < rows; ++r) {
        const T* pdy = dy.data() + r * c;
        const T* px = x.data() + r * c;
        const T mu = mean[r], is = invstd[r];
        for (int64_t i = 0; i < c; ++i) {
            dgamma[i] += pdy[i] * (px[i] - mu) * is;
            dbeta[i] += pdy[i];
        }
    }
#pragma omp parallel for schedule(static) if (rows > 64)
    for (int64_t r = 0; r < rows; ++r) {
        const T* pdy = dy.data() + r * c;
        const T* px = x.data() + r * c;
        const T mu = mean[r], is = invstd[r];
        T sum_g = 0, sum_gx = 0;
        for (int64_t i = 0; i < c; ++i) {
            const T gi = pdy[i] * gamma[i];
            sum_g += gi;
            sum_gx += gi * (px[i] - mu) * is;
        }
        T* pdx = dx.data() + r * c;
        for (int64_t i = 0; i < c; ++i) {
            const T gi = pdy[i] * gamma[i];
            const T xhat = (px[i] - mu) * is;
            pdx[i] = is * (gi - sum_g / T(c) - xhat * sum_gx / T(c));
        }
    }
    return {std::move(dx), std::move(dgamma), std::move(dbeta)};
}

// ------------------------------------------------------- layout movement ---

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
    const int r = x.rank();
    if (int(perm.size()) != r) throw_dim("permute: rank mismatch");
    Shape os(size_t(r));
    for (int i = 0; i < r; ++i) os[size_t(i)] = x.dim(perm[size_t(i)]);
    Tensor<T> y(os);
    std::vector<int64_t> xstride(size_t(r), 1), ystride(size_t(r), 1);
    for (int i = r - 2; i >= 0; --i) xstride[size_t(i)] = xstride[size_t(i + 1)] * x.dim(i + 1);
    for (int i = r - 2; i >= 0; --i) ystride[size_t(i)] = ystride[size_t(i + 1)] * os[size_t(i + 1)];
    const int64_t n = x.size();
    const T* px = x.data();
    T* py = y.data();
#pragma omp parallel for schedule(static) if (n > 16384)
    for (int64_t yi = 0; yi < n; ++yi) {
        int64_t rem = yi, xi = 0;
        for (int i = 0; i < r; ++i) {
            const int64_t coord = rem / ystride[size_t(i)];
            rem %= ystride[size_t(i)];
            xi += coord * xstride[size_t(perm[size_t(i)])];
        }
        py[yi] = px[xi];
    }
    return y;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int(i);
    return inv;
}

template <typename T>
Tensor<T> concat(const std::vector<const Tensor<T>*>& xs, int axis) {
    if (xs.empty()) throw_contract("concat: no inputs");
    const int r = xs[0]->rank();
    Shape os = xs[0]->shape();
    int64_t total = 0;
    for (const auto* t : xs) {
        if (t->rank() != r) throw_dim("concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis && t->dim(i) != os[size_t(i)]) throw_dim("concat: extent mismatch off-axis");
        total += t->dim(axis);
    }
    os[size_t(axis)] = total;
    Tensor<T> y(os);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= os[size_t(i)];
    for (int i = axis + 1; i < r; ++i) inner *= os[size_t(i)];
    int64_t off = 0;
    for (const auto* t : xs) {
        const int64_t len = t->dim(axis);
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(t->data() + o * len * inner, len * inner, y.data() + (o * total + off) * inner);
        off += len;
    }
    return y;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
    if (axis < 0 || axis >= x.rank()) throw_dim("slice: bad axis");
    if (start < 0 || len <= 0 || start + len > x.dim(axis)) throw_bounds("slice: range out of bounds");
    Shape os = x.shape();
    os[size_t(axis)] = len;
    Tensor<T> y(os);
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const int64_t xlen = x.dim(axis);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(x.data() + (o * xlen + start) * inner, len * inner, y.data() + o * len * inner);
    return y;
}

// scatter-add of dy into a zero tensor of x's shape at [start, start+len) on axis
template <typename T>
void slice_scatter_add(Tensor<T>& dx, const Tensor<T>& dy, int axis, int64_t start) {
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= dx.dim(i);
    for (int i = axis + 1; i < dx.rank(); ++i) inner *= dx.dim(i);
    const int64_t xlen = dx.dim(axis), len = dy.dim(axis);
    for (int64_t o = 0; o < outer; ++o) {
        const T* src = dy.data() + o * len * inner;
        T* dst = dx.data() + (o * xlen + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
}

// ------------------------------------------------------------ reductions ---

template <typename T>
T sum_all(const Tensor<T>& x) {
    T s = 0;
    const T* p = x.data();
    for (int64_t i = 0; i < x.size(); ++i) s += p[i];
    return s;
}

// [B,C,...] -> [C], summed over batch and trailing axes
template <typename T>
Tensor<T> per_channel_sum(const Tensor<T>& x) {
    if (x.rank() < 2) throw_dim("per_channel_sum: rank must be >= 2");
    const int64_t b = x.dim(0), c = x.dim(1);
    int64_t inner = 1;
    for (int i = 2; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> s({c});
    for (int64_t ib = 0; ib < b; ++ib)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* p = x.data() + (ib * c + ic) * inner;
            T acc = 0;
            for (int64_t i = 0; i < inner; ++i) acc += p[i];
            s[ic] += acc;
        }
    return s;
}

}  // namespace kern
}  // namespace mslau
