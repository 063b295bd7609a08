#pragma once

#include <vector>

#include "mslau/autodiff.hpp"
#include "mslau/kernels.hpp"
#include "mslau/rng.hpp"

// Efficient (linear) attention and the Multi-Scale Linear Attention operator.
//
// Efficient attention applies a row softmax to Q (per token, over features)
// and a column softmax to K (per feature, over tokens). The implicit
// attention matrix phi_q(Q) phi_k(K)^T is row-stochastic, and associativity
// lets the product be evaluated as phi_q(Q) (phi_k(K)^T V) in O(N).

namespace mslau {

// ------------------------------------------------------------- raw (f32/f64)

// O(N) association order: phi_q(Q) * (phi_k(K)^T * V)
template <typename T>
Tensor<T> efficient_attention_linear(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v))
        throw_dim("efficient_attention: Q,K,V must share an NxD shape");
    Tensor<T> pq = kern::softmax_fwd(q, 1);  // per row over d
    Tensor<T> pk = kern::softmax_fwd(k, 0);  // per column over N
    Tensor<T> ctx = kern::matmul_tn(pk, v);  // [d,d]
    return kern::matmul_nn(pq, ctx);
}

// O(N^2) association order: (phi_q(Q) * phi_k(K)^T) * V
template <typename T>
Tensor<T> efficient_attention_quadratic(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v))
        throw_dim("efficient_attention: Q,K,V must share an NxD shape");
    Tensor<T> pq = kern::softmax_fwd(q, 1);
    Tensor<T> pk = kern::softmax_fwd(k, 0);
    Tensor<T> att = kern::matmul_nt(pq, pk);  // [N,N]
    return kern::matmul_nn(att, v);
}

// Softmax attention baseline (materializes the NxN score matrix).
template <typename T>
Tensor<T> softmax_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    const int64_t d = q.dim(1);
    Tensor<T> scores = kern::matmul_nt(q, k);
    const T inv = T(1) / std::sqrt(T(d));
    for (int64_t i = 0; i < scores.size(); ++i) scores[i] *= inv;
    Tensor<T> att = kern::softmax_fwd(scores, 1);
    return kern::matmul_nn(att, v);
}

// One explicit row of the implicit attention matrix; diagnostics only.
template <typename T>
struct AttentionMap {
    int64_t query = 0;
    Tensor<T> scores;  // [N], nonnegative, sums to 1

    Tensor<T> spatial(int64_t h, int64_t w) const {
        if (h * w != scores.size()) throw_dim("attention map: H*W does not match token count");
        return scores.reshaped({h, w});
    }
};

template <typename T>
AttentionMap<T> attention_map(const Tensor<T>& q, const Tensor<T>& k, int64_t query) {
    if (q.rank() != 2 || !q.same_shape(k)) throw_dim("attention_map: Q,K must share an NxD shape");
    const int64_t n = q.dim(0), d = q.dim(1);
    if (query < 0 || query >= n)
        throw_bounds("attention_map: query index " + std::to_string(query) + " out of range [0," + std::to_string(n) +
                     ")");
    Tensor<T> qrow({1, d});
    std::copy_n(q.data() + query * d, d, qrow.data());
    Tensor<T> pq = kern::softmax_fwd(qrow, 1);
    Tensor<T> pk = kern::softmax_fwd(k, 0);
    Tensor<T> row = kern::matmul_nt(pq, pk);  // [1,N]
    return {query, row.reshaped({n})};
}

// ------------------------------------------------------ autodiff operators

// Batched efficient attention on [G,N,d] stacks.
template <typename T>
ad::Var<T> efficient_attention(const ad::Var<T>& q, const ad::Var<T>& k, const ad::Var<T>& v) {
    if (q.val().rank() != 3) throw_dim("efficient_attention: expected [G,N,d]");
    if (!q.val().same_shape(k.val()) || !q.val().same_shape(v.val()))
        throw_dim("efficient_attention: Q,K,V shapes differ");
    ad::Var<T> pq = ad::softmax(q, 2);
    ad::Var<T> pk = ad::softmax(k, 1);
    ad::Var<T> ctx = ad::bmm(ad::transpose_last2(pk), v);  // [G,d,d]
    return ad::bmm(pq, ctx);
}

// ------------------------------------------------------------------- MSLA

// Captured per-branch/per-head Q,K values for heatmap extraction.
template <typename T>
struct MslaCapture {
    std::vector<std::vector<Tensor<T>>> q, k;  // [branch][head], each [B*N, d] viewed as [B,N,d]
    int64_t batch = 0, tokens = 0;
};

template <typename T>
struct MslaParams {
    int64_t channels = 0;    // C
    int64_t head_width = 0;  // effective d
    std::vector<int64_t> kernels;

    std::vector<ad::Var<T>> dw_w;                      // per branch, depthwise [C/b,1,k,k]
    std::vector<std::vector<ad::Var<T>>> wq, wk, wv;   // [branch][head], [C/b,d]
    std::vector<ad::Var<T>> wo;                        // per branch, [C/b,C/b]
    std::vector<ad::Var<T>> wscale;                    // per branch fusion scalar
    ad::Var<T> fuse_w;                                 // [C,C,1,1]
    ad::Var<T> fuse_b;                                 // [C]

    int64_t branches() const { return int64_t(kernels.size()); }
    int64_t branch_channels() const { return channels / branches(); }
    int64_t heads() const { return branch_channels() / head_width; }
};

// Effective head width: the configured width, shrunk to the branch channel
// count when that is smaller (narrow stages of wide-head configs).
inline int64_t effective_head_width(int64_t branch_channels, int64_t head_width) {
    return std::min<int64_t>(head_width, branch_channels);
}

template <typename T>
MslaParams<T> msla_init(int64_t channels, int64_t head_width, std::vector<int64_t> kernels, Rng& rng) {
    MslaParams<T> p;
    const int64_t b = int64_t(kernels.size());
    if (b != 2 && b != 4) throw_config("msla: branch count must be 2 or 4, got " + std::to_string(b));
    if (channels % b != 0)
        throw_config("msla: channels " + std::to_string(channels) + " not divisible by branch count " +
                     std::to_string(b));
    const int64_t cb = channels / b;
    const int64_t d = effective_head_width(cb, head_width);
    if (cb % d != 0)
        throw_config("msla: branch channels " + std::to_string(cb) + " not divisible by head width " +
                     std::to_string(d));
    p.channels = channels;
    p.head_width = d;
    p.kernels = std::move(kernels);
    const int64_t heads = cb / d;
    auto tn = [&rng](Shape s) {
        Tensor<T> t(std::move(s));
        for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.next_trunc_normal(0.02));
        return ad::param(std::move(t));
    };
    for (int64_t i = 0; i < b; ++i) {
        const int64_t k = p.kernels[size_t(i)];
        if (k < 1 || k % 2 == 0) throw_config("msla: kernel sizes must be odd, got " + std::to_string(k));
        p.dw_w.push_back(tn({cb, 1, k, k}));
        std::vector<ad::Var<T>> q, kk, v;
        for (int64_t h = 0; h < heads; ++h) {
            q.push_back(tn({cb, d}));
            kk.push_back(tn({cb, d}));
            v.push_back(tn({cb, d}));
        }
        p.wq.push_back(std::move(q));
        p.wk.push_back(std::move(kk));
        p.wv.push_back(std::move(v));
        p.wo.push_back(tn({cb, cb}));
        p.wscale.push_back(ad::param(Tensor<T>::scalar(T(1))));
    }
    p.fuse_w = tn({channels, channels, 1, 1});
    p.fuse_b = ad::param(Tensor<T>({channels}));
    return p;
}

// Branch extraction: ReLU(dwconv_k(X_i) + X_i) on the channel slice of each
// branch; kernels keep spatial extent via pad (k-1)/2.
template <typename T>
std::vector<ad::Var<T>> multi_scale_extract(const ad::Var<T>& x_map, const MslaParams<T>& p) {
    const int64_t c = x_map.dim(1);
    if (c != p.channels) throw_config("multi_scale_extract: channel count mismatch");
    const int64_t b = p.branches(), cb = p.branch_channels();
    std::vector<ad::Var<T>> out;
    out.reserve(size_t(b));
    for (int64_t i = 0; i < b; ++i) {
        ad::Var<T> xi = ad::slice(x_map, 1, i * cb, cb);
        const int64_t k = p.kernels[size_t(i)];
        ad::Var<T> conv = ad::conv2d(xi, p.dw_w[size_t(i)], 1, (k - 1) / 2, cb);
        out.push_back(ad::relu(ad::add(conv, xi)));
    }
    return out;
}

// Full MSLA pipeline on tokens [B,N,C] whose map form is HxW (N == H*W).
template <typename T>
ad::Var<T> msla_forward_hw(const ad::Var<T>& tokens, int64_t h, int64_t w, const MslaParams<T>& p,
                           MslaCapture<T>* capture = nullptr) {
    if (tokens.val().rank() != 3) throw_dim("msla: tokens must be [B,N,C]");
    const int64_t bsz = tokens.dim(0), n = tokens.dim(1), c = tokens.dim(2);
    if (n != h * w) throw_dim("msla: token count does not match map extent");
    if (c != p.channels) throw_config("msla: channel count mismatch");
    const int64_t nb = p.branches(), cb = p.branch_channels(), d = p.head_width;
    const int64_t heads = cb / d;

    if (capture) {
        capture->q.assign(size_t(nb), {});
        capture->k.assign(size_t(nb), {});
        capture->batch = bsz;
        capture->tokens = n;
    }

    ad::Var<T> x_map = ad::tokens_to_map(tokens, h, w);
    std::vector<ad::Var<T>> branches = multi_scale_extract(x_map, p);

    std::vector<ad::Var<T>> fused_branches;
    fused_branches.reserve(size_t(nb));
    for (int64_t i = 0; i < nb; ++i) {
        ad::Var<T> toks = ad::map_to_tokens(branches[size_t(i)]);     // [B,N,cb]
        ad::Var<T> flat = ad::reshape(toks, {bsz * n, cb});
        std::vector<ad::Var<T>> head_outs;
        head_outs.reserve(size_t(heads));
        for (int64_t hh = 0; hh < heads; ++hh) {
            ad::Var<T> q = ad::reshape(ad::matmul(flat, p.wq[size_t(i)][size_t(hh)]), {bsz, n, d});
            ad::Var<T> k = ad::reshape(ad::matmul(flat, p.wk[size_t(i)][size_t(hh)]), {bsz, n, d});
            ad::Var<T> v = ad::reshape(ad::matmul(flat, p.wv[size_t(i)][size_t(hh)]), {bsz, n, d});
            if (capture) {
                capture->q[size_t(i)].push_back(q.val());
                capture->k[size_t(i)].push_back(k.val());
            }
            head_outs.push_back(efficient_attention(q, k, v));
        }
        ad::Var<T> cat = heads == 1 ? head_outs[0] : ad::concat(head_outs, 2);  // [B,N,cb]
        ad::Var<T> proj = ad::reshape(ad::matmul(ad::reshape(cat, {bsz * n, cb}), p.wo[size_t(i)]), {bsz, n, cb});
        ad::Var<T> omap = ad::tokens_to_map(proj, h, w);
        fused_branches.push_back(ad::smul(omap, p.wscale[size_t(i)]));
    }
    ad::Var<T> cat_map = ad::concat(fused_branches, 1);                      // [B,C,H,W]
    ad::Var<T> fused = ad::conv2d(cat_map, p.fuse_w, p.fuse_b, 1, 0, 1);
    return ad::map_to_tokens(fused);
}

// Square-grid convenience wrapper; N must be a perfect square.
template <typename T>
ad::Var<T> msla_forward(const ad::Var<T>& tokens, const MslaParams<T>& p, MslaCapture<T>* capture = nullptr) {
    const int64_t n = tokens.dim(1);
    const int64_t side = int64_t(std::llround(std::sqrt(double(n))));
    if (side * side != n) throw_dim("msla: token count " + std::to_string(n) + " is not a perfect square");
    return msla_forward_hw(tokens, side, side, p, capture);
}

}  // namespace mslau
