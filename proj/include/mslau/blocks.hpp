#pragma once

#include <memory>

#include "mslau/attention.hpp"
#include "mslau/autodiff.hpp"
#include "mslau/rng.hpp"

// Encoder building blocks: patch embedding, Local Feature Extraction (LFE)
// and Global Feature Extraction (GFE).

namespace mslau {

template <typename T>
ad::Var<T> init_trunc_normal(Shape s, Rng& rng, double stddev = 0.02) {
    Tensor<T> t(std::move(s));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = T(rng.next_trunc_normal(stddev));
    return ad::param(std::move(t));
}

template <typename T>
ad::Var<T> init_zeros(Shape s) {
    return ad::param(Tensor<T>(std::move(s)));
}

template <typename T>
ad::Var<T> init_ones(Shape s) {
    return ad::param(Tensor<T>::full(std::move(s), T(1)));
}

template <typename T>
struct LnParams {
    ad::Var<T> gamma, beta;
};

template <typename T>
LnParams<T> ln_init(int64_t c) {
    return {init_ones<T>({c}), init_zeros<T>({c})};
}

template <typename T>
struct BnParams {
    ad::Var<T> gamma, beta;
    std::shared_ptr<Tensor<T>> running_mean, running_var;
};

template <typename T>
BnParams<T> bn_init(int64_t c) {
    return {init_ones<T>({c}), init_zeros<T>({c}), std::make_shared<Tensor<T>>(Shape{c}),
            std::make_shared<Tensor<T>>(Tensor<T>::full({c}, T(1)))};
}

template <typename T>
ad::Var<T> bn_forward(const ad::Var<T>& x, const BnParams<T>& p, bool train) {
    return ad::batchnorm2d(x, p.gamma, p.beta, p.running_mean, p.running_var, train);
}

// Layer normalization over the channel axis of a feature map, applied per
// spatial position.
template <typename T>
ad::Var<T> ln_over_channels(const ad::Var<T>& x_map, const LnParams<T>& p) {
    const int64_t h = x_map.dim(2), w = x_map.dim(3);
    ad::Var<T> toks = ad::map_to_tokens(x_map);
    return ad::tokens_to_map(ad::layernorm(toks, p.gamma, p.beta), h, w);
}

// ---------------------------------------------------------- patch embedding

template <typename T>
struct PatchEmbedParams {
    ad::Var<T> w, b;  // conv k == stride
    LnParams<T> ln;
    int64_t stride = 0;
};

template <typename T>
PatchEmbedParams<T> patch_embed_init(int64_t cin, int64_t cout, int64_t stride, Rng& rng) {
    PatchEmbedParams<T> p;
    p.w = init_trunc_normal<T>({cout, cin, stride, stride}, rng);
    p.b = init_zeros<T>({cout});
    p.ln = ln_init<T>(cout);
    p.stride = stride;
    return p;
}

// Strided downsampling conv followed by layer normalization over channels.
template <typename T>
ad::Var<T> patch_embed_forward(const ad::Var<T>& x, const PatchEmbedParams<T>& p) {
    if (x.dim(2) % p.stride != 0 || x.dim(3) % p.stride != 0)
        throw_dim("patch_embed: spatial extents " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                  " not divisible by stride " + std::to_string(p.stride));
    ad::Var<T> y = ad::conv2d(x, p.w, p.b, p.stride, 0, 1);
    return ln_over_channels(y, p.ln);
}

// ---------------------------------------------------------------- LFE block

template <typename T>
struct LfeParams {
    ad::Var<T> pos_w, pos_b;      // depthwise 3x3
    BnParams<T> bn1;
    ad::Var<T> conv1_w, conv1_b;  // 1x1 C->C
    ad::Var<T> dw_w, dw_b;        // depthwise 5x5
    ad::Var<T> conv2_w, conv2_b;  // 1x1 C->C
    BnParams<T> bn2;
    ad::Var<T> ffn1_w, ffn1_b;    // 1x1 C->4C
    ad::Var<T> ffn2_w, ffn2_b;    // 1x1 4C->C
};

template <typename T>
LfeParams<T> lfe_init(int64_t c, Rng& rng) {
    LfeParams<T> p;
    p.pos_w = init_trunc_normal<T>({c, 1, 3, 3}, rng);
    p.pos_b = init_zeros<T>({c});
    p.bn1 = bn_init<T>(c);
    p.conv1_w = init_trunc_normal<T>({c, c, 1, 1}, rng);
    p.conv1_b = init_zeros<T>({c});
    p.dw_w = init_trunc_normal<T>({c, 1, 5, 5}, rng);
    p.dw_b = init_zeros<T>({c});
    p.conv2_w = init_trunc_normal<T>({c, c, 1, 1}, rng);
    p.conv2_b = init_zeros<T>({c});
    p.bn2 = bn_init<T>(c);
    p.ffn1_w = init_trunc_normal<T>({4 * c, c, 1, 1}, rng);
    p.ffn1_b = init_zeros<T>({4 * c});
    p.ffn2_w = init_trunc_normal<T>({c, 4 * c, 1, 1}, rng);
    p.ffn2_b = init_zeros<T>({c});
    return p;
}

// z_hat  = dw3(z) + z
// z_hat' = 1x1(dw5(1x1(BN(z_hat)))) + z_hat
// out    = FFN(BN(z_hat')) + z_hat',  FFN = 1x1 expand x4, GELU, 1x1 restore
template <typename T>
ad::Var<T> lfe_forward(const ad::Var<T>& x, const LfeParams<T>& p, bool train) {
    const int64_t c = x.dim(1);
    ad::Var<T> zh = ad::add(ad::conv2d(x, p.pos_w, p.pos_b, 1, 1, c), x);
    ad::Var<T> t = bn_forward(zh, p.bn1, train);
    t = ad::conv2d(t, p.conv1_w, p.conv1_b, 1, 0, 1);
    t = ad::conv2d(t, p.dw_w, p.dw_b, 1, 2, c);
    t = ad::conv2d(t, p.conv2_w, p.conv2_b, 1, 0, 1);
    ad::Var<T> zh2 = ad::add(t, zh);
    ad::Var<T> u = bn_forward(zh2, p.bn2, train);
    u = ad::conv2d(u, p.ffn1_w, p.ffn1_b, 1, 0, 1);
    u = ad::gelu(u);
    u = ad::conv2d(u, p.ffn2_w, p.ffn2_b, 1, 0, 1);
    return ad::add(u, zh2);
}

// ---------------------------------------------------------------- GFE block

template <typename T>
struct GfeParams {
    ad::Var<T> pos_w, pos_b;  // depthwise 3x3, applied in map form
    LnParams<T> ln1;
    MslaParams<T> msla;
    LnParams<T> ln2;
    ad::Var<T> ffn1_w, ffn1_b;  // linear C->4C
    ad::Var<T> ffn2_w, ffn2_b;  // linear 4C->C
};

template <typename T>
GfeParams<T> gfe_init(int64_t c, int64_t head_width, const std::vector<int64_t>& kernels, Rng& rng) {
    GfeParams<T> p;
    p.pos_w = init_trunc_normal<T>({c, 1, 3, 3}, rng);
    p.pos_b = init_zeros<T>({c});
    p.ln1 = ln_init<T>(c);
    p.msla = msla_init<T>(c, head_width, kernels, rng);
    p.ln2 = ln_init<T>(c);
    p.ffn1_w = init_trunc_normal<T>({c, 4 * c}, rng);
    p.ffn1_b = init_zeros<T>({4 * c});
    p.ffn2_w = init_trunc_normal<T>({4 * c, c}, rng);
    p.ffn2_b = init_zeros<T>({c});
    return p;
}

// z_hat  = dw3(z) + z            (dwconv in map form)
// z_hat' = MSLA(LN(z_hat)) + z_hat
// out    = FFN(LN(z_hat')) + z_hat',  token-wise FFN with expansion 4
template <typename T>
ad::Var<T> gfe_forward_hw(const ad::Var<T>& tokens, int64_t h, int64_t w, const GfeParams<T>& p,
                          MslaCapture<T>* capture = nullptr) {
    const int64_t c = tokens.dim(2);
    ad::Var<T> zmap = ad::tokens_to_map(tokens, h, w);
    ad::Var<T> pos = ad::conv2d(zmap, p.pos_w, p.pos_b, 1, 1, c);
    ad::Var<T> zh = ad::add(ad::map_to_tokens(pos), tokens);
    ad::Var<T> att = msla_forward_hw(ad::layernorm(zh, p.ln1.gamma, p.ln1.beta), h, w, p.msla, capture);
    ad::Var<T> zh2 = ad::add(att, zh);
    ad::Var<T> f = ad::layernorm(zh2, p.ln2.gamma, p.ln2.beta);
    f = ad::linear(f, p.ffn1_w, p.ffn1_b);
    f = ad::gelu(f);
    f = ad::linear(f, p.ffn2_w, p.ffn2_b);
    return ad::add(f, zh2);
}

template <typename T>
ad::Var<T> gfe_forward(const ad::Var<T>& tokens, const GfeParams<T>& p, MslaCapture<T>* capture = nullptr) {
    const int64_t n = tokens.dim(1);
    const int64_t side = int64_t(std::llround(std::sqrt(double(n))));
    if (side * side != n) throw_dim("gfe: token count " + std::to_string(n) + " is not a perfect square");
    return gfe_forward_hw(tokens, side, side, p, capture);
}

}  // namespace mslau
