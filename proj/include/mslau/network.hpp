#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mslau/blocks.hpp"

// Four-stage hybrid encoder, top-down aggregation decoder, and whole-model
// assembly from a ModelConfig.

namespace mslau {

struct ModelConfig {
    std::array<int64_t, 4> depths{4, 8, 11, 5};
    std::array<int64_t, 4> widths{64, 128, 256, 512};
    std::string pattern = "LLGG";  // L = LFE stage (map form), G = GFE stage (token form)
    std::vector<int64_t> kernel_set{3, 5, 7, 9};
    int64_t head_width = 32;
    int64_t num_classes = 9;
    int64_t in_h = 224, in_w = 224;

    void validate() const;
    static ModelConfig preset(const std::string& name);
    // canonical key=value form, parseable by parse_config
    std::string canonical_text() const;
};

template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, ad::Var<T>>> params;
    std::vector<std::pair<std::string, std::shared_ptr<Tensor<T>>>> buffers;

    void add(const std::string& name, const ad::Var<T>& v) { params.emplace_back(name, v); }
    void add_buffer(const std::string& name, const std::shared_ptr<Tensor<T>>& t) { buffers.emplace_back(name, t); }

    int64_t total_param_count() const {
        int64_t n = 0;
        for (const auto& [name, v] : params) n += v.val().size();
        return n;
    }
    void zero_grads() {
        for (auto& [name, v] : params) const_cast<ad::Var<T>&>(v).zero_grad();
    }
};

template <typename T>
struct EncoderOutputs {
    std::array<ad::Var<T>, 4> stage;  // maps at H/4, H/8, H/16, H/32
};

template <typename T>
struct StageBlock {
    char kind = 'L';
    LfeParams<T> lfe;
    GfeParams<T> gfe;
};

template <typename T>
struct DecoderParams {
    // align[i]: chain of channel-halving 1x1 convs for encoder stage i+2
    std::array<std::vector<std::pair<ad::Var<T>, ad::Var<T>>>, 3> align;
    struct Refine {
        ad::Var<T> c1w, c1b, c2w, c2b;  // two 3x3 convs, C1 -> C1
    };
    std::array<Refine, 4> refine;
    ad::Var<T> head_w, head_b;  // 3x3, 4*C1 -> K
};

// Identifies one attention site for heatmap extraction.
struct AttnSite {
    int stage = 3;   // 1-based
    int block = -1;  // -1 = last block of the stage
};

template <typename T>
class Model {
  public:
    ModelConfig cfg;
    std::array<PatchEmbedParams<T>, 4> patch;
    std::array<std::vector<StageBlock<T>>, 4> stages;
    DecoderParams<T> dec;
    ParamRegistry<T> reg;
    bool train_mode = true;

    void set_train(bool t) { train_mode = t; }

    EncoderOutputs<T> encoder_forward(const ad::Var<T>& x, MslaCapture<T>* capture = nullptr,
                                      const AttnSite* site = nullptr) const {
        if (x.val().rank() != 4 || x.dim(1) != 3) throw_dim("encoder: input must be [B,3,H,W]");
        if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0)
            throw_dim("encoder: spatial extents must be divisible by 32, got " + std::to_string(x.dim(2)) + "x" +
                      std::to_string(x.dim(3)));
        EncoderOutputs<T> out;
        ad::Var<T> cur = x;
        for (int s = 0; s < 4; ++s) {
            cur = patch_embed_forward(cur, patch[size_t(s)]);
            const int64_t h = cur.dim(2), w = cur.dim(3);
            if (cfg.pattern[size_t(s)] == 'L') {
                for (const auto& blk : stages[size_t(s)]) cur = lfe_forward(cur, blk.lfe, train_mode);
            } else {
                ad::Var<T> toks = ad::map_to_tokens(cur);
                for (size_t bi = 0; bi < stages[size_t(s)].size(); ++bi) {
                    MslaCapture<T>* cap = nullptr;
                    if (capture && site && site->stage == s + 1) {
                        const int want = site->block < 0 ? int(stages[size_t(s)].size()) - 1 : site->block;
                        if (int(bi) == want) cap = capture;
                    }
                    toks = gfe_forward_hw(toks, h, w, stages[size_t(s)][bi].gfe, cap);
                }
                cur = ad::tokens_to_map(toks, h, w);
            }
            out.stage[size_t(s)] = cur;
        }
        return out;
    }

    ad::Var<T> decoder_forward(const EncoderOutputs<T>& enc) const {
        // (a) align stages 2..4 to the stage-1 grid: [1x1 conv halving channels -> 2x bilinear upsample] chains
        std::array<ad::Var<T>, 4> aligned;
        aligned[0] = enc.stage[0];
        for (int m = 1; m < 4; ++m) {
            ad::Var<T> cur = enc.stage[size_t(m)];
            for (const auto& [w, b] : dec.align[size_t(m - 1)]) {
                cur = ad::conv2d(cur, w, b, 1, 0, 1);
                cur = ad::bilinear_upsample2x(cur);
            }
            aligned[size_t(m)] = cur;
        }
        // (b) top-down additive aggregation
        std::array<ad::Var<T>, 4> agg;
        agg[3] = aligned[3];
        agg[2] = ad::add(aligned[2], agg[3]);
        agg[1] = ad::add(aligned[1], agg[2]);
        agg[0] = aligned[0];
        // (c) per-branch refinement: 3x3 conv, GELU, 3x3 conv, 2x upsample
        std::vector<ad::Var<T>> refined;
        refined.reserve(4);
        for (int i = 0; i < 4; ++i) {
            const auto& r = dec.refine[size_t(i)];
            ad::Var<T> t = ad::conv2d(agg[size_t(i)], r.c1w, r.c1b, 1, 1, 1);
            t = ad::gelu(t);
            t = ad::conv2d(t, r.c2w, r.c2b, 1, 1, 1);
            refined.push_back(ad::bilinear_upsample2x(t));
        }
        // (d) channel concat, (e) 3x3 conv to K classes and final 2x upsample
        ad::Var<T> cat = ad::concat(refined, 1);
        ad::Var<T> logits = ad::conv2d(cat, dec.head_w, dec.head_b, 1, 1, 1);
        return ad::bilinear_upsample2x(logits);
    }

    ad::Var<T> forward(const ad::Var<T>& x, MslaCapture<T>* capture = nullptr, const AttnSite* site = nullptr) const {
        return decoder_forward(encoder_forward(x, capture, site));
    }
};

template <typename T>
void register_bn(ParamRegistry<T>& reg, const std::string& prefix, const BnParams<T>& p) {
    reg.add(prefix + ".g", p.gamma);
    reg.add(prefix + ".b", p.beta);
    reg.add_buffer(prefix + ".running_mean", p.running_mean);
    reg.add_buffer(prefix + ".running_var", p.running_var);
}

template <typename T>
void register_ln(ParamRegistry<T>& reg, const std::string& prefix, const LnParams<T>& p) {
    reg.add(prefix + ".g", p.gamma);
    reg.add(prefix + ".b", p.beta);
}

template <typename T>
void register_msla(ParamRegistry<T>& reg, const std::string& prefix, const MslaParams<T>& p) {
    for (size_t i = 0; i < p.dw_w.size(); ++i) {
        const std::string bi = std::to_string(i);
        reg.add(prefix + ".dw." + bi + ".w", p.dw_w[i]);
        for (size_t h = 0; h < p.wq[i].size(); ++h) {
            const std::string hi = std::to_string(h);
            reg.add(prefix + ".wq." + bi + "." + hi, p.wq[i][h]);
            reg.add(prefix + ".wk." + bi + "." + hi, p.wk[i][h]);
            reg.add(prefix + ".wv." + bi + "." + hi, p.wv[i][h]);
        }
        reg.add(prefix + ".wo." + bi, p.wo[i]);
        reg.add(prefix + ".wscale." + bi, p.wscale[i]);
    }
    reg.add(prefix + ".fuse.w", p.fuse_w);
    reg.add(prefix + ".fuse.b", p.fuse_b);
}

template <typename T>
void register_lfe(ParamRegistry<T>& reg, const std::string& prefix, const LfeParams<T>& p) {
    reg.add(prefix + ".pos.w", p.pos_w);
    reg.add(prefix + ".pos.b", p.pos_b);
    register_bn(reg, prefix + ".bn1", p.bn1);
    reg.add(prefix + ".conv1.w", p.conv1_w);
    reg.add(prefix + ".conv1.b", p.conv1_b);
    reg.add(prefix + ".dw.w", p.dw_w);
    reg.add(prefix + ".dw.b", p.dw_b);
    reg.add(prefix + ".conv2.w", p.conv2_w);
    reg.add(prefix + ".conv2.b", p.conv2_b);
    register_bn(reg, prefix + ".bn2", p.bn2);
    reg.add(prefix + ".ffn.fc1.w", p.ffn1_w);
    reg.add(prefix + ".ffn.fc1.b", p.ffn1_b);
    reg.add(prefix + ".ffn.fc2.w", p.ffn2_w);
    reg.add(prefix + ".ffn.fc2.b", p.ffn2_b);
}

template <typename T>
void register_gfe(ParamRegistry<T>& reg, const std::string& prefix, const GfeParams<T>& p) {
    reg.add(prefix + ".pos.w", p.pos_w);
    reg.add(prefix + ".pos.b", p.pos_b);
    register_ln(reg, prefix + ".ln1", p.ln1);
    register_msla(reg, prefix + ".msla", p.msla);
    register_ln(reg, prefix + ".ln2", p.ln2);
    reg.add(prefix + ".ffn.fc1.w", p.ffn1_w);
    reg.add(prefix + ".ffn.fc1.b", p.ffn1_b);
    reg.add(prefix + ".ffn.fc2.w", p.ffn2_w);
    reg.add(prefix + ".ffn.fc2.b", p.ffn2_b);
}

// Deterministic construction: one PRNG consumed in registration order.
template <typename T>
Model<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.cfg = cfg;
    Rng rng(seed);

    for (int s = 0; s < 4; ++s) {
        const std::string sp = "enc.stage" + std::to_string(s + 1);
        const int64_t cin = s == 0 ? 3 : cfg.widths[size_t(s - 1)];
        const int64_t cout = cfg.widths[size_t(s)];
        const int64_t stride = s == 0 ? 4 : 2;
        m.patch[size_t(s)] = patch_embed_init<T>(cin, cout, stride, rng);
        m.reg.add(sp + ".patch.conv.w", m.patch[size_t(s)].w);
        m.reg.add(sp + ".patch.conv.b", m.patch[size_t(s)].b);
        register_ln(m.reg, sp + ".patch.ln", m.patch[size_t(s)].ln);

        for (int64_t bi = 0; bi < cfg.depths[size_t(s)]; ++bi) {
            StageBlock<T> blk;
            blk.kind = cfg.pattern[size_t(s)];
            const std::string bp = sp + ".block" + std::to_string(bi);
            if (blk.kind == 'L') {
                blk.lfe = lfe_init<T>(cout, rng);
                register_lfe(m.reg, bp, blk.lfe);
            } else {
                blk.gfe = gfe_init<T>(cout, cfg.head_width, cfg.kernel_set, rng);
                register_gfe(m.reg, bp, blk.gfe);
            }
            m.stages[size_t(s)].push_back(std::move(blk));
        }
    }

    // decoder
    const int64_t c1 = cfg.widths[0];
    for (int mi = 1; mi < 4; ++mi) {
        int64_t c = cfg.widths[size_t(mi)];
        for (int j = 0; j < mi; ++j) {
            ad::Var<T> w = init_trunc_normal<T>({c / 2, c, 1, 1}, rng);
            ad::Var<T> b = init_zeros<T>({c / 2});
            const std::string ap = "dec.align" + std::to_string(mi + 1) + "." + std::to_string(j);
            m.reg.add(ap + ".w", w);
            m.reg.add(ap + ".b", b);
            m.dec.align[size_t(mi - 1)].emplace_back(w, b);
            c /= 2;
        }
    }
    for (int i = 0; i < 4; ++i) {
        auto& r = m.dec.refine[size_t(i)];
        r.c1w = init_trunc_normal<T>({c1, c1, 3, 3}, rng);
        r.c1b = init_zeros<T>({c1});
        r.c2w = init_trunc_normal<T>({c1, c1, 3, 3}, rng);
        r.c2b = init_zeros<T>({c1});
        const std::string rp = "dec.refine" + std::to_string(i + 1);
        m.reg.add(rp + ".conv1.w", r.c1w);
        m.reg.add(rp + ".conv1.b", r.c1b);
        m.reg.add(rp + ".conv2.w", r.c2w);
        m.reg.add(rp + ".conv2.b", r.c2b);
    }
    m.dec.head_w = init_trunc_normal<T>({cfg.num_classes, 4 * c1, 3, 3}, rng);
    m.dec.head_b = init_zeros<T>({cfg.num_classes});
    m.reg.add("dec.head.w", m.dec.head_w);
    m.reg.add("dec.head.b", m.dec.head_b);
    return m;
}

}  // namespace mslau
