#pragma once

#include <optional>

#include "rled/lsrb.hpp"

namespace rled {

// Per-stage CST configuration, derived from the model config and the stage
// channel width. m channels route to the windowed branch, k to the channel
// branch, m + k = width.
struct CstConfig {
    int m = 0;
    int k = 0;
    int window = 8;
    int shift = 4; // used by the SW-MSA half of each block pair
    int heads_sab = 4;
    int heads_cab = 4;
    int mlp_ratio = 4;
    int sab_depth = 2; // W-MSA / SW-MSA alternate, so depth must stay even
    bool rel_pos_bias = true;
};

inline CstConfig make_cst_config(const ModelConfig& cfg, int width) {
    CstConfig c;
    if (!cfg.enable_sab) {
        c.m = 0;
    } else if (!cfg.enable_cab) {
        c.m = width;
    } else {
        check(width % 2 == 0, "CST width must be even for the channel split");
        c.m = width / 2;
    }
    c.k = width - c.m;
    c.window = cfg.window;
    c.shift = cfg.window / 2;
    c.heads_sab = cfg.heads_sab;
    c.heads_cab = cfg.heads_cab;
    c.mlp_ratio = cfg.mlp_ratio;
    c.rel_pos_bias = cfg.rel_pos_bias;
    return c;
}

// Optional per-forward capture of attention distributions, for inspection.
template <typename T>
struct CstCapture {
    std::vector<Tensor<T>> sab_probs; // (nw, heads, t, t) per block
    std::vector<Tensor<T>> cab_maps;  // (heads, d, d) per layer
};

// ---------------------------------------------------------------------------
// Window partitioning
// ---------------------------------------------------------------------------

namespace detail {

// (h,w,m) -> (nw, window^2, m); cyclic shift applied before partitioning.
template <typename T>
Tensor<T> partition_tokens(const Tensor<T>& x_hwm, int window, int shift) {
    const std::int64_t h = x_hwm.dim(0), w = x_hwm.dim(1), m = x_hwm.dim(2), ws = window;
    check(h % ws == 0 && w % ws == 0,
          "spatial extents " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by window " + std::to_string(window));
    Tensor<T> x = shift > 0 ? roll2(x_hwm, 0, shift, 1, shift) : x_hwm;
    x = reshape(x, {h / ws, ws, w / ws, ws, m});
    x = permute(x, {0, 2, 1, 3, 4});
    return reshape(x, {(h / ws) * (w / ws), ws * ws, m});
}

template <typename T>
Tensor<T> merge_tokens(const Tensor<T>& wins, std::int64_t h, std::int64_t w, int window,
                       int shift) {
    const std::int64_t ws = window, m = wins.dim(2);
    Tensor<T> x = reshape(wins, {h / ws, w / ws, ws, ws, m});
    x = permute(x, {0, 2, 1, 3, 4});
    x = reshape(x, {h, w, m});
    if (shift > 0) x = roll2(x, 0, -shift, 1, -shift);
    return x;
}

// Region ids on the shifted canvas; tokens of one window attend only within
// their region, which blocks pairs separated by the cyclic wrap.
inline std::vector<int> sw_region_ids(std::int64_t h, std::int64_t w, int window, int shift) {
    auto band = [&](std::int64_t i, std::int64_t n) {
        if (i < n - window) return 0;
        if (i < n - shift) return 1;
        return 2;
    };
    std::vector<int> ids(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
            ids[y * w + x] = band(y, h) * 3 + band(x, w);
    return ids;
}

} // namespace detail

// Additive attention mask (nw, t, t): 0 within a region, -1e9 across regions.
template <typename T>
Tensor<T> sw_attention_mask(std::int64_t h, std::int64_t w, int window, int shift) {
    const std::int64_t ws = window, t = ws * ws, nwh = h / ws, nww = w / ws, nw = nwh * nww;
    const auto ids = detail::sw_region_ids(h, w, window, shift);
    std::vector<T> mask(static_cast<std::size_t>(nw * t * t), T(0));
    std::vector<int> wid(static_cast<std::size_t>(t));
    for (std::int64_t wy = 0; wy < nwh; ++wy)
        for (std::int64_t wx = 0; wx < nww; ++wx) {
            for (std::int64_t iy = 0; iy < ws; ++iy)
                for (std::int64_t ix = 0; ix < ws; ++ix)
                    wid[iy * ws + ix] = ids[(wy * ws + iy) * w + (wx * ws + ix)];
            T* mp = mask.data() + (wy * nww + wx) * t * t;
            for (std::int64_t i = 0; i < t; ++i)
                for (std::int64_t j = 0; j < t; ++j)
                    if (wid[i] != wid[j]) mp[i * t + j] = T(-1e9);
        }
    return Tensor<T>::from_data({nw, t, t}, std::move(mask));
}

// Pair-relative position index into a (2w-1)^2 table, precomputed per window.
inline std::vector<std::int64_t> rel_pos_index(int window) {
    const std::int64_t ws = window, t = ws * ws, span = 2 * ws - 1;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(t * t));
    for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = 0; j < t; ++j) {
            const std::int64_t dy = i / ws - j / ws + ws - 1;
            const std::int64_t dx = i % ws - j % ws + ws - 1;
            idx[i * t + j] = dy * span + dx;
        }
    return idx;
}

// Spec-facing partition op on channel-first features.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int window, int shift) {
    check(x.rank() == 3, "window_partition expects m*h*w");
    return detail::partition_tokens(permute(x, {1, 2, 0}), window, shift);
}

template <typename T>
Tensor<T> window_merge(const Tensor<T>& wins, std::int64_t h, std::int64_t w, int window,
                       int shift) {
    return permute(detail::merge_tokens(wins, h, w, window, shift), {2, 0, 1});
}

// ---------------------------------------------------------------------------
// SAB: shifted-window attention branch
// ---------------------------------------------------------------------------

template <typename T>
struct LinearParams {
    Tensor<T> w, b; // (in, out), (out)
};

template <typename T>
LinearParams<T> linear_params(ParamIo<T>& io, const std::string& prefix, std::int64_t in,
                              std::int64_t out) {
    return {io.get(prefix + ".w", {in, out}, InitKind::trunc_normal_002),
            io.get(prefix + ".b", {out}, InitKind::zeros)};
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
    return add(matmul(x, p.w), p.b);
}

template <typename T>
struct SabBlockParams {
    Tensor<T> ln1_g, ln1_b;
    LinearParams<T> wq, wk, wv, wo;
    Tensor<T> relpos; // ((2w-1)^2, heads), absent when disabled
    Tensor<T> ln2_g, ln2_b;
    LinearParams<T> fc1, fc2;
};

template <typename T>
struct SabParams {
    LinearParams<T> embed;
    std::vector<SabBlockParams<T>> blocks;
    LinearParams<T> proj;
};

template <typename T>
SabParams<T> sab_build(ParamIo<T>& io, const std::string& prefix, const CstConfig& cfg) {
    const std::int64_t m = cfg.m;
    SabParams<T> p;
    p.embed = linear_params(io, prefix + ".embed", m, m);
    const std::int64_t span = 2 * cfg.window - 1;
    for (int b = 0; b < cfg.sab_depth; ++b) {
        const std::string bp = prefix + ".block" + std::to_string(b);
        SabBlockParams<T> blk;
        blk.ln1_g = io.get(bp + ".ln1.g", {m}, InitKind::ones);
        blk.ln1_b = io.get(bp + ".ln1.b", {m}, InitKind::zeros);
        blk.wq = linear_params(io, bp + ".q", m, m);
        blk.wk = linear_params(io, bp + ".k", m, m);
        blk.wv = linear_params(io, bp + ".v", m, m);
        blk.wo = linear_params(io, bp + ".o", m, m);
        if (cfg.rel_pos_bias)
            blk.relpos = io.get(bp + ".relpos", {span * span, cfg.heads_sab}, InitKind::zeros);
        blk.ln2_g = io.get(bp + ".ln2.g", {m}, InitKind::ones);
        blk.ln2_b = io.get(bp + ".ln2.b", {m}, InitKind::zeros);
        blk.fc1 = linear_params(io, bp + ".fc1", m, m * cfg.mlp_ratio);
        blk.fc2 = linear_params(io, bp + ".fc2", m * cfg.mlp_ratio, m);
        p.blocks.push_back(std::move(blk));
    }
    p.proj = linear_params(io, prefix + ".proj", m, m);
    return p;
}

// One W-MSA or SW-MSA block over (hw, m) tokens.
template <typename T>
Tensor<T> sab_block(const Tensor<T>& tokens, const SabBlockParams<T>& p, const CstConfig& cfg,
                    std::int64_t h, std::int64_t w, int shift, CstCapture<T>* capture) {
    const std::int64_t m = cfg.m, heads = cfg.heads_sab, d = m / heads;
    const std::int64_t ws = cfg.window, t = ws * ws, nw = (h / ws) * (w / ws);

    Tensor<T> normed = layernorm(tokens, p.ln1_g, p.ln1_b, 1);
    auto heads_of = [&](const Tensor<T>& lin_out) {
        Tensor<T> wins = detail::partition_tokens(reshape(lin_out, {h, w, m}), cfg.window, shift);
        return permute(reshape(wins, {nw, t, heads, d}), {0, 2, 1, 3}); // (nw,H,t,d)
    };
    Tensor<T> q = heads_of(linear(normed, p.wq));
    Tensor<T> k = heads_of(linear(normed, p.wk));
    Tensor<T> v = heads_of(linear(normed, p.wv));

    Tensor<T> scores = mul_scalar(matmul(q, permute(k, {0, 1, 3, 2})),
                                  static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
    if (p.relpos.defined()) {
        Tensor<T> bias = embedding_rows(p.relpos, rel_pos_index(cfg.window)); // (t*t, H)
        bias = reshape(permute(reshape(bias, {t, t, heads}), {2, 0, 1}), {1, heads, t, t});
        scores = add(scores, bias);
    }
    if (shift > 0) {
        Tensor<T> mask = reshape(sw_attention_mask<T>(h, w, cfg.window, shift), {nw, 1, t, t});
        scores = add(scores, mask);
    }
    Tensor<T> probs = softmax(scores, 3);
    if (capture) capture->sab_probs.push_back(probs);

    Tensor<T> ctx = matmul(probs, v);                              // (nw,H,t,d)
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {nw, t, m});
    Tensor<T> merged = detail::merge_tokens(ctx, h, w, cfg.window, shift);
    Tensor<T> attn_out = linear(reshape(merged, {h * w, m}), p.wo);
    Tensor<T> x = add(tokens, attn_out);

    Tensor<T> z = layernorm(x, p.ln2_g, p.ln2_b, 1);
    z = linear(gelu(linear(z, p.fc1)), p.fc2);
    return add(x, z);
}

// Alternating W-MSA / SW-MSA blocks over the m-channel feature map.
template <typename T>
Tensor<T> sab_forward(const Tensor<T>& f_s, const SabParams<T>& p, const CstConfig& cfg,
                      CstCapture<T>* capture = nullptr) {
    if (p.blocks.size() % 2 != 0)
        throw ConfigError("SAB depth must be even (W-MSA/SW-MSA pairs), got " +
                          std::to_string(p.blocks.size()));
    const std::int64_t m = f_s.dim(0), h = f_s.dim(1), w = f_s.dim(2);
    check(m == cfg.m, "SAB channel count mismatch");
    Tensor<T> tokens = reshape(permute(f_s, {1, 2, 0}), {h * w, m});
    tokens = linear(tokens, p.embed);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const int shift = (b % 2 == 1) ? cfg.shift : 0;
        tokens = sab_block(tokens, p.blocks[b], cfg, h, w, shift, capture);
    }
    tokens = linear(tokens, p.proj);
    return permute(reshape(tokens, {h, w, m}), {2, 0, 1});
}

// ---------------------------------------------------------------------------
// CAB: crossed-channel attention branch
// ---------------------------------------------------------------------------

template <typename T>
struct CabParams {
    ConvParams<T> qkv_point; // 1x1: k -> 3k
    ConvParams<T> qkv_depth; // dw 3x3 over 3k
    Tensor<T> log_alpha;     // (heads,1,1), temperature stored in log space
    ConvParams<T> out_depth; // dw 3x3 over k
    Tensor<T> ff_ln_g, ff_ln_b;
    ConvParams<T> ff_point; // 1x1: k -> k
    ConvParams<T> ff_depth; // dw 3x3 over k
};

template <typename T>
CabParams<T> cab_build(ParamIo<T>& io, const std::string& prefix, const CstConfig& cfg) {
    const std::int64_t k = cfg.k;
    CabParams<T> p;
    p.qkv_point = conv_params(io, prefix + ".qkv_point", 3 * k, k, 1);
    p.qkv_depth = dwconv_params(io, prefix + ".qkv_depth", 3 * k, 3);
    p.log_alpha = io.get(prefix + ".log_alpha", {cfg.heads_cab, 1, 1}, InitKind::zeros);
    p.out_depth = dwconv_params(io, prefix + ".out_depth", k, 3);
    p.ff_ln_g = io.get(prefix + ".ff_ln.g", {k}, InitKind::ones);
    p.ff_ln_b = io.get(prefix + ".ff_ln.b", {k}, InitKind::zeros);
    p.ff_point = conv_params(io, prefix + ".ff_point", k, k, 1);
    p.ff_depth = dwconv_params(io, prefix + ".ff_depth", k, 3);
    return p;
}

template <typename T>
Tensor<T> cab_attention(const Tensor<T>& f_c, const CabParams<T>& p, const CstConfig& cfg,
                        CstCapture<T>* capture = nullptr) {
    const std::int64_t k = f_c.dim(0), h = f_c.dim(1), w = f_c.dim(2), hw = h * w;
    check(k == cfg.k, "CAB channel count mismatch");
    const std::int64_t heads = cfg.heads_cab, d = k / heads;

    Tensor<T> qkv = dwconv2d(conv2d(f_c, p.qkv_point.w, p.qkv_point.b), p.qkv_depth.w,
                             p.qkv_depth.b, 1);
    Tensor<T> q = reshape(slice(qkv, 0, 0, k), {heads, d, hw});
    Tensor<T> key = reshape(slice(qkv, 0, k, k), {heads, d, hw});
    Tensor<T> v = reshape(slice(qkv, 0, 2 * k, k), {heads, d, hw});

    Tensor<T> scores = matmul(q, permute(key, {0, 2, 1})); // (heads, d, d)
    Tensor<T> alpha = exp(p.log_alpha);                    // strictly positive
    Tensor<T> g = softmax(div(scores, alpha), 2);          // channel attention map
    if (capture) capture->cab_maps.push_back(g);

    Tensor<T> ctx = reshape(matmul(g, v), {k, h, w});
    return add(dwconv2d(ctx, p.out_depth.w, p.out_depth.b, 1), f_c);
}

// Gated depthwise feed-forward, residual around the attention output.
template <typename T>
Tensor<T> cab_feedforward(const Tensor<T>& f_ca, const CabParams<T>& p) {
    Tensor<T> z = layernorm(f_ca, p.ff_ln_g, p.ff_ln_b, 0);
    Tensor<T> f_fd = dwconv2d(conv2d(z, p.ff_point.w, p.ff_point.b), p.ff_depth.w, p.ff_depth.b, 1);
    return add(mul(gelu(f_fd), f_fd), f_ca);
}

template <typename T>
Tensor<T> cab_forward(const Tensor<T>& f_c, const CabParams<T>& p, const CstConfig& cfg,
                      CstCapture<T>* capture = nullptr) {
    return cab_feedforward(cab_attention(f_c, p, cfg, capture), p);
}

// ---------------------------------------------------------------------------
// CST layer: channel split -> parallel branches -> concat
// ---------------------------------------------------------------------------

template <typename T>
struct CstParams {
    std::optional<SabParams<T>> sab;
    std::optional<CabParams<T>> cab;
};

template <typename T>
CstParams<T> cst_build(ParamIo<T>& io, const std::string& prefix, const CstConfig& cfg) {
    CstParams<T> p;
    if (cfg.m > 0) p.sab = sab_build(io, prefix + ".sab", cfg);
    if (cfg.k > 0) p.cab = cab_build(io, prefix + ".cab", cfg);
    return p;
}

template <typename T>
Tensor<T> cst_forward(const Tensor<T>& f, const CstParams<T>& p, const CstConfig& cfg,
                      CstCapture<T>* capture = nullptr) {
    check(f.rank() == 3 && f.dim(0) == cfg.m + cfg.k,
          "CST input channels " + std::to_string(f.dim(0)) + " != m+k = " +
              std::to_string(cfg.m + cfg.k));
    if (cfg.m == 0) return cab_forward(f, *p.cab, cfg, capture);
    if (cfg.k == 0) return sab_forward(f, *p.sab, cfg, capture);
    Tensor<T> f_s = slice(f, 0, 0, cfg.m);
    Tensor<T> f_c = slice(f, 0, cfg.m, cfg.k);
    return concat<T>({sab_forward(f_s, *p.sab, cfg, capture),
                      cab_forward(f_c, *p.cab, cfg, capture)}, 0);
}

} // namespace rled
