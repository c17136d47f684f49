#pragma once

#include "rled/cst.hpp"

namespace rled {

template <typename T>
struct StageParams {
    std::vector<CstParams<T>> layers;
    CstConfig cfg;
};

template <typename T>
struct NetworkParams {
    LsrbParams<T> lsrb;
    std::vector<StageParams<T>> encoders; // one per level; the last is the bottleneck
    std::vector<ConvParams<T>> downs;     // strided 3x3, between encoder levels
    std::vector<ConvParams<T>> ups;       // 1x1 to 4*(w/2) channels, then pixel shuffle
    std::vector<ConvParams<T>> fuses;     // 1x1 after skip concatenation
    std::vector<StageParams<T>> decoders; // decoders[i] is level (levels-2-i)
    StageParams<T> frb;
    ConvParams<T> final_conv;             // 3x3 to the 3-channel residual image
};

// Encoder widths walk c, 2c, 4c, 8c; decoders mirror but stop at 2c so the
// full-resolution deep features keep 2c channels.
inline int enc_width(const ModelConfig& cfg, int level) { return cfg.c << level; }
inline int dec_width(const ModelConfig& cfg, int level) { return cfg.c << std::max(level, 1); }

template <typename T>
StageParams<T> stage_build(ParamIo<T>& io, const std::string& prefix, const ModelConfig& mc,
                           int width, int n_layers) {
    StageParams<T> s;
    s.cfg = make_cst_config(mc, width);
    for (int i = 0; i < n_layers; ++i)
        s.layers.push_back(cst_build(io, prefix + ".cst" + std::to_string(i), s.cfg));
    return s;
}

template <typename T>
NetworkParams<T> network_build(ParamIo<T>& io, const ModelConfig& cfg) {
    cfg.validate();
    NetworkParams<T> net;
    net.lsrb = lsrb_build(io, cfg);
    for (int l = 0; l < cfg.levels; ++l)
        net.encoders.push_back(
            stage_build(io, "cstnet.enc" + std::to_string(l), cfg, enc_width(cfg, l), cfg.n_enc));
    for (int l = 0; l < cfg.levels - 1; ++l) {
        net.downs.push_back(conv_params(io, "cstnet.down" + std::to_string(l),
                                        enc_width(cfg, l + 1), enc_width(cfg, l), 3));
        const int up_in = (l == cfg.levels - 2) ? enc_width(cfg, cfg.levels - 1)
                                                : dec_width(cfg, l + 1);
        net.ups.push_back(
            conv_params(io, "cstnet.up" + std::to_string(l), 2 * up_in, up_in, 1));
        net.fuses.push_back(conv_params(io, "cstnet.fuse" + std::to_string(l), dec_width(cfg, l),
                                        up_in / 2 + enc_width(cfg, l), 1));
    }
    for (int l = cfg.levels - 2; l >= 0; --l)
        net.decoders.push_back(
            stage_build(io, "cstnet.dec" + std::to_string(l), cfg, dec_width(cfg, l), cfg.n_enc));
    net.frb = stage_build(io, "frb", cfg, dec_width(cfg, 0), cfg.n_frb);
    net.final_conv = conv_params(io, "frb.final", 3, dec_width(cfg, 0), 3);
    return net;
}

template <typename T>
Tensor<T> stage_forward(const Tensor<T>& x, const StageParams<T>& s,
                        CstCapture<T>* capture = nullptr) {
    Tensor<T> f = x;
    for (const auto& layer : s.layers) f = cst_forward(f, layer, s.cfg, capture);
    return f;
}

// (c,h,w) -> (2c,h,w): four-level U with skip concatenation and 1x1 fusion.
template <typename T>
Tensor<T> cstnet_forward(const Tensor<T>& f_lsrb, const NetworkParams<T>& net,
                         const ModelConfig& cfg, CstCapture<T>* capture = nullptr) {
    const std::int64_t h = f_lsrb.dim(1), w = f_lsrb.dim(2);
    const std::int64_t mult = cfg.pad_multiple();
    check(h % mult == 0 && w % mult == 0,
          "input " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by window*2^(levels-1) = " + std::to_string(mult));
    std::vector<Tensor<T>> skips;
    Tensor<T> x = f_lsrb;
    for (int l = 0; l < cfg.levels; ++l) {
        x = stage_forward(x, net.encoders[l], capture);
        if (l < cfg.levels - 1) {
            skips.push_back(x);
            x = conv2d(x, net.downs[l].w, net.downs[l].b, 2, 1);
        }
    }
    for (int l = cfg.levels - 2; l >= 0; --l) {
        x = pixel_shuffle(conv2d(x, net.ups[l].w, net.ups[l].b), 2);
        x = concat<T>({x, skips[l]}, 0);
        x = conv2d(x, net.fuses[l].w, net.fuses[l].b);
        x = stage_forward(x, net.decoders[cfg.levels - 2 - l], capture);
    }
    return x;
}

// (2c,h,w) -> (3,h,w): trailing CST layers plus the residual projection.
template <typename T>
Tensor<T> frb_forward(const Tensor<T>& f_cstnet, const NetworkParams<T>& net,
                      CstCapture<T>* capture = nullptr) {
    Tensor<T> f = stage_forward(f_cstnet, net.frb, capture);
    return conv2d(f, net.final_conv.w, net.final_conv.b, 1, 1);
}

// Full model: y = x + FRB(CSTNet(LSRB(x))). Output is intentionally left
// unclamped; metric computation clamps separately.
template <typename T>
Tensor<T> rlednet_forward(const Tensor<T>& x, const NetworkParams<T>& net, const ModelConfig& cfg,
                          CstCapture<T>* capture = nullptr) {
    check(x.rank() == 3 && x.dim(0) == 3, "network input must be 3*h*w");
    Tensor<T> f = lsrb_forward(x, net.lsrb, cfg);
    Tensor<T> deep = cstnet_forward(f, net, cfg, capture);
    Tensor<T> residual = frb_forward(deep, net, capture);
    return add(x, residual);
}

template <typename T>
struct Model {
    ModelConfig cfg;
    ParamTree<T> tree;
    NetworkParams<T> net;

    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        Model m;
        m.cfg = cfg;
        Rng rng(mix_seed(seed, "init"));
        ParamIo<T> io{m.tree, &rng};
        m.net = network_build(io, cfg);
        return m;
    }

    static Model bind(const ModelConfig& cfg, ParamTree<T> tree) {
        Model m;
        m.cfg = cfg;
        m.tree = std::move(tree);
        ParamIo<T> io{m.tree, nullptr};
        m.net = network_build(io, cfg);
        return m;
    }

    Tensor<T> forward(const Tensor<T>& x, CstCapture<T>* capture = nullptr) const {
        return rlednet_forward(x, net, cfg, capture);
    }

    // Mirror-pads to the divisibility requirement, runs, and crops back, so
    // arbitrary image sizes work end to end.
    Tensor<T> forward_padded(const Tensor<T>& x) const {
        const std::int64_t h = x.dim(1), w = x.dim(2), mult = cfg.pad_multiple();
        const std::int64_t ph = (mult - h % mult) % mult, pw = (mult - w % mult) % mult;
        if (ph == 0 && pw == 0) return forward(x);
        Tensor<T> padded = reflect_pad2(x, 0, ph, 0, pw);
        return crop2(forward(padded), 0, 0, h, w);
    }
};

template <typename T>
ParamTree<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    return Model<T>::init(cfg, seed).tree;
}

} // namespace rled
