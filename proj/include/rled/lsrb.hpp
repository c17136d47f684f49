#pragma once

#include <iostream>
#include <mutex>

#include "rled/config.hpp"
#include "rled/ops.hpp"
#include "rled/params.hpp"

namespace rled {

// Shared create-or-bind accessor so the parameter schema is written once.
// In init mode it materializes tensors into the tree (consuming the rng in
// walk order); in bind mode it fetches and shape-checks existing entries.
template <typename T>
struct ParamIo {
    ParamTree<T>& tree;
    Rng* rng = nullptr; // non-null in init mode

    Tensor<T> get(const std::string& name, Shape shape, InitKind kind) {
        if (rng) {
            Tensor<T> t = materialize_param<T>({name, shape, kind}, *rng);
            tree.entries.emplace(name, t);
            return t;
        }
        Tensor<T>& t = tree.at(name);
        if (t.shape() != shape)
            throw ConfigError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(shape));
        t.set_requires_grad(true);
        return t;
    }
};

template <typename T>
struct ConvParams {
    Tensor<T> w, b;
};

template <typename T>
ConvParams<T> conv_params(ParamIo<T>& io, const std::string& prefix, std::int64_t cout,
                          std::int64_t cin, std::int64_t k) {
    return {io.get(prefix + ".w", {cout, cin, k, k}, InitKind::conv_fan_in),
            io.get(prefix + ".b", {cout}, InitKind::zeros)};
}

template <typename T>
ConvParams<T> dwconv_params(ParamIo<T>& io, const std::string& prefix, std::int64_t c,
                            std::int64_t k) {
    return {io.get(prefix + ".w", {c, 1, k, k}, InitKind::conv_fan_in),
            io.get(prefix + ".b", {c}, InitKind::zeros)};
}

// Latent subspace reconstruction: a 3x3 shallow conv, then a learned rank-r
// factorization U^T V of the hw*c feature view.
template <typename T>
struct LsrbParams {
    ConvParams<T> shallow; // 3 -> c, 3x3
    ConvParams<T> u1, u2;  // 1x1: c -> c, c -> r   (coefficient path)
    ConvParams<T> v1, v2;  // 1x1: c -> c, c -> c   (basis path)
    bool has_projection = false;
};

template <typename T>
LsrbParams<T> lsrb_build(ParamIo<T>& io, const ModelConfig& cfg) {
    LsrbParams<T> p;
    p.shallow = conv_params(io, "lsrb.shallow", cfg.c, 3, 3);
    if (cfg.enable_lsrb) {
        p.has_projection = true;
        p.u1 = conv_params(io, "lsrb.u1", cfg.c, cfg.c, 1);
        p.u2 = conv_params(io, "lsrb.u2", cfg.rank, cfg.c, 1);
        p.v1 = conv_params(io, "lsrb.v1", cfg.c, cfg.c, 1);
        p.v2 = conv_params(io, "lsrb.v2", cfg.c, cfg.c, 1);
    }
    return p;
}

template <typename T>
Tensor<T> shallow_extract(const Tensor<T>& x, const LsrbParams<T>& p) {
    check(x.rank() == 3 && x.dim(0) == 3,
          "lsrb input must have 3 channels, got " + shape_str(x.shape()));
    return conv2d(x, p.shallow.w, p.shallow.b, 1, 1);
}

template <typename T>
Tensor<T> low_rank_project(const Tensor<T>& f_shallow, const LsrbParams<T>& p,
                           const ModelConfig& cfg) {
    const std::int64_t c = f_shallow.dim(0), h = f_shallow.dim(1), w = f_shallow.dim(2);
    const std::int64_t hw = h * w;
    const std::int64_t r = cfg.rank;
    check(r >= 1 && r < hw / 4,
          "rank " + std::to_string(r) + " too large for a " + std::to_string(h) + "x" +
              std::to_string(w) + " feature map (need r < hw/4)");
    if (r >= std::min(hw, c)) {
        static std::once_flag warned;
        std::call_once(warned, [&] {
            std::cerr << "[rled] warning: rank " << r << " >= min(hw, c); the rank bound is vacuous\n";
        });
    }

    auto point = [](const Tensor<T>& x, const ConvParams<T>& cp) {
        return gelu(conv2d(x, cp.w, cp.b));
    };
    Tensor<T> f_u = point(point(f_shallow, p.u1), p.u2);        // (r,h,w)
    Tensor<T> u_mat = reshape(f_u, {r, hw});                    // U
    Tensor<T> f_basis;                                          // (hw, c)
    if (cfg.v_source == VSource::f_v) {
        Tensor<T> f_v = point(point(f_shallow, p.v1), p.v2);    // (c,h,w)
        f_basis = permute(reshape(f_v, {c, hw}), {1, 0});
    } else {
        // Paper-literal reading: the basis factor reuses the coefficient
        // path, which requires r == c (enforced by ModelConfig::validate).
        f_basis = permute(u_mat, {1, 0});
    }
    Tensor<T> v_mat = matmul(u_mat, f_basis);                   // (r, c)
    Tensor<T> f_hat = matmul(permute(u_mat, {1, 0}), v_mat);    // (hw, c), rank <= r
    return reshape(permute(f_hat, {1, 0}), {c, h, w});
}

template <typename T>
Tensor<T> lsrb_forward(const Tensor<T>& x, const LsrbParams<T>& p, const ModelConfig& cfg) {
    Tensor<T> f = shallow_extract(x, p);
    if (!p.has_projection) return f;
    return low_rank_project(f, p, cfg);
}

} // namespace rled
