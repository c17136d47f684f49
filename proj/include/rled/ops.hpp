#pragma once

#include <cmath>
#include <cstring>

#include "rled/tensor.hpp"

// The closed differentiable operation set. Every op is a pure function of
// immutable inputs; backward closures recompute cheap intermediates rather
// than saving large buffers.

namespace rled {
namespace detail {

// C += A(p,q) @ B(q,s)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t p, std::int64_t q, std::int64_t s) {
    for (std::int64_t i = 0; i < p; ++i) {
        T* crow = c + i * s;
        for (std::int64_t k = 0; k < q; ++k) {
            const T av = a[i * q + k];
            if (av == T(0)) continue;
            const T* brow = b + k * s;
            for (std::int64_t j = 0; j < s; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A(p,n) @ B(q,n)^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t p, std::int64_t n, std::int64_t q) {
    for (std::int64_t i = 0; i < p; ++i) {
        const T* arow = a + i * n;
        for (std::int64_t j = 0; j < q; ++j) {
            const T* brow = b + j * n;
            T acc = T(0);
            for (std::int64_t k = 0; k < n; ++k) acc += arow[k] * brow[k];
            c[i * q + j] += acc;
        }
    }
}

// C += A(n,p)^T @ B(n,s)
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t n, std::int64_t p, std::int64_t s) {
    for (std::int64_t k = 0; k < n; ++k) {
        const T* arow = a + k * p;
        const T* brow = b + k * s;
        for (std::int64_t i = 0; i < p; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * s;
            for (std::int64_t j = 0; j < s; ++j) crow[j] += av * brow[j];
        }
    }
}

struct BroadcastPlan {
    Shape out_shape;
    std::vector<std::int64_t> a_strides; // stride 0 on broadcast dims
    std::vector<std::int64_t> b_strides;
    bool same_shape = false;
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    if (a == b) {
        plan.out_shape = a;
        plan.same_shape = true;
        return plan;
    }
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    plan.out_shape.assign(r, 1);
    for (int d = 0; d < r; ++d) {
        const std::int64_t da = d < r - ra ? 1 : a[d - (r - ra)];
        const std::int64_t db = d < r - rb ? 1 : b[d - (r - rb)];
        check(da == db || da == 1 || db == 1,
              "shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
        plan.out_shape[d] = std::max(da, db);
    }
    auto strides_for = [&](const Shape& s, int rs) {
        auto st = row_major_strides(s);
        std::vector<std::int64_t> out(r, 0);
        for (int d = 0; d < rs; ++d)
            out[r - rs + d] = (s[d] == 1 && plan.out_shape[r - rs + d] != 1) ? 0 : st[d];
        return out;
    };
    plan.a_strides = strides_for(a, ra);
    plan.b_strides = strides_for(b, rb);
    return plan;
}

// Odometer walk over `shape`, invoking fn(out_flat, a_flat, b_flat).
template <typename Fn>
void broadcast_walk(const Shape& shape, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, Fn&& fn) {
    const int r = static_cast<int>(shape.size());
    const std::int64_t n = shape_numel(shape);
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t fa = 0, fb = 0;
    for (std::int64_t out = 0; out < n; ++out) {
        fn(out, fa, fb);
        for (int d = r - 1; d >= 0; --d) {
            ++idx[d];
            fa += sa[d];
            fb += sb[d];
            if (idx[d] < shape[d]) break;
            fa -= sa[d] * shape[d];
            fb -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

// Reduce `grad` (laid out as out_shape) back onto an operand's shape.
template <typename T>
std::vector<T> reduce_to_operand(const std::vector<T>& grad, const Shape& out_shape,
                                 const std::vector<std::int64_t>& strides, std::int64_t operand_numel) {
    std::vector<T> out(static_cast<std::size_t>(operand_numel), T(0));
    std::vector<std::int64_t> dummy(out_shape.size(), 0);
    broadcast_walk(out_shape, strides, dummy,
                   [&](std::int64_t o, std::int64_t f, std::int64_t) { out[f] += grad[o]; });
    return out;
}

// outer/len/inner decomposition for one axis.
struct AxisSplit {
    std::int64_t outer, len, inner;
};

inline AxisSplit axis_split(const Shape& s, int axis) {
    check(axis >= 0 && axis < static_cast<int>(s.size()), "axis out of range");
    AxisSplit r{1, s[axis], 1};
    for (int d = 0; d < axis; ++d) r.outer *= s[d];
    for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) r.inner *= s[d];
    return r;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with right-aligned broadcasting.
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
    auto plan = detail::broadcast_plan(a.shape(), b.shape());
    const std::int64_t n = shape_numel(plan.out_shape);
    std::vector<T> out(static_cast<std::size_t>(n));
    const auto& av = a.vals();
    const auto& bv = b.vals();
    if (plan.same_shape) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        detail::broadcast_walk(plan.out_shape, plan.a_strides, plan.b_strides,
                               [&](std::int64_t o, std::int64_t fa, std::int64_t fb) {
                                   out[o] = fwd(av[fa], bv[fb]);
                               });
    }
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(plan.out_shape, std::move(out), {a, b},
        [an, bn, plan, bwd](typename Tensor<T>::Node& self) {
            const auto& g = self.grad;
            std::vector<T> ga, gb;
            const bool need_a = an->requires_grad, need_b = bn->requires_grad;
            if (need_a) ga.assign(an->value.size(), T(0));
            if (need_b) gb.assign(bn->value.size(), T(0));
            auto apply = [&](std::int64_t o, std::int64_t fa, std::int64_t fb) {
                T da, db;
                bwd(an->value[fa], bn->value[fb], g[o], da, db);
                if (need_a) ga[fa] += da;
                if (need_b) gb[fb] += db;
            };
            if (plan.same_shape) {
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i) apply(i, i, i);
            } else {
                detail::broadcast_walk(plan.out_shape, plan.a_strides, plan.b_strides, apply);
            }
            if (need_a) an->accumulate(ga);
            if (need_b) bn->accumulate(gb);
        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x + y; },
                     [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x - y; },
                     [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x * y; },
                     [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(a, b, [](T x, T y) { return x / y; },
                     [](T x, T y, T g, T& da, T& db) {
                         da = g / y;
                         db = -g * x / (y * y);
                     });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    std::vector<T> out(x.vals().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x.vals()[i]);
    auto xn = x.node();
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
        [xn, bwd](typename Tensor<T>::Node& self) {
            std::vector<T> gx(xn->value.size());
            for (std::size_t i = 0; i < gx.size(); ++i)
                gx[i] = bwd(xn->value[i], self.value[i], self.grad[i]);
            xn->accumulate(gx);
        });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return -v; }, [](T, T, T g) { return -g; });
}

// |x|, with subgradient 0 at x == 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::abs(v); },
                    [](T v, T, T g) { return v > T(0) ? g : (v < T(0) ? -g : T(0)); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y, T g) { return g * y; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return unary_op(x, [](T v) { return std::sqrt(v); },
                    [](T, T y, T g) { return g / (T(2) * y); });
}

// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = 0.7071067811865476;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return unary_op(x,
        [=](T v) {
            const double d = static_cast<double>(v);
            return static_cast<T>(d * 0.5 * (1.0 + std::erf(d * inv_sqrt2)));
        },
        [=](T v, T, T g) {
            const double d = static_cast<double>(v);
            const double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
            return static_cast<T>(static_cast<double>(g) * (cdf + d * pdf));
        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return unary_op(x, [=](T v) { return v + s; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
    return unary_op(x, [=](T v) { return v * s; }, [=](T, T, T g) { return g * s; });
}

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator+(const Tensor<T>& a, T s) { return add_scalar(a, s); }

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.vals()) acc += v;
    auto xn = x.node();
    return Tensor<T>::make_op({1}, {acc}, {x}, [xn](typename Tensor<T>::Node& self) {
        std::vector<T> gx(xn->value.size(), self.grad[0]);
        xn->accumulate(gx);
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Matrix products: rank-2, or batched with identical leading dims.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check(a.rank() >= 2 && a.rank() == b.rank(),
          "matmul requires equal-rank operands of rank >= 2, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
    const int r = a.rank();
    for (int d = 0; d < r - 2; ++d)
        check(a.dim(d) == b.dim(d), "matmul batch dims differ: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    const std::int64_t p = a.dim(r - 2), q = a.dim(r - 1), s = b.dim(r - 1);
    check(b.dim(r - 2) == q, "matmul inner dims differ: " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    Shape out_shape(a.shape());
    out_shape[r - 2] = p;
    out_shape[r - 1] = s;
    std::int64_t batch = 1;
    for (int d = 0; d < r - 2; ++d) batch *= a.dim(d);

    std::vector<T> out(static_cast<std::size_t>(batch * p * s), T(0));
    for (std::int64_t n = 0; n < batch; ++n)
        detail::gemm_nn(a.vals().data() + n * p * q, b.vals().data() + n * q * s,
                        out.data() + n * p * s, p, q, s);

    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), {a, b},
        [an, bn, batch, p, q, s](typename Tensor<T>::Node& self) {
            if (an->requires_grad) {
                std::vector<T> ga(an->value.size(), T(0));
                for (std::int64_t n = 0; n < batch; ++n)
                    detail::gemm_nt(self.grad.data() + n * p * s, bn->value.data() + n * q * s,
                                    ga.data() + n * p * q, p, s, q);
                an->accumulate(ga);
            }
            if (bn->requires_grad) {
                std::vector<T> gb(bn->value.size(), T(0));
                for (std::int64_t n = 0; n < batch; ++n)
                    detail::gemm_tn(an->value.data() + n * p * q, self.grad.data() + n * p * s,
                                    gb.data() + n * q * s, p, q, s);
                bn->accumulate(gb);
            }
        });
}

// ---------------------------------------------------------------------------
// Layout transforms.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    check(shape_numel(new_shape) == x.numel(),
          "reshape element count mismatch: " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
    auto xn = x.node();
    return Tensor<T>::make_op(std::move(new_shape), x.vals(), {x},
        [xn](typename Tensor<T>::Node& self) { xn->accumulate(self.grad); });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes) {
    const int r = x.rank();
    check(static_cast<int>(axes.size()) == r, "permute axes rank mismatch");
    std::vector<bool> used(r, false);
    Shape out_shape(r);
    std::vector<std::int64_t> src_strides(r);
    const auto in_strides = row_major_strides(x.shape());
    for (int d = 0; d < r; ++d) {
        check(axes[d] >= 0 && axes[d] < r && !used[axes[d]], "invalid permutation");
        used[axes[d]] = true;
        out_shape[d] = x.dim(axes[d]);
        src_strides[d] = in_strides[axes[d]];
    }
    std::vector<T> out(x.vals().size());
    std::vector<std::int64_t> dummy(r, 0);
    detail::broadcast_walk(out_shape, src_strides, dummy,
                           [&](std::int64_t o, std::int64_t f, std::int64_t) { out[o] = x.vals()[f]; });
    auto xn = x.node();
    return Tensor<T>::make_op(out_shape, std::move(out), {x},
        [xn, out_shape, src_strides](typename Tensor<T>::Node& self) {
            std::vector<T> gx(xn->value.size(), T(0));
            std::vector<std::int64_t> dummy2(out_shape.size(), 0);
            detail::broadcast_walk(out_shape, src_strides, dummy2,
                                   [&](std::int64_t o, std::int64_t f, std::int64_t) {
                                       gx[f] += self.grad[o];
                                   });
            xn->accumulate(gx);
        });
}

// out[i...] = in[map_d(i_d)...] where each dimension carries an index map.
// Covers cyclic shift, mirror padding, and cropping; backward scatter-adds
// through the maps, which makes repeated source reads accumulate correctly.
template <typename T>
Tensor<T> dim_map(const Tensor<T>& x, Shape out_shape,
                  std::vector<std::vector<std::int64_t>> maps) {
    const int r = x.rank();
    check(static_cast<int>(out_shape.size()) == r && static_cast<int>(maps.size()) == r,
          "dim_map rank mismatch");
    const auto in_strides = row_major_strides(x.shape());
    const std::int64_t n = shape_numel(out_shape);
    std::vector<T> out(static_cast<std::size_t>(n));
    // Walk output coordinates, translating through the per-dim maps.
    std::vector<std::int64_t> idx(r, 0);
    auto src_flat = [&]() {
        std::int64_t f = 0;
        for (int d = 0; d < r; ++d) f += maps[d][idx[d]] * in_strides[d];
        return f;
    };
    for (std::int64_t o = 0; o < n; ++o) {
        out[o] = x.vals()[src_flat()];
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    auto xn = x.node();
    return Tensor<T>::make_op(out_shape, std::move(out), {x},
        [xn, out_shape, maps, in_strides, r](typename Tensor<T>::Node& self) {
            std::vector<T> gx(xn->value.size(), T(0));
            std::vector<std::int64_t> idx2(r, 0);
            const std::int64_t n2 = shape_numel(out_shape);
            for (std::int64_t o = 0; o < n2; ++o) {
                std::int64_t f = 0;
                for (int d = 0; d < r; ++d) f += maps[d][idx2[d]] * in_strides[d];
                gx[f] += self.grad[o];
                for (int d = r - 1; d >= 0; --d) {
                    if (++idx2[d] < out_shape[d]) break;
                    idx2[d] = 0;
                }
            }
            xn->accumulate(gx);
        });
}

inline std::vector<std::int64_t> identity_map(std::int64_t n) {
    std::vector<std::int64_t> m(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) m[i] = i;
    return m;
}

// Cyclic shift along two axes; shift is the amount added to source indices.
template <typename T>
Tensor<T> roll2(const Tensor<T>& x, int axis_a, std::int64_t shift_a, int axis_b,
                std::int64_t shift_b) {
    std::vector<std::vector<std::int64_t>> maps(x.rank());
    for (int d = 0; d < x.rank(); ++d) maps[d] = identity_map(x.dim(d));
    auto roll_map = [](std::int64_t n, std::int64_t sh) {
        std::vector<std::int64_t> m(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) m[i] = ((i + sh) % n + n) % n;
        return m;
    };
    maps[axis_a] = roll_map(x.dim(axis_a), shift_a);
    maps[axis_b] = roll_map(x.dim(axis_b), shift_b);
    return dim_map(x, x.shape(), std::move(maps));
}

// Mirror index for symmetric padding; tiles for pads larger than the extent.
inline std::int64_t mirror_index(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * n - 2;
    std::int64_t m = ((i % period) + period) % period;
    return m < n ? m : period - m;
}

// Reflect-pad the last two axes of a rank-3 (c,h,w) tensor.
template <typename T>
Tensor<T> reflect_pad2(const Tensor<T>& x, std::int64_t top, std::int64_t bottom,
                       std::int64_t left, std::int64_t right) {
    check(x.rank() == 3, "reflect_pad2 expects c*h*w");
    const std::int64_t h = x.dim(1), w = x.dim(2);
    Shape out_shape{x.dim(0), h + top + bottom, w + left + right};
    std::vector<std::vector<std::int64_t>> maps(3);
    maps[0] = identity_map(x.dim(0));
    maps[1].resize(static_cast<std::size_t>(out_shape[1]));
    for (std::int64_t i = 0; i < out_shape[1]; ++i) maps[1][i] = mirror_index(i - top, h);
    maps[2].resize(static_cast<std::size_t>(out_shape[2]));
    for (std::int64_t i = 0; i < out_shape[2]; ++i) maps[2][i] = mirror_index(i - left, w);
    return dim_map(x, std::move(out_shape), std::move(maps));
}

template <typename T>
Tensor<T> crop2(const Tensor<T>& x, std::int64_t top, std::int64_t left, std::int64_t out_h,
                std::int64_t out_w) {
    check(x.rank() == 3, "crop2 expects c*h*w");
    check(top + out_h <= x.dim(1) && left + out_w <= x.dim(2) && top >= 0 && left >= 0,
          "crop window out of bounds");
    Shape out_shape{x.dim(0), out_h, out_w};
    std::vector<std::vector<std::int64_t>> maps(3);
    maps[0] = identity_map(x.dim(0));
    maps[1].resize(static_cast<std::size_t>(out_h));
    for (std::int64_t i = 0; i < out_h; ++i) maps[1][i] = top + i;
    maps[2].resize(static_cast<std::size_t>(out_w));
    for (std::int64_t i = 0; i < out_w; ++i) maps[2][i] = left + i;
    return dim_map(x, std::move(out_shape), std::move(maps));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t len) {
    check(axis >= 0 && axis < x.rank(), "slice axis out of range");
    check(start >= 0 && len > 0 && start + len <= x.dim(axis), "slice range out of bounds");
    auto sp = detail::axis_split(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::vector<T> out(static_cast<std::size_t>(sp.outer * len * sp.inner));
    for (std::int64_t o = 0; o < sp.outer; ++o)
        std::memcpy(out.data() + o * len * sp.inner,
                    x.vals().data() + (o * sp.len + start) * sp.inner,
                    sizeof(T) * static_cast<std::size_t>(len * sp.inner));
    auto xn = x.node();
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), {x},
        [xn, sp, start, len](typename Tensor<T>::Node& self) {
            std::vector<T> gx(xn->value.size(), T(0));
            for (std::int64_t o = 0; o < sp.outer; ++o) {
                const T* src = self.grad.data() + o * len * sp.inner;
                T* dst = gx.data() + (o * sp.len + start) * sp.inner;
                for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
            }
            xn->accumulate(gx);
        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    check(!parts.empty(), "concat of zero tensors");
    if (parts.size() == 1) return reshape(parts[0], parts[0].shape());
    const auto& first = parts[0];
    Shape out_shape = first.shape();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check(p.rank() == first.rank(), "concat rank mismatch");
        for (int d = 0; d < first.rank(); ++d)
            check(d == axis || p.dim(d) == first.dim(d), "concat extent mismatch off-axis");
        total += p.dim(axis);
    }
    out_shape[axis] = total;
    auto sp = detail::axis_split(out_shape, axis);
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const std::int64_t len = p.dim(axis);
        for (std::int64_t o = 0; o < sp.outer; ++o)
            std::memcpy(out.data() + (o * sp.len + offset) * sp.inner,
                        p.vals().data() + o * len * sp.inner,
                        sizeof(T) * static_cast<std::size_t>(len * sp.inner));
        offset += len;
    }
    std::vector<std::shared_ptr<typename Tensor<T>::Node>> nodes;
    std::vector<std::int64_t> lens;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        lens.push_back(p.dim(axis));
    }
    return Tensor<T>::make_op(std::move(out_shape), std::move(out), parts,
        [nodes, lens, sp](typename Tensor<T>::Node& self) {
            std::int64_t off = 0;
            for (std::size_t i = 0; i < nodes.size(); ++i) {
                if (nodes[i]->requires_grad) {
                    std::vector<T> g(nodes[i]->value.size());
                    for (std::int64_t o = 0; o < sp.outer; ++o)
                        std::memcpy(g.data() + o * lens[i] * sp.inner,
                                    self.grad.data() + (o * sp.len + off) * sp.inner,
                                    sizeof(T) * static_cast<std::size_t>(lens[i] * sp.inner));
                    nodes[i]->accumulate(g);
                }
                off += lens[i];
            }
        });
}

// (r*r*c, h, w) -> (c, r*h, r*w)
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int factor) {
    check(x.rank() == 3, "pixel_shuffle expects c*h*w");
    const std::int64_t r = factor, c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
    check(r >= 1 && c_in % (r * r) == 0, "pixel_shuffle channel count not divisible by factor^2");
    const std::int64_t c = c_in / (r * r);
    Shape out_shape{c, h * r, w * r};
    std::vector<T> out(x.vals().size());
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t y = 0; y < h * r; ++y)
            for (std::int64_t xx = 0; xx < w * r; ++xx) {
                const std::int64_t src_c = ci * r * r + (y % r) * r + (xx % r);
                out[(ci * h * r + y) * w * r + xx] = x.vals()[(src_c * h + y / r) * w + xx / r];
            }
    auto xn = x.node();
    return Tensor<T>::make_op(out_shape, std::move(out), {x},
        [xn, c, h, w, r](typename Tensor<T>::Node& self) {
            std::vector<T> gx(xn->value.size());
            for (std::int64_t ci = 0; ci < c; ++ci)
                for (std::int64_t y = 0; y < h * r; ++y)
                    for (std::int64_t xx = 0; xx < w * r; ++xx) {
                        const std::int64_t src_c = ci * r * r + (y % r) * r + (xx % r);
                        gx[(src_c * h + y / r) * w + xx / r] =
                            self.grad[(ci * h * r + y) * w * r + xx];
                    }
            xn->accumulate(gx);
        });
}

// Row gather from a (n, d) table; indices are fixed (not differentiable).
template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, std::vector<std::int64_t> idx) {
    check(table.rank() == 2, "embedding_rows expects a rank-2 table");
    const std::int64_t n = table.dim(0), d = table.dim(1);
    std::vector<T> out(idx.size() * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        check(idx[i] >= 0 && idx[i] < n, "embedding index out of range");
        std::memcpy(out.data() + i * d, table.vals().data() + idx[i] * d,
                    sizeof(T) * static_cast<std::size_t>(d));
    }
    auto tn = table.node();
    return Tensor<T>::make_op({static_cast<std::int64_t>(idx.size()), d}, std::move(out), {table},
        [tn, idx, d](typename Tensor<T>::Node& self) {
            std::vector<T> g(tn->value.size(), T(0));
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::int64_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
            tn->accumulate(g);
        });
}

// ---------------------------------------------------------------------------
// Normalization and activation over one axis.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    auto sp = detail::axis_split(x.shape(), axis);
    std::vector<T> out(x.vals().size());
    const auto& xv = x.vals();
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::int64_t base = o * sp.len * sp.inner + i;
            T mx = xv[base];
            for (std::int64_t j = 1; j < sp.len; ++j)
                mx = std::max(mx, xv[base + j * sp.inner]);
            T total = T(0);
            for (std::int64_t j = 0; j < sp.len; ++j) {
                const T e = std::exp(xv[base + j * sp.inner] - mx);
                out[base + j * sp.inner] = e;
                total += e;
            }
            for (std::int64_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= total;
        }
    auto xn = x.node();
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
        [xn, sp](typename Tensor<T>::Node& self) {
            std::vector<T> gx(xn->value.size());
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const std::int64_t base = o * sp.len * sp.inner + i;
                    T dot = T(0);
                    for (std::int64_t j = 0; j < sp.len; ++j)
                        dot += self.grad[base + j * sp.inner] * self.value[base + j * sp.inner];
                    for (std::int64_t j = 0; j < sp.len; ++j) {
                        const std::int64_t k = base + j * sp.inner;
                        gx[k] = self.value[k] * (self.grad[k] - dot);
                    }
                }
            xn->accumulate(gx);
        });
}

// Normalizes along `axis`; gamma/beta are rank-1 of that axis extent.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int axis,
                    T eps = T(1e-5)) {
    auto sp = detail::axis_split(x.shape(), axis);
    check(gamma.rank() == 1 && gamma.dim(0) == sp.len, "layernorm gamma extent mismatch");
    check(beta.rank() == 1 && beta.dim(0) == sp.len, "layernorm beta extent mismatch");
    std::vector<T> out(x.vals().size());
    const auto& xv = x.vals();
    const T inv_len = T(1) / static_cast<T>(sp.len);
    for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::int64_t base = o * sp.len * sp.inner + i;
            T mean = T(0);
            for (std::int64_t j = 0; j < sp.len; ++j) mean += xv[base + j * sp.inner];
            mean *= inv_len;
            T var = T(0);
            for (std::int64_t j = 0; j < sp.len; ++j) {
                const T d = xv[base + j * sp.inner] - mean;
                var += d * d;
            }
            var *= inv_len;
            const T inv_std = T(1) / std::sqrt(var + eps);
            for (std::int64_t j = 0; j < sp.len; ++j) {
                const T xhat = (xv[base + j * sp.inner] - mean) * inv_std;
                out[base + j * sp.inner] = xhat * gamma.vals()[j] + beta.vals()[j];
            }
        }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return Tensor<T>::make_op(x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, sp, eps, inv_len](typename Tensor<T>::Node& self) {
            std::vector<T> gx, gg, gb;
            if (xn->requires_grad) gx.assign(xn->value.size(), T(0));
            if (gn->requires_grad) gg.assign(gn->value.size(), T(0));
            if (bn->requires_grad) gb.assign(bn->value.size(), T(0));
            std::vector<T> xhat(static_cast<std::size_t>(sp.len));
            for (std::int64_t o = 0; o < sp.outer; ++o)
                for (std::int64_t i = 0; i < sp.inner; ++i) {
                    const std::int64_t base = o * sp.len * sp.inner + i;
                    T mean = T(0);
                    for (std::int64_t j = 0; j < sp.len; ++j) mean += xn->value[base + j * sp.inner];
                    mean *= inv_len;
                    T var = T(0);
                    for (std::int64_t j = 0; j < sp.len; ++j) {
                        const T d = xn->value[base + j * sp.inner] - mean;
                        var += d * d;
                    }
                    var *= inv_len;
                    const T inv_std = T(1) / std::sqrt(var + eps);
                    for (std::int64_t j = 0; j < sp.len; ++j)
                        xhat[j] = (xn->value[base + j * sp.inner] - mean) * inv_std;
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (std::int64_t j = 0; j < sp.len; ++j) {
                        const T dy = self.grad[base + j * sp.inner];
                        const T dxh = dy * gn->value[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                        if (!gg.empty()) gg[j] += dy * xhat[j];
                        if (!gb.empty()) gb[j] += dy;
                    }
                    if (!gx.empty())
                        for (std::int64_t j = 0; j < sp.len; ++j) {
                            const T dxh = self.grad[base + j * sp.inner] * gn->value[j];
                            gx[base + j * sp.inner] =
                                inv_std * (dxh - inv_len * sum_dxhat - xhat[j] * inv_len * sum_dxhat_xhat);
                        }
                }
            if (!gx.empty()) xn->accumulate(gx);
            if (!gg.empty()) gn->accumulate(gg);
            if (!gb.empty()) bn->accumulate(gb);
        });
}

// ---------------------------------------------------------------------------
// Convolutions (cross-correlation convention).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, T* cols) {
    // cols is (c*k*k, oh*ow)
    const std::int64_t n = oh * ow;
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
                T* row = cols + ((ci * k + ky) * k + kx) * n;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * ow, row + (oy + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = x + (ci * h + iy) * w;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        row[oy * ow + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
}

template <typename T>
void col2im_acc(const T* cols, std::int64_t c, std::int64_t h, std::int64_t w, std::int64_t k,
                std::int64_t stride, std::int64_t pad, std::int64_t oh, std::int64_t ow, T* x) {
    const std::int64_t n = oh * ow;
    for (std::int64_t ci = 0; ci < c; ++ci)
        for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
                const T* row = cols + ((ci * k + ky) * k + kx) * n;
                for (std::int64_t oy = 0; oy < oh; ++oy) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = x + (ci * h + iy) * w;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                    }
                }
            }
}

} // namespace detail

// x: (c_in,h,w), weight: (c_out,c_in,k,k), bias: (c_out) or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
    check(x.rank() == 3, "conv2d input must be c*h*w, got " + shape_str(x.shape()));
    check(weight.rank() == 4, "conv2d weight must be co*ci*k*k");
    const std::int64_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::int64_t cout = weight.dim(0), k = weight.dim(2);
    check(weight.dim(1) == cin, "conv2d weight in-channels " + std::to_string(weight.dim(1)) +
                                    " != input channels " + std::to_string(cin));
    check(weight.dim(3) == k, "conv2d kernel must be square");
    check(stride >= 1 && pad >= 0, "conv2d stride/pad invalid");
    const std::int64_t eh = h + 2 * pad - k, ew = w + 2 * pad - k;
    check(eh >= 0 && ew >= 0 && eh % stride == 0 && ew % stride == 0,
          "conv2d non-integral output extent for input " + shape_str(x.shape()));
    const std::int64_t oh = eh / stride + 1, ow = ew / stride + 1;
    const std::int64_t n = oh * ow;
    const bool pointwise = (k == 1 && stride == 1 && pad == 0);
    const bool with_bias = bias.defined();
    if (with_bias) check(bias.rank() == 1 && bias.dim(0) == cout, "conv2d bias extent mismatch");

    std::vector<T> out(static_cast<std::size_t>(cout * n), T(0));
    if (pointwise) {
        detail::gemm_nn(weight.vals().data(), x.vals().data(), out.data(), cout, cin, n);
    } else {
        std::vector<T> cols(static_cast<std::size_t>(cin * k * k * n));
        detail::im2col(x.vals().data(), cin, h, w, k, stride, pad, oh, ow, cols.data());
        detail::gemm_nn(weight.vals().data(), cols.data(), out.data(), cout, cin * k * k, n);
    }
    if (with_bias)
        for (std::int64_t co = 0; co < cout; ++co) {
            const T b = bias.vals()[co];
            for (std::int64_t j = 0; j < n; ++j) out[co * n + j] += b;
        }

    auto xn = x.node();
    auto wn = weight.node();
    auto bn = with_bias ? bias.node() : nullptr;
    std::vector<Tensor<T>> parents{x, weight};
    if (with_bias) parents.push_back(bias);
    return Tensor<T>::make_op({cout, oh, ow}, std::move(out), std::move(parents),
        [xn, wn, bn, cin, h, w, k, stride, pad, oh, ow, cout, pointwise](
            typename Tensor<T>::Node& self) {
            const std::int64_t n2 = oh * ow;
            const T* gy = self.grad.data();
            std::vector<T> cols;
            const T* col_ptr = nullptr;
            if (!pointwise && (wn->requires_grad || xn->requires_grad)) {
                cols.assign(static_cast<std::size_t>(cin * k * k * n2), T(0));
                detail::im2col(xn->value.data(), cin, h, w, k, stride, pad, oh, ow, cols.data());
                col_ptr = cols.data();
            } else {
                col_ptr = xn->value.data();
            }
            if (wn->requires_grad) {
                std::vector<T> gw(wn->value.size(), T(0));
                detail::gemm_nt(gy, col_ptr, gw.data(), cout, n2, cin * k * k);
                wn->accumulate(gw);
            }
            if (xn->requires_grad) {
                if (pointwise) {
                    std::vector<T> gx(xn->value.size(), T(0));
                    detail::gemm_tn(wn->value.data(), gy, gx.data(), cout, cin, n2);
                    xn->accumulate(gx);
                } else {
                    std::vector<T> gcols(static_cast<std::size_t>(cin * k * k * n2), T(0));
                    detail::gemm_tn(wn->value.data(), gy, gcols.data(), cout, cin * k * k, n2);
                    std::vector<T> gx(xn->value.size(), T(0));
                    detail::col2im_acc(gcols.data(), cin, h, w, k, stride, pad, oh, ow, gx.data());
                    xn->accumulate(gx);
                }
            }
            if (bn && bn->requires_grad) {
                std::vector<T> gb(static_cast<std::size_t>(cout), T(0));
                for (std::int64_t co = 0; co < cout; ++co)
                    for (std::int64_t j = 0; j < n2; ++j) gb[co] += gy[co * n2 + j];
                bn->accumulate(gb);
            }
        });
}

// Depthwise conv: x (c,h,w), weight (c,1,k,k), bias (c) or undefined; stride 1.
template <typename T>
Tensor<T> dwconv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                   std::int64_t pad) {
    check(x.rank() == 3 && weight.rank() == 4, "dwconv2d expects c*h*w input, c*1*k*k weight");
    const std::int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2), k = weight.dim(2);
    check(weight.dim(0) == c, "dwconv2d weight channels " + std::to_string(weight.dim(0)) +
                                  " != input channels " + std::to_string(c));
    check(weight.dim(1) == 1 && weight.dim(3) == k, "dwconv2d weight must be c*1*k*k");
    const std::int64_t oh = h + 2 * pad - k + 1, ow = w + 2 * pad - k + 1;
    check(oh >= 1 && ow >= 1, "dwconv2d kernel larger than padded input");
    const bool with_bias = bias.defined();
    if (with_bias) check(bias.rank() == 1 && bias.dim(0) == c, "dwconv2d bias extent mismatch");

    std::vector<T> out(static_cast<std::size_t>(c * oh * ow), T(0));
    for (std::int64_t ci = 0; ci < c; ++ci) {
        const T* xp = x.vals().data() + ci * h * w;
        const T* wp = weight.vals().data() + ci * k * k;
        T* op = out.data() + ci * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy)
            for (std::int64_t ky = 0; ky < k; ++ky) {
                const std::int64_t iy = oy - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t kx = 0; kx < k; ++kx) {
                    const T wv = wp[ky * k + kx];
                    const std::int64_t x_lo = std::max<std::int64_t>(0, pad - kx);
                    const std::int64_t x_hi = std::min<std::int64_t>(ow, w + pad - kx);
                    const T* src = xp + iy * w - pad + kx;
                    T* dst = op + oy * ow;
                    for (std::int64_t ox = x_lo; ox < x_hi; ++ox) dst[ox] += wv * src[ox];
                }
            }
        if (with_bias) {
            const T b = bias.vals()[ci];
            for (std::int64_t j = 0; j < oh * ow; ++j) op[j] += b;
        }
    }

    auto xn = x.node();
    auto wn = weight.node();
    auto bn = with_bias ? bias.node() : nullptr;
    std::vector<Tensor<T>> parents{x, weight};
    if (with_bias) parents.push_back(bias);
    return Tensor<T>::make_op({c, oh, ow}, std::move(out), std::move(parents),
        [xn, wn, bn, c, h, w, k, pad, oh, ow](typename Tensor<T>::Node& self) {
            std::vector<T> gx, gw, gb;
            if (xn->requires_grad) gx.assign(xn->value.size(), T(0));
            if (wn->requires_grad) gw.assign(wn->value.size(), T(0));
            if (bn && bn->requires_grad) gb.assign(static_cast<std::size_t>(c), T(0));
            for (std::int64_t ci = 0; ci < c; ++ci) {
                const T* gyp = self.grad.data() + ci * oh * ow;
                const T* xp = xn->value.data() + ci * h * w;
                const T* wp = wn->value.data() + ci * k * k;
                for (std::int64_t oy = 0; oy < oh; ++oy)
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const T g = gyp[oy * ow + ox];
                        if (g == T(0)) continue;
                        for (std::int64_t ky = 0; ky < k; ++ky) {
                            const std::int64_t iy = oy - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (std::int64_t kx = 0; kx < k; ++kx) {
                                const std::int64_t ix = ox - pad + kx;
                                if (ix < 0 || ix >= w) continue;
                                if (!gx.empty()) gx[(ci * h + iy) * w + ix] += g * wp[ky * k + kx];
                                if (!gw.empty())
                                    gw[ci * k * k + ky * k + kx] += g * xp[iy * w + ix];
                            }
                        }
                        if (!gb.empty()) gb[ci] += g;
                    }
            }
            if (!gx.empty()) xn->accumulate(gx);
            if (!gw.empty()) wn->accumulate(gw);
            if (bn && !gb.empty()) bn->accumulate(gb);
        });
}

} // namespace rled
