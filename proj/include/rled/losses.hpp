#pragma once

#include "rled/config.hpp"
#include "rled/ops.hpp"

namespace rled {

// Mean absolute difference over all elements; subgradient 0 at exact ties.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    check(pred.shape() == target.shape(), "l1_loss shape mismatch: " + shape_str(pred.shape()) +
                                              " vs " + shape_str(target.shape()));
    return mean_all(abs(sub(pred, target)));
}

// Normalized Gaussian window as a fixed depthwise kernel (c,1,k,k).
template <typename T>
Tensor<T> gaussian_kernel(std::int64_t channels, int window, double sigma) {
    std::vector<double> g1(static_cast<std::size_t>(window));
    const int center = window / 2;
    double total = 0;
    for (int i = 0; i < window; ++i) {
        g1[i] = std::exp(-0.5 * (i - center) * (i - center) / (sigma * sigma));
        total += g1[i];
    }
    for (auto& v : g1) v /= total;
    std::vector<T> k(static_cast<std::size_t>(channels * window * window));
    for (std::int64_t c = 0; c < channels; ++c)
        for (int y = 0; y < window; ++y)
            for (int x = 0; x < window; ++x)
                k[(c * window + y) * window + x] = static_cast<T>(g1[y] * g1[x]);
    return Tensor<T>::from_data({channels, 1, window, window}, std::move(k));
}

// 1 - mean SSIM with a Gaussian window, valid region only (no padding).
template <typename T>
Tensor<T> ssim_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
    check(pred.shape() == target.shape(), "ssim_loss shape mismatch");
    check(pred.rank() == 3, "ssim_loss expects c*h*w");
    check(pred.dim(1) >= cfg.ssim_window && pred.dim(2) >= cfg.ssim_window,
          "image smaller than the SSIM window");
    const T c1 = static_cast<T>(cfg.ssim_c1), c2 = static_cast<T>(cfg.ssim_c2);
    Tensor<T> kernel = gaussian_kernel<T>(pred.dim(0), cfg.ssim_window, cfg.ssim_sigma);
    Tensor<T> none;
    auto blur = [&](const Tensor<T>& x) { return dwconv2d(x, kernel, none, 0); };

    Tensor<T> mu_x = blur(pred), mu_y = blur(target);
    Tensor<T> mu_xx = mul(mu_x, mu_x), mu_yy = mul(mu_y, mu_y), mu_xy = mul(mu_x, mu_y);
    Tensor<T> sigma_x = sub(blur(mul(pred, pred)), mu_xx);
    Tensor<T> sigma_y = sub(blur(mul(target, target)), mu_yy);
    Tensor<T> sigma_xy = sub(blur(mul(pred, target)), mu_xy);

    Tensor<T> num = mul(add_scalar(mul_scalar(mu_xy, T(2)), c1),
                        add_scalar(mul_scalar(sigma_xy, T(2)), c2));
    Tensor<T> den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(sigma_x, sigma_y), c2));
    Tensor<T> ssim_map = div(num, den);
    return add_scalar(neg(mean_all(ssim_map)), T(1));
}

// Total variation of the prediction. Anisotropic: mean of |dh| + |dw| over
// all valid forward differences; isotropic: mean sqrt(dh^2 + dw^2) over the
// common valid region.
template <typename T>
Tensor<T> tv_loss(const Tensor<T>& pred, TvVariant variant = TvVariant::anisotropic) {
    check(pred.rank() == 3, "tv_loss expects c*h*w");
    const std::int64_t c = pred.dim(0), h = pred.dim(1), w = pred.dim(2);
    if (variant == TvVariant::anisotropic) {
        Tensor<T> total = Tensor<T>::scalar(T(0));
        std::int64_t count = 0;
        if (h > 1) {
            Tensor<T> dh = sub(slice(pred, 1, 1, h - 1), slice(pred, 1, 0, h - 1));
            total = add(total, sum_all(abs(dh)));
            count += c * (h - 1) * w;
        }
        if (w > 1) {
            Tensor<T> dw = sub(slice(pred, 2, 1, w - 1), slice(pred, 2, 0, w - 1));
            total = add(total, sum_all(abs(dw)));
            count += c * h * (w - 1);
        }
        if (count == 0) return total;
        return mul_scalar(total, T(1) / static_cast<T>(count));
    }
    check(h > 1 && w > 1, "isotropic tv_loss needs h,w >= 2");
    Tensor<T> dh = sub(slice(pred, 1, 1, h - 1), slice(pred, 1, 0, h - 1)); // (c,h-1,w)
    Tensor<T> dw = sub(slice(pred, 2, 1, w - 1), slice(pred, 2, 0, w - 1)); // (c,h,w-1)
    dh = slice(dh, 2, 0, w - 1);
    dw = slice(dw, 1, 0, h - 1);
    // Small floor keeps the gradient defined on flat regions.
    Tensor<T> mag = sqrt(add_scalar(add(mul(dh, dh), mul(dw, dw)), T(1e-12)));
    return mean_all(mag);
}

template <typename T>
struct LossTerms {
    Tensor<T> l1, ssim, tv, total;
};

// L_total = l1 + l_ssim + lambda * l_tv.
template <typename T>
LossTerms<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
    LossTerms<T> t;
    t.l1 = l1_loss(pred, target);
    t.ssim = ssim_loss(pred, target, cfg);
    t.tv = tv_loss(pred, cfg.tv_variant);
    t.total = add(add(t.l1, t.ssim), mul_scalar(t.tv, static_cast<T>(cfg.lambda_tv)));
    return t;
}

} // namespace rled
