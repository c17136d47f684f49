#pragma once

#include <functional>

#include "rled/ops.hpp"
#include "rled/rng.hpp"

namespace rled {

// Central-difference gradient verification for a scalar-valued function of
// several tensors. Inputs are perturbed in place and the function re-run, so
// `f` must be a pure function of the current input values.
struct GradCheckOptions {
    double step = 1e-5;
    // When an input has more elements than this, a deterministic random
    // subset of coordinates is probed instead of every element.
    std::int64_t max_coords_per_input = 400;
    std::uint64_t sample_seed = 0x5eed;
    double denom_floor = 1e-6;
};

inline double grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {}) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tensor<double> y = f(inputs);
    if (y.numel() != 1) throw OracleError("grad_check requires a scalar-valued function");
    if (!std::isfinite(y.item())) throw OracleError("grad_check: non-finite base evaluation");
    y.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) {
        if (t.grad().empty())
            analytic.emplace_back(t.vals().size(), 0.0);
        else
            analytic.push_back(t.grad());
    }

    auto eval = [&]() {
        const double v = f(inputs).item();
        if (!std::isfinite(v)) throw OracleError("grad_check: non-finite evaluation");
        return v;
    };

    double worst = 0.0;
    Rng rng(opt.sample_seed);
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& vals = inputs[ti].vals_mut();
        const std::int64_t n = static_cast<std::int64_t>(vals.size());
        std::vector<std::int64_t> coords;
        if (opt.max_coords_per_input > 0 && n > opt.max_coords_per_input) {
            for (std::int64_t i = 0; i < opt.max_coords_per_input; ++i)
                coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
        } else {
            coords.resize(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
        }
        for (const std::int64_t i : coords) {
            const double saved = vals[i];
            vals[i] = saved + opt.step;
            const double plus = eval();
            vals[i] = saved - opt.step;
            const double minus = eval();
            vals[i] = saved;
            const double fd = (plus - minus) / (2.0 * opt.step);
            const double an = analytic[ti][static_cast<std::size_t>(i)];
            const double denom = std::max({std::abs(fd), std::abs(an), opt.denom_floor});
            worst = std::max(worst, std::abs(fd - an) / denom);
        }
    }
    return worst;
}

// Convenience wrapper for a single-input function.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         Tensor<double> input, const GradCheckOptions& opt = {}) {
    return grad_check(
        [&](const std::vector<Tensor<double>>& in) { return f(in[0]); },
        std::vector<Tensor<double>>{std::move(input)}, opt);
}

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.vals_mut()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

} // namespace rled
