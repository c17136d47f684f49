#pragma once

#include <map>
#include <string>

#include "rled/config.hpp"
#include "rled/rng.hpp"
#include "rled/tensor.hpp"

namespace rled {

// Named hierarchy of learnable tensors. std::map gives deterministic,
// construction-order-independent iteration, which checkpointing and the
// optimizer rely on.
template <typename T>
struct ParamTree {
    std::map<std::string, Tensor<T>> entries;

    Tensor<T>& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError("missing parameter: " + name);
        return it->second;
    }

    const Tensor<T>& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw ConfigError("missing parameter: " + name);
        return it->second;
    }

    std::int64_t total_count() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : entries) n += t.numel();
        return n;
    }

    void zero_grads() {
        for (auto& [_, t] : entries) t.zero_grad();
    }
};

enum class InitKind {
    trunc_normal_002, // attention / linear weights
    conv_fan_in,      // conv kernels: N(0, sqrt(2/fan_in)) truncated at 2 sigma
    zeros,            // biases, LN beta, relative-position tables, log(alpha)
    ones,             // LN gamma
};

// One declared parameter of the schema walk.
struct ParamSpec {
    std::string name;
    Shape shape;
    InitKind init;
};

template <typename T>
Tensor<T> materialize_param(const ParamSpec& spec, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(spec.shape);
    auto& v = t.vals_mut();
    switch (spec.init) {
        case InitKind::trunc_normal_002:
            for (auto& x : v) x = static_cast<T>(rng.trunc_normal(0.02));
            break;
        case InitKind::conv_fan_in: {
            // fan_in = in_channels * kernel area for (co,ci,k,k); for depthwise
            // weights (c,1,k,k) this degenerates to the kernel area.
            std::int64_t fan_in = 1;
            for (std::size_t d = 1; d < spec.shape.size(); ++d) fan_in *= spec.shape[d];
            const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& x : v) x = static_cast<T>(rng.trunc_normal(sigma));
            break;
        }
        case InitKind::zeros:
            break;
        case InitKind::ones:
            for (auto& x : v) x = T(1);
            break;
    }
    t.set_requires_grad(true);
    return t;
}

} // namespace rled
