#pragma once

#include <vector>

#include "rled/gradcheck.hpp"
#include "rled/params.hpp"

namespace rled::testing {

// ParamTree entries in deterministic (map) order, for feeding grad_check.
template <typename T>
std::vector<Tensor<T>> flatten_params(ParamTree<T>& tree) {
    std::vector<Tensor<T>> out;
    out.reserve(tree.entries.size());
    for (auto& [_, t] : tree.entries) out.push_back(t);
    return out;
}

template <typename T>
Tensor<T> random_image(std::int64_t h, std::int64_t w, Rng& rng) {
    return random_tensor<T>({3, h, w}, rng, 0.0, 1.0);
}

} // namespace rled::testing
