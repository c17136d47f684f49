#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rled/errors.hpp"

namespace rled {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * s[i + 1];
    return st;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Dense row-major tensor with an attached reverse-mode tape. Copying a
// Tensor copies the handle, not the data; values are immutable once an op
// has consumed them (ops always allocate fresh outputs). A node records its
// parents and a backward closure; replaying closures in reverse topological
// order accumulates gradients into every reachable node.
template <typename T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad; // allocated lazily, same length as value
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        }

        void accumulate(const std::vector<T>& g) {
            ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
        }
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return from_data(std::move(shape), {}, requires_grad, true);
    }

    static Tensor full(Shape shape, T fill) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false,
                            bool allow_empty = false) {
        const std::int64_t n = shape_numel(shape);
        for (auto d : shape) check(d > 0, "tensor extents must be positive, got " + shape_str(shape));
        if (allow_empty && data.empty()) data.assign(static_cast<std::size_t>(n), T(0));
        check(static_cast<std::int64_t>(data.size()) == n,
              "data length does not match shape " + shape_str(shape));
        Tensor t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return node_->numel(); }

    const std::vector<T>& vals() const { return node_->value; }
    std::vector<T>& vals_mut() { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }

    T item() const {
        check(numel() == 1, "item() requires a single-element tensor");
        return node_->value[0];
    }

    T at(std::initializer_list<std::int64_t> idx) const {
        const auto st = row_major_strides(shape());
        check(idx.size() == st.size(), "index rank mismatch");
        std::int64_t flat = 0;
        std::size_t k = 0;
        for (auto i : idx) flat += i * st[k++];
        return node_->value[static_cast<std::size_t>(flat)];
    }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    // Value copy detached from any tape.
    Tensor detach() const { return from_data(shape(), vals()); }

    // Reverse-mode pass from a scalar result. Gradients accumulate into the
    // grad buffers of every requires_grad node reachable through parents.
    void backward() const {
        check(numel() == 1, "backward() requires a scalar result");
        std::vector<Node*> order = topo_order();
        for (Node* n : order) n->ensure_grad();
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward) n->backward(*n);
        }
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Construct the result of an op: `parents` are consumed inputs, `bw`
    // reads result.grad and accumulates into parent grads. The tape link is
    // dropped entirely when no parent needs gradients.
    static Tensor make_op(Shape shape, std::vector<T> value,
                          std::vector<Tensor> parents, std::function<void(Node&)> bw) {
        Tensor out = from_data(std::move(shape), std::move(value));
        bool track = false;
        for (const auto& p : parents) track = track || p.node_->requires_grad;
        if (track) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(parents.size());
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward = std::move(bw);
        }
        return out;
    }

private:
    std::shared_ptr<Node> node_;

    std::vector<Node*> topo_order() const {
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // Iterative DFS; the second stack entry marks post-order emission.
        std::vector<std::pair<Node*, bool>> stack{{node_.get(), false}};
        while (!stack.empty()) {
            auto [n, emit] = stack.back();
            stack.pop_back();
            if (emit) {
                order.push_back(n);
                continue;
            }
            if (!seen.insert(n).second) continue;
            stack.push_back({n, true});
            for (const auto& p : n->parents)
                if (!seen.count(p.get())) stack.push_back({p.get(), false});
        }
        return order;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
    std::vector<To> out(x.vals().begin(), x.vals().end());
    return Tensor<To>::from_data(x.shape(), std::move(out));
}

} // namespace rled
