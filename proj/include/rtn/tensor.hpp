#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "rtn/rng.hpp"

namespace rtn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

inline void check_shape_valid(const Shape& shape) {
    for (auto e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got " + shape_str(shape));
    }
}

// One node of the dynamically built computation graph. Nodes are created by
// ops, hold strong references to their inputs, and know how to push their
// output gradient back to those inputs.
template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // same length as data once touched by backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void()> backward_fn;  // empty for leaves

    TensorNode(Shape s, std::vector<T> d, bool rg)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (static_cast<std::int64_t>(data.size()) != numel(shape)) {
            throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
    }

    void accumulate_grad(std::span<const T> g) {
        if (!requires_grad) return;
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }

    std::span<const T> grad_or_zeros() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

// Value-semantics handle onto a graph node. Copies alias the same node, so a
// Tensor behaves like a reference-counted array plus its autograd hookup.
template <typename T>
class Tensor {
  public:
    using Node = TensorNode<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        check_shape_valid(shape);
        return Tensor(std::make_shared<Node>(std::move(shape), std::move(data), requires_grad));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        check_shape_valid(shape);
        std::vector<T> d(static_cast<std::size_t>(numel(shape)), T(0));
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        check_shape_valid(shape);
        std::vector<T> d(static_cast<std::size_t>(numel(shape)), value);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data(Shape{}, std::vector<T>{value}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        check_shape_valid(shape);
        std::vector<T> d(static_cast<std::size_t>(numel(shape)));
        for (auto& v : d) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t size() const { return numel(node_->shape); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> data() const { return node_->data; }
    // Direct mutation is for leaves (parameters, buffers); mutating an op
    // output would desynchronize it from its recorded backward function.
    std::span<T> mutable_data() { return node_->data; }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const {
        if (!has_grad()) throw std::runtime_error("tensor has no populated gradient");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->data.size(), T(0));
    }

    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (!rg) node_->grad.clear();
    }

    T item() const {
        if (size() != 1) throw std::invalid_argument("item() requires a single-element tensor, shape is " + shape_str(shape()));
        return node_->data[0];
    }

    Tensor detach() const { return from_data(node_->shape, node_->data, false); }

    std::shared_ptr<Node> node() const { return node_; }

    // Reverse-mode sweep from a scalar. Visits the graph in reverse
    // topological order; gradients accumulate until explicitly zeroed.
    void backward() const {
        if (size() != 1) {
            throw std::invalid_argument("backward() requires a scalar loss, shape is " + shape_str(shape()));
        }
        if (!node_->requires_grad) {
            throw std::invalid_argument("backward() called on a tensor without gradient tracking");
        }

        // iterative post-order DFS
        std::vector<Node*> topo;
        std::unordered_set<Node*> visited;
        struct Frame {
            Node* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        stack.push_back(Frame{node_.get(), 0});
        visited.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                Node* p = f.node->parents[f.next_parent++].get();
                if (visited.insert(p).second) stack.push_back(Frame{p, 0});
            } else {
                topo.push_back(f.node);
                stack.pop_back();
            }
        }

        const T one(1);
        node_->accumulate_grad(std::span<const T>(&one, 1));
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn();
        }
    }

  private:
    std::shared_ptr<Node> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// A named leaf tensor with gradient tracking; the unit of optimization,
// checkpointing, and freezing.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

template <typename T>
using ParameterList = std::vector<Parameter<T>>;

template <typename T>
inline void check_unique_names(const ParameterList<T>& params) {
    std::unordered_set<std::string> seen;
    for (const auto& p : params) {
        if (!seen.insert(p.name).second) throw std::invalid_argument("duplicate parameter name: " + p.name);
    }
}

template <typename T>
inline void zero_grad(ParameterList<T>& params) {
    for (auto& p : params) p.value.zero_grad();
}

template <typename T>
inline void set_requires_grad(ParameterList<T>& params, bool rg) {
    for (auto& p : params) p.value.set_requires_grad(rg);
}

}  // namespace rtn
