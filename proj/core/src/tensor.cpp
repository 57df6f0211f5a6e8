#include "spikedistill/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace spikedistill {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] <= 0) {
            throw ShapeError("non-positive dimension " + std::to_string(shape[i]) +
                             " at axis " + std::to_string(i));
        }
        n *= static_cast<std::size_t>(shape[i]);
    }
    return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto node = std::make_shared<detail::TensorNode>();
    const std::size_t n = shape_numel(shape);
    node->shape = std::move(shape);
    node->values.assign(n, value);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::from_vector(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    if (n != values.size()) {
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_to_string(shape));
    }
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = requires_grad;
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_vector({1}, {value}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const std::vector<int>& Tensor::shape() const {
    if (!node_) throw ContractError("shape() on undefined tensor");
    return node_->shape;
}

int Tensor::dim(int axis) const {
    const auto& s = shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(s));
    }
    return s[axis];
}

std::size_t Tensor::size() const {
    if (!node_) return 0;
    return node_->size();
}

std::span<const double> Tensor::values() const {
    if (!node_) throw ContractError("values() on undefined tensor");
    return {node_->values.data(), node_->values.size()};
}

std::span<double> Tensor::values_mut() {
    if (!node_) throw ContractError("values_mut() on undefined tensor");
    return {node_->values.data(), node_->values.size()};
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item() requires a scalar, got shape " + shape_to_string(shape()));
    }
    return node_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) {
        throw ShapeError("index rank " + std::to_string(idx.size()) +
                         " does not match shape " + shape_to_string(s));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (int i : idx) {
        if (i < 0 || i >= s[axis]) {
            throw ShapeError("index " + std::to_string(i) + " out of bounds at axis " +
                             std::to_string(axis) + " of shape " + shape_to_string(s));
        }
        flat = flat * static_cast<std::size_t>(s[axis]) + static_cast<std::size_t>(i);
        ++axis;
    }
    return node_->values[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!node_) throw ContractError("set_requires_grad() on undefined tensor");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const {
    return node_ && node_->grad.size() == node_->values.size();
}

std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad() before any backward pass");
    return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::grad_mut() {
    if (!node_) throw ContractError("grad_mut() on undefined tensor");
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
    if (!node_) return;
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::backward() const {
    if (!node_) throw ContractError("backward() on undefined tensor");
    if (node_->size() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            shape_to_string(node_->shape));
    }
    if (!node_->requires_grad) return;

    // Post-order DFS over the requires_grad subgraph; iterative to keep deep
    // timestep-unrolled graphs off the call stack.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorNode* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Interior grads are transient per sweep; leaf grads persist so repeated
    // sweeps accumulate.
    for (detail::TensorNode* n : order) {
        n->ensure_grad();
        if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    node_->grad[0] += 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorNode* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

Tensor Tensor::detach() const {
    if (!node_) throw ContractError("detach() on undefined tensor");
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = node_->shape;
    node->values = node_->values;
    node->requires_grad = false;
    return wrap(std::move(node));
}

Tensor Tensor::clone() const {
    if (!node_) throw ContractError("clone() on undefined tensor");
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = node_->shape;
    node->values = node_->values;
    node->requires_grad = node_->requires_grad;
    return wrap(std::move(node));
}

} // namespace spikedistill
