#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spikedistill/common.hpp"

namespace spikedistill {

namespace detail {

// One node of the dynamically recorded computation graph. `backprop` reads
// this node's grad buffer and accumulates into its parents' buffers; the
// edges (parents) are only recorded when some input requires gradients, so
// frozen networks run without any graph overhead.
struct TensorNode {
    std::vector<int> shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad; // allocated lazily, same length as values
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    std::size_t size() const { return values.size(); }
    bool is_leaf() const { return parents.empty(); }

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

} // namespace detail

// Dense row-major f64 tensor with optional reverse-mode gradient tracking.
// Value-semantic handle: copies share the underlying node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_vector(std::vector<int> shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    int dim(int axis) const;
    std::size_t size() const;

    std::span<const double> values() const;
    // Mutable access to the raw buffer; meant for leaves (parameters, inputs).
    std::span<double> values_mut();

    double item() const; // scalar tensors only
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    void zero_grad();

    // Reverse-mode sweep from a scalar loss. Interior grads are recomputed
    // from scratch on every call; leaf grads accumulate until zero_grad().
    void backward() const;

    // Value snapshot with no graph connection and no gradient tracking.
    Tensor detach() const;

    // Deep copy (values only); the copy is an independent leaf.
    Tensor clone() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::TensorNode> node);

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Number of elements implied by a shape; validates positivity.
std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

} // namespace spikedistill
