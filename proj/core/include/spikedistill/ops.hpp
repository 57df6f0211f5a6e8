#pragma once

#include <span>
#include <vector>

#include "spikedistill/tensor.hpp"

namespace spikedistill {

// Graph-node factory shared by all differentiable operations. The result
// records parents and a backprop closure only when some parent requires
// gradients; otherwise it is a plain leaf holding the forward values.
Tensor make_op(std::vector<int> shape, std::vector<double> values,
               std::span<const Tensor> parents,
               std::function<void(detail::TensorNode&)> backprop);

// Elementwise; operands must have identical shapes, or one may be a
// single-element tensor which then broadcasts (no other broadcasting).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor log_elem(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// Reductions. The axis variants drop the reduced axis (a 1-D input reduces
// to a scalar of shape [1]).
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a, int axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// input [N,C,H,W] * kernel [F,C,kH,kW] + bias [F] -> [N,F,H',W'],
// H' = floor((H + 2*padding - kH)/stride) + 1. Cross-correlation semantics.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int padding = 0);

// input [N,D] * weight [K,D] + bias [K] -> [N,K]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Non-overlapping k x k window average over [N,C,H,W]; trailing rows or
// columns that do not fill a window are dropped.
Tensor avg_pool2d(const Tensor& a, int k);

Tensor reshape(const Tensor& a, std::vector<int> new_shape);
// [N,C,H,W] -> [N, C*H*W]
Tensor flatten2d(const Tensor& a);

Tensor concat(std::span<const Tensor> parts, int axis);
// Stack T tensors of shape [D] into [T,D].
Tensor stack_rows(std::span<const Tensor> rows);

// Index of the maximum element; ties resolve to the lowest index.
int argmax_tie_low(std::span<const double> v);

} // namespace spikedistill
