#include "spikedistill/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace spikedistill {

namespace {

bool any_requires_grad(std::span<const Tensor> ts) {
    for (const auto& t : ts) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

// Decompose a shape around `axis` into (outer, k, inner) extents so that the
// flat index of element (o, j, i) is (o*k + j)*inner + i.
struct AxisSplit {
    std::size_t outer = 1, k = 1, inner = 1;
};

AxisSplit split_axis(const std::vector<int>& shape, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(shape.size())) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_to_string(shape));
    }
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[i]);
    s.k = static_cast<std::size_t>(shape[axis]);
    for (std::size_t i = axis + 1; i < shape.size(); ++i)
        s.inner *= static_cast<std::size_t>(shape[i]);
    return s;
}

} // namespace

Tensor make_op(std::vector<int> shape, std::vector<double> values,
               std::span<const Tensor> parents,
               std::function<void(detail::TensorNode&)> backprop) {
    if (!any_requires_grad(parents)) {
        return Tensor::from_vector(std::move(shape), std::move(values));
    }
    auto node = std::make_shared<detail::TensorNode>();
    const std::size_t n = shape_numel(shape);
    if (n != values.size()) {
        throw ShapeError("make_op: value count does not match shape " + shape_to_string(shape));
    }
    node->shape = std::move(shape);
    node->values = std::move(values);
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backprop = std::move(backprop);
    return Tensor::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Broadcast { None, AScalar, BScalar };

Broadcast binary_broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::None;
    if (a.size() == 1) return Broadcast::AScalar;
    if (b.size() == 1) return Broadcast::BScalar;
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()) +
                     " (only exact match or scalar operands)");
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    const Broadcast bc = binary_broadcast(a, b, "add");
    const auto& out_shape = (bc == Broadcast::AScalar) ? b.shape() : a.shape();
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(shape_numel(out_shape));
    switch (bc) {
    case Broadcast::None:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
        break;
    case Broadcast::AScalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] + bv[i];
        break;
    case Broadcast::BScalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[0];
        break;
    }
    auto* an = a.node().get();
    auto* bn = b.node().get();
    const Tensor parents[] = {a, b};
    return make_op(out_shape, std::move(out), parents, [an, bn, bc](detail::TensorNode& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
            an->ensure_grad();
            if (bc == Broadcast::AScalar) {
                double s = 0.0;
                for (double v : g) s += v;
                an->grad[0] += s;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (bc == Broadcast::BScalar) {
                double s = 0.0;
                for (double v : g) s += v;
                bn->grad[0] += s;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    const Broadcast bc = binary_broadcast(a, b, "sub");
    const auto& out_shape = (bc == Broadcast::AScalar) ? b.shape() : a.shape();
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(shape_numel(out_shape));
    switch (bc) {
    case Broadcast::None:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
        break;
    case Broadcast::AScalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] - bv[i];
        break;
    case Broadcast::BScalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[0];
        break;
    }
    auto* an = a.node().get();
    auto* bn = b.node().get();
    const Tensor parents[] = {a, b};
    return make_op(out_shape, std::move(out), parents, [an, bn, bc](detail::TensorNode& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
            an->ensure_grad();
            if (bc == Broadcast::AScalar) {
                double s = 0.0;
                for (double v : g) s += v;
                an->grad[0] += s;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (bc == Broadcast::BScalar) {
                double s = 0.0;
                for (double v : g) s += v;
                bn->grad[0] -= s;
            } else {
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] -= g[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    const Broadcast bc = binary_broadcast(a, b, "mul");
    const auto& out_shape = (bc == Broadcast::AScalar) ? b.shape() : a.shape();
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(shape_numel(out_shape));
    switch (bc) {
    case Broadcast::None:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
        break;
    case Broadcast::AScalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[0] * bv[i];
        break;
    case Broadcast::BScalar:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[0];
        break;
    }
    auto* an = a.node().get();
    auto* bn = b.node().get();
    const Tensor parents[] = {a, b};
    return make_op(out_shape, std::move(out), parents, [an, bn, bc](detail::TensorNode& self) {
        const auto& g = self.grad;
        const auto& av2 = an->values;
        const auto& bv2 = bn->values;
        if (an->requires_grad) {
            an->ensure_grad();
            switch (bc) {
            case Broadcast::None:
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bv2[i];
                break;
            case Broadcast::AScalar: {
                double s = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * bv2[i];
                an->grad[0] += s;
                break;
            }
            case Broadcast::BScalar:
                for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i] * bv2[0];
                break;
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            switch (bc) {
            case Broadcast::None:
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * av2[i];
                break;
            case Broadcast::BScalar: {
                double s = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av2[i];
                bn->grad[0] += s;
                break;
            }
            case Broadcast::AScalar:
                for (std::size_t i = 0; i < g.size(); ++i) bn->grad[i] += g[i] * av2[0];
                break;
            }
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(a.shape(), std::move(out), parents, [an, c](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += c * self.grad[i];
    });
}

Tensor relu(const Tensor& a) {
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(a.shape(), std::move(out), parents, [an](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (an->values[i] > 0.0) an->grad[i] += self.grad[i];
        }
    });
}

Tensor log_elem(const Tensor& a) {
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(a.shape(), std::move(out), parents, [an](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            an->grad[i] += self.grad[i] / an->values[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& a, int axis) {
    const AxisSplit sp = split_axis(a.shape(), axis, "softmax");
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.k * sp.inner + i;
            double m = av[base];
            for (std::size_t j = 1; j < sp.k; ++j)
                m = std::max(m, av[base + j * sp.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < sp.k; ++j) {
                const double e = std::exp(av[base + j * sp.inner] - m);
                out[base + j * sp.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < sp.k; ++j) out[base + j * sp.inner] /= z;
        }
    }
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(a.shape(), std::move(out), parents, [an, sp](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const auto& y = self.values;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.k * sp.inner + i;
                double dot = 0.0;
                for (std::size_t j = 0; j < sp.k; ++j) {
                    const std::size_t idx = base + j * sp.inner;
                    dot += g[idx] * y[idx];
                }
                for (std::size_t j = 0; j < sp.k; ++j) {
                    const std::size_t idx = base + j * sp.inner;
                    an->grad[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

Tensor log_softmax(const Tensor& a, int axis) {
    const AxisSplit sp = split_axis(a.shape(), axis, "log_softmax");
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.k * sp.inner + i;
            double m = av[base];
            for (std::size_t j = 1; j < sp.k; ++j)
                m = std::max(m, av[base + j * sp.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < sp.k; ++j) z += std::exp(av[base + j * sp.inner] - m);
            const double lz = m + std::log(z);
            for (std::size_t j = 0; j < sp.k; ++j)
                out[base + j * sp.inner] = av[base + j * sp.inner] - lz;
        }
    }
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(a.shape(), std::move(out), parents, [an, sp](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const auto& y = self.values;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < sp.outer; ++o) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                const std::size_t base = o * sp.k * sp.inner + i;
                double gsum = 0.0;
                for (std::size_t j = 0; j < sp.k; ++j) gsum += g[base + j * sp.inner];
                for (std::size_t j = 0; j < sp.k; ++j) {
                    const std::size_t idx = base + j * sp.inner;
                    an->grad[idx] += g[idx] - std::exp(y[idx]) * gsum;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

std::vector<int> drop_axis(const std::vector<int>& shape, int axis) {
    std::vector<int> out;
    out.reserve(shape.size() - 1);
    for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
        if (i != axis) out.push_back(shape[i]);
    }
    if (out.empty()) out.push_back(1);
    return out;
}

Tensor reduce_axis(const Tensor& a, int axis, bool take_mean, const char* op) {
    const AxisSplit sp = split_axis(a.shape(), axis, op);
    const auto av = a.values();
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t j = 0; j < sp.k; ++j) {
            const std::size_t base = (o * sp.k + j) * sp.inner;
            for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += av[base + i];
        }
    }
    const double w = take_mean ? 1.0 / static_cast<double>(sp.k) : 1.0;
    if (take_mean) {
        for (double& v : out) v *= w;
    }
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(drop_axis(a.shape(), axis), std::move(out), parents,
                   [an, sp, w](detail::TensorNode& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       const auto& g = self.grad;
                       for (std::size_t o = 0; o < sp.outer; ++o) {
                           for (std::size_t j = 0; j < sp.k; ++j) {
                               const std::size_t base = (o * sp.k + j) * sp.inner;
                               for (std::size_t i = 0; i < sp.inner; ++i)
                                   an->grad[base + i] += w * g[o * sp.inner + i];
                           }
                       }
                   });
}

} // namespace

Tensor sum(const Tensor& a, int axis) { return reduce_axis(a, axis, false, "sum"); }
Tensor mean(const Tensor& a, int axis) { return reduce_axis(a, axis, true, "mean"); }

Tensor sum_all(const Tensor& a) {
    const auto av = a.values();
    double s = 0.0;
    for (double v : av) s += v;
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op({1}, {s}, parents, [an](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (double& v : an->grad) v += g;
    });
}

Tensor mean_all(const Tensor& a) {
    const auto av = a.values();
    double s = 0.0;
    for (double v : av) s += v;
    const double inv = 1.0 / static_cast<double>(av.size());
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op({1}, {s * inv}, parents, [an, inv](detail::TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const double g = self.grad[0] * inv;
        for (double& v : an->grad) v += g;
    });
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
    int n, c, h, w;     // input
    int f, kh, kw;      // kernel
    int oh, ow;         // output
    int stride, padding;
};

// Valid output range [lo, hi] for one kernel tap so that the implied input
// coordinate stays in bounds; empty when lo > hi.
inline void tap_range(int in_extent, int out_extent, int k_off, int stride, int padding,
                      int& lo, int& hi) {
    // in = out*stride - padding + k_off, need 0 <= in <= in_extent-1
    const int a = padding - k_off;
    lo = a <= 0 ? 0 : (a + stride - 1) / stride;
    const int b = in_extent - 1 + padding - k_off;
    hi = b < 0 ? -1 : b / stride;
    if (hi > out_extent - 1) hi = out_extent - 1;
}

} // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
    if (input.ndim() != 4) {
        throw ShapeError("conv2d: input must be [N,C,H,W], got " +
                         shape_to_string(input.shape()));
    }
    if (kernel.ndim() != 4) {
        throw ShapeError("conv2d: kernel must be [F,C,kH,kW], got " +
                         shape_to_string(kernel.shape()));
    }
    ConvDims d;
    d.n = input.dim(0);
    d.c = input.dim(1);
    d.h = input.dim(2);
    d.w = input.dim(3);
    d.f = kernel.dim(0);
    d.kh = kernel.dim(2);
    d.kw = kernel.dim(3);
    d.stride = stride;
    d.padding = padding;
    if (kernel.dim(1) != d.c) {
        throw ShapeError("conv2d: input channels (axis 1 = " + std::to_string(d.c) +
                         ") != kernel channels (axis 1 = " + std::to_string(kernel.dim(1)) + ")");
    }
    if (bias.ndim() != 1 || bias.dim(0) != d.f) {
        throw ShapeError("conv2d: bias must be [" + std::to_string(d.f) + "], got " +
                         shape_to_string(bias.shape()));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
    if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
    if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding) {
        throw ShapeError("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                         " exceeds padded input " + std::to_string(d.h + 2 * padding) + "x" +
                         std::to_string(d.w + 2 * padding) + " (axes 2,3)");
    }
    d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.w + 2 * padding - d.kw) / stride + 1;

    const double* in = input.values().data();
    const double* kv = kernel.values().data();
    const double* bv = bias.values().data();
    std::vector<double> out(static_cast<std::size_t>(d.n) * d.f * d.oh * d.ow);

    const std::size_t in_chw = static_cast<std::size_t>(d.c) * d.h * d.w;
    const std::size_t out_fhw = static_cast<std::size_t>(d.f) * d.oh * d.ow;
    for (int n = 0; n < d.n; ++n) {
        for (int f = 0; f < d.f; ++f) {
            double* out_plane = out.data() + n * out_fhw + static_cast<std::size_t>(f) * d.oh * d.ow;
            const double b = bv[f];
            for (int i = 0; i < d.oh * d.ow; ++i) out_plane[i] = b;
            for (int c = 0; c < d.c; ++c) {
                const double* in_plane = in + n * in_chw + static_cast<std::size_t>(c) * d.h * d.w;
                const double* kplane =
                    kv + (static_cast<std::size_t>(f) * d.c + c) * d.kh * d.kw;
                for (int ky = 0; ky < d.kh; ++ky) {
                    int oy_lo, oy_hi;
                    tap_range(d.h, d.oh, ky, stride, padding, oy_lo, oy_hi);
                    for (int kx = 0; kx < d.kw; ++kx) {
                        const double wgt = kplane[ky * d.kw + kx];
                        if (wgt == 0.0) continue;
                        int ox_lo, ox_hi;
                        tap_range(d.w, d.ow, kx, stride, padding, ox_lo, ox_hi);
                        for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            const double* in_row = in_plane + static_cast<std::size_t>(iy) * d.w;
                            double* out_row = out_plane + static_cast<std::size_t>(oy) * d.ow;
                            const int ix0 = ox_lo * stride - padding + kx;
                            if (stride == 1) {
                                const double* ip = in_row + ix0;
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    out_row[ox] += wgt * ip[ox - ox_lo];
                            } else {
                                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    out_row[ox] += wgt * in_row[ix0 + (ox - ox_lo) * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    auto* in_n = input.node().get();
    auto* k_n = kernel.node().get();
    auto* b_n = bias.node().get();
    const Tensor parents[] = {input, kernel, bias};
    return make_op({d.n, d.f, d.oh, d.ow}, std::move(out), parents,
                   [in_n, k_n, b_n, d](detail::TensorNode& self) {
                       const double* g = self.grad.data();
                       const std::size_t in_chw = static_cast<std::size_t>(d.c) * d.h * d.w;
                       const std::size_t out_fhw = static_cast<std::size_t>(d.f) * d.oh * d.ow;
                       if (b_n->requires_grad) {
                           b_n->ensure_grad();
                           for (int n = 0; n < d.n; ++n) {
                               for (int f = 0; f < d.f; ++f) {
                                   const double* gp =
                                       g + n * out_fhw + static_cast<std::size_t>(f) * d.oh * d.ow;
                                   double s = 0.0;
                                   for (int i = 0; i < d.oh * d.ow; ++i) s += gp[i];
                                   b_n->grad[f] += s;
                               }
                           }
                       }
                       if (in_n->requires_grad) {
                           in_n->ensure_grad();
                           const double* kv = k_n->values.data();
                           for (int n = 0; n < d.n; ++n) {
                               for (int f = 0; f < d.f; ++f) {
                                   const double* gplane =
                                       g + n * out_fhw + static_cast<std::size_t>(f) * d.oh * d.ow;
                                   for (int c = 0; c < d.c; ++c) {
                                       double* gin_plane = in_n->grad.data() + n * in_chw +
                                                           static_cast<std::size_t>(c) * d.h * d.w;
                                       const double* kplane =
                                           kv + (static_cast<std::size_t>(f) * d.c + c) * d.kh * d.kw;
                                       for (int ky = 0; ky < d.kh; ++ky) {
                                           int oy_lo, oy_hi;
                                           tap_range(d.h, d.oh, ky, d.stride, d.padding, oy_lo, oy_hi);
                                           for (int kx = 0; kx < d.kw; ++kx) {
                                               const double wgt = kplane[ky * d.kw + kx];
                                               if (wgt == 0.0) continue;
                                               int ox_lo, ox_hi;
                                               tap_range(d.w, d.ow, kx, d.stride, d.padding, ox_lo,
                                                         ox_hi);
                                               for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                                                   const int iy = oy * d.stride - d.padding + ky;
                                                   double* gin_row =
                                                       gin_plane + static_cast<std::size_t>(iy) * d.w;
                                                   const double* g_row =
                                                       gplane + static_cast<std::size_t>(oy) * d.ow;
                                                   const int ix0 = ox_lo * d.stride - d.padding + kx;
                                                   for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                                       gin_row[ix0 + (ox - ox_lo) * d.stride] +=
                                                           wgt * g_row[ox];
                                               }
                                           }
                                       }
                                   }
                               }
                           }
                       }
                       if (k_n->requires_grad) {
                           k_n->ensure_grad();
                           const double* in = in_n->values.data();
                           for (int n = 0; n < d.n; ++n) {
                               for (int f = 0; f < d.f; ++f) {
                                   const double* gplane =
                                       g + n * out_fhw + static_cast<std::size_t>(f) * d.oh * d.ow;
                                   for (int c = 0; c < d.c; ++c) {
                                       const double* in_plane =
                                           in + n * in_chw + static_cast<std::size_t>(c) * d.h * d.w;
                                       double* gk_plane =
                                           k_n->grad.data() +
                                           (static_cast<std::size_t>(f) * d.c + c) * d.kh * d.kw;
                                       for (int ky = 0; ky < d.kh; ++ky) {
                                           int oy_lo, oy_hi;
                                           tap_range(d.h, d.oh, ky, d.stride, d.padding, oy_lo, oy_hi);
                                           for (int kx = 0; kx < d.kw; ++kx) {
                                               int ox_lo, ox_hi;
                                               tap_range(d.w, d.ow, kx, d.stride, d.padding, ox_lo,
                                                         ox_hi);
                                               double s = 0.0;
                                               for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                                                   const int iy = oy * d.stride - d.padding + ky;
                                                   const double* in_row =
                                                       in_plane + static_cast<std::size_t>(iy) * d.w;
                                                   const double* g_row =
                                                       gplane + static_cast<std::size_t>(oy) * d.ow;
                                                   const int ix0 = ox_lo * d.stride - d.padding + kx;
                                                   if (d.stride == 1) {
                                                       const double* ip = in_row + ix0;
                                                       for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                                           s += ip[ox - ox_lo] * g_row[ox];
                                                   } else {
                                                       for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                                           s += in_row[ix0 + (ox - ox_lo) * d.stride] *
                                                                g_row[ox];
                                                   }
                                               }
                                               gk_plane[ky * d.kw + kx] += s;
                                           }
                                       }
                                   }
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// linear

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    if (input.ndim() != 2) {
        throw ShapeError("linear: input must be [N,D], got " + shape_to_string(input.shape()));
    }
    if (weight.ndim() != 2) {
        throw ShapeError("linear: weight must be [K,D], got " + shape_to_string(weight.shape()));
    }
    const int n = input.dim(0), dd = input.dim(1);
    const int k = weight.dim(0);
    if (weight.dim(1) != dd) {
        throw ShapeError("linear: input features (axis 1 = " + std::to_string(dd) +
                         ") != weight features (axis 1 = " + std::to_string(weight.dim(1)) + ")");
    }
    if (bias.ndim() != 1 || bias.dim(0) != k) {
        throw ShapeError("linear: bias must be [" + std::to_string(k) + "], got " +
                         shape_to_string(bias.shape()));
    }
    const double* in = input.values().data();
    const double* wv = weight.values().data();
    const double* bv = bias.values().data();
    std::vector<double> out(static_cast<std::size_t>(n) * k);
    for (int i = 0; i < n; ++i) {
        const double* row = in + static_cast<std::size_t>(i) * dd;
        for (int j = 0; j < k; ++j) {
            const double* wrow = wv + static_cast<std::size_t>(j) * dd;
            double s = bv[j];
            for (int t = 0; t < dd; ++t) s += row[t] * wrow[t];
            out[static_cast<std::size_t>(i) * k + j] = s;
        }
    }
    auto* in_n = input.node().get();
    auto* w_n = weight.node().get();
    auto* b_n = bias.node().get();
    const Tensor parents[] = {input, weight, bias};
    return make_op({n, k}, std::move(out), parents,
                   [in_n, w_n, b_n, n, dd, k](detail::TensorNode& self) {
                       const double* g = self.grad.data();
                       if (b_n->requires_grad) {
                           b_n->ensure_grad();
                           for (int i = 0; i < n; ++i)
                               for (int j = 0; j < k; ++j)
                                   b_n->grad[j] += g[static_cast<std::size_t>(i) * k + j];
                       }
                       if (in_n->requires_grad) {
                           in_n->ensure_grad();
                           const double* wv = w_n->values.data();
                           for (int i = 0; i < n; ++i) {
                               double* grow = in_n->grad.data() + static_cast<std::size_t>(i) * dd;
                               for (int j = 0; j < k; ++j) {
                                   const double gij = g[static_cast<std::size_t>(i) * k + j];
                                   if (gij == 0.0) continue;
                                   const double* wrow = wv + static_cast<std::size_t>(j) * dd;
                                   for (int t = 0; t < dd; ++t) grow[t] += gij * wrow[t];
                               }
                           }
                       }
                       if (w_n->requires_grad) {
                           w_n->ensure_grad();
                           const double* in = in_n->values.data();
                           for (int i = 0; i < n; ++i) {
                               const double* row = in + static_cast<std::size_t>(i) * dd;
                               for (int j = 0; j < k; ++j) {
                                   const double gij = g[static_cast<std::size_t>(i) * k + j];
                                   if (gij == 0.0) continue;
                                   double* gwrow = w_n->grad.data() + static_cast<std::size_t>(j) * dd;
                                   for (int t = 0; t < dd; ++t) gwrow[t] += gij * row[t];
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// avg_pool2d

Tensor avg_pool2d(const Tensor& a, int k) {
    if (a.ndim() != 4) {
        throw ShapeError("avg_pool2d: input must be [N,C,H,W], got " + shape_to_string(a.shape()));
    }
    if (k < 1) throw ShapeError("avg_pool2d: window must be >= 1, got " + std::to_string(k));
    const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
    const int oh = h / k, ow = w / k;
    if (oh == 0 || ow == 0) {
        throw ShapeError("avg_pool2d: window " + std::to_string(k) + " exceeds input " +
                         std::to_string(h) + "x" + std::to_string(w) + " (axes 2,3)");
    }
    const double inv = 1.0 / (static_cast<double>(k) * k);
    const double* in = a.values().data();
    std::vector<double> out(static_cast<std::size_t>(n) * c * oh * ow);
    for (int p = 0; p < n * c; ++p) {
        const double* plane = in + static_cast<std::size_t>(p) * h * w;
        double* oplane = out.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                double s = 0.0;
                for (int dy = 0; dy < k; ++dy) {
                    const double* row = plane + static_cast<std::size_t>(oy * k + dy) * w + ox * k;
                    for (int dx = 0; dx < k; ++dx) s += row[dx];
                }
                oplane[static_cast<std::size_t>(oy) * ow + ox] = s * inv;
            }
        }
    }
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op({n, c, oh, ow}, std::move(out), parents,
                   [an, n, c, h, w, oh, ow, k, inv](detail::TensorNode& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       const double* g = self.grad.data();
                       for (int p = 0; p < n * c; ++p) {
                           double* gplane = an->grad.data() + static_cast<std::size_t>(p) * h * w;
                           const double* goplane = g + static_cast<std::size_t>(p) * oh * ow;
                           for (int oy = 0; oy < oh; ++oy) {
                               for (int ox = 0; ox < ow; ++ox) {
                                   const double gv =
                                       goplane[static_cast<std::size_t>(oy) * ow + ox] * inv;
                                   for (int dy = 0; dy < k; ++dy) {
                                       double* row = gplane +
                                                     static_cast<std::size_t>(oy * k + dy) * w +
                                                     ox * k;
                                       for (int dx = 0; dx < k; ++dx) row[dx] += gv;
                                   }
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_to_string(a.shape()) + " as " +
                         shape_to_string(new_shape));
    }
    std::vector<double> out(a.values().begin(), a.values().end());
    auto* an = a.node().get();
    const Tensor parents[] = {a};
    return make_op(std::move(new_shape), std::move(out), parents,
                   [an](detail::TensorNode& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                           an->grad[i] += self.grad[i];
                   });
}

Tensor flatten2d(const Tensor& a) {
    if (a.ndim() != 4) {
        throw ShapeError("flatten2d: input must be [N,C,H,W], got " + shape_to_string(a.shape()));
    }
    return reshape(a, {a.dim(0), a.dim(1) * a.dim(2) * a.dim(3)});
}

Tensor concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const auto& ref = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(ref.size())) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(ref));
    }
    int total_k = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != ref.size()) {
            throw ShapeError("concat: rank mismatch " + shape_to_string(ref) + " vs " +
                             shape_to_string(s));
        }
        for (int i = 0; i < static_cast<int>(s.size()); ++i) {
            if (i != axis && s[i] != ref[i]) {
                throw ShapeError("concat: shape mismatch at axis " + std::to_string(i) + ": " +
                                 shape_to_string(ref) + " vs " + shape_to_string(s));
            }
        }
        total_k += s[axis];
    }
    std::vector<int> out_shape = ref;
    out_shape[axis] = total_k;
    const AxisSplit sp = split_axis(out_shape, axis, "concat");
    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets; // start of each part along the axis
    offsets.reserve(parts.size());
    std::size_t k_off = 0;
    for (const auto& p : parts) {
        offsets.push_back(k_off);
        const std::size_t pk = static_cast<std::size_t>(p.shape()[axis]);
        const double* pv = p.values().data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            double* dst = out.data() + (o * sp.k + k_off) * sp.inner;
            const double* src = pv + o * pk * sp.inner;
            std::copy(src, src + pk * sp.inner, dst);
        }
        k_off += pk;
    }
    std::vector<detail::TensorNode*> pnodes;
    std::vector<std::size_t> pks;
    for (const auto& p : parts) {
        pnodes.push_back(p.node().get());
        pks.push_back(static_cast<std::size_t>(p.shape()[axis]));
    }
    return make_op(std::move(out_shape), std::move(out), parts,
                   [pnodes, pks, offsets, sp](detail::TensorNode& self) {
                       const double* g = self.grad.data();
                       for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                           auto* pn = pnodes[pi];
                           if (!pn->requires_grad) continue;
                           pn->ensure_grad();
                           const std::size_t pk = pks[pi];
                           for (std::size_t o = 0; o < sp.outer; ++o) {
                               const double* src = g + (o * sp.k + offsets[pi]) * sp.inner;
                               double* dst = pn->grad.data() + o * pk * sp.inner;
                               for (std::size_t i = 0; i < pk * sp.inner; ++i) dst[i] += src[i];
                           }
                       }
                   });
}

Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no inputs");
    std::vector<Tensor> reshaped;
    reshaped.reserve(rows.size());
    for (const auto& r : rows) {
        if (r.ndim() != 1) {
            throw ShapeError("stack_rows: rows must be 1-D, got " + shape_to_string(r.shape()));
        }
        reshaped.push_back(reshape(r, {1, r.dim(0)}));
    }
    return concat(reshaped, 0);
}

int argmax_tie_low(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

} // namespace spikedistill
