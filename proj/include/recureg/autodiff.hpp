// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a handle to a node in a dynamically built expression graph. Each
// operation records its inputs and a closure that maps the gradient of its
// output to gradient contributions on those inputs. backward() walks the
// graph once in reverse topological order.
//
// Grid operations here follow the Tensor layout (channels, H, W, T).
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "recureg/tensor.hpp"

namespace recureg::ad {

struct Node;

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor &value() const;
    // Gradient accumulated by the last backward(); zeros if none reached this node.
    Tensor grad() const;
    bool requires_grad() const;
    bool defined() const noexcept { return static_cast<bool>(node_); }

    const std::vector<int> &shape() const { return value().shape(); }
    int dim(int axis) const { return value().dim(axis); }

    Node *node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node> &shared() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

using BackwardFn = std::function<void(const Tensor &grad_out)>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward;

    // Gradient buffer, allocated as zeros on first use.
    Tensor &grad_buffer();
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

Var leaf(Tensor value, bool requires_grad = true);
Var constant(Tensor value);

// Builds an op node. `backward` is kept only if grad recording is enabled and
// some input requires a gradient; it must accumulate into the inputs' grad
// buffers (use accumulate()).
Var make_op(Tensor value, std::span<const Var> inputs, BackwardFn backward);

// Adds `g` into the gradient of `v` if `v` tracks gradients.
void accumulate(const Var &v, const Tensor &g);
bool needs_grad(const Var &v);

// Seeds d(root)/d(root) = 1 and back-propagates. root must hold one element.
void backward(const Var &root);

// ---- elementwise / reductions ----
Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var mul(const Var &a, const Var &b);
Var scale(const Var &a, double s);
Var sum(const Var &a);
Var mean(const Var &a);
Var sum_squares(const Var &a);
// x: (C, ...), w: (1, ...) broadcast over the leading channel axis.
Var mul_channels(const Var &x, const Var &w);
Var leaky_relu(const Var &x, double negative_slope);

// ---- shape ----
Var reshape(const Var &a, std::vector<int> shape);
// Concatenates along axis 0; trailing dims must agree.
Var concat(std::span<const Var> parts);
Var concat(const Var &a, const Var &b);

// ---- linear algebra on rank-2 tensors ----
// op(a) * op(b) where op transposes when the flag is set.
Var matmul(const Var &a, const Var &b, bool transpose_a = false, bool transpose_b = false);
// Softmax down each column (over axis 0) of a rank-2 tensor.
Var softmax_columns(const Var &logits);

// ---- 3D grid layers on (C, H, W, T) ----
// Zero-padded "same" convolution, stride 1. weight: (Co, Ci, K, K, K), K odd.
// bias may be undefined.
Var conv3d(const Var &x, const Var &weight, const Var &bias, int dilation);
// 2x2x2 mean pooling; spatial dims must be even.
Var avg_pool2(const Var &x);
// x2 trilinear upsampling, half-voxel aligned, edge-clamped.
Var upsample2(const Var &x);

} // namespace recureg::ad
