#include "recureg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "recureg/error.hpp"

namespace recureg::ad {

namespace {

thread_local bool g_grad_enabled = true;

void require(bool cond, const char *msg) {
    if (!cond) throw ShapeError(msg);
}

// C (m x n) += op(A) * op(B), inner dimension k.
void gemm_acc(const double *a, bool ta, const double *b, bool tb, double *c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        double *crow = c + static_cast<std::ptrdiff_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ta ? a[static_cast<std::ptrdiff_t>(p) * m + i]
                                 : a[static_cast<std::ptrdiff_t>(i) * k + p];
            if (av == 0.0) continue;
            if (!tb) {
                const double *brow = b + static_cast<std::ptrdiff_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::ptrdiff_t>(j) * k + p];
            }
        }
    }
}

struct GridDims {
    int c, h, w, t;
    std::size_t voxels() const { return static_cast<std::size_t>(h) * w * t; }
};

GridDims grid_dims(const Tensor &x, const char *who) {
    if (x.rank() != 4) throw ShapeError(std::string(who) + ": expected (C, H, W, T), got " + x.shape_string());
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// Valid output index range [lo, hi) for a tap at offset `off` on an axis of length n.
inline void tap_range(int off, int n, int &lo, int &hi) {
    lo = std::max(0, -off);
    hi = std::min(n, n - off);
}

enum class ConvPass { Forward, InputGrad, WeightGrad };

// One routine for all three convolution passes so their index arithmetic
// cannot drift apart.
void conv3d_pass(ConvPass pass, const GridDims &in, int co_n, int ks, int dil, const double *x, const double *wt,
                 const double *dy, double *y_or_dx, double *dw) {
    const int h = in.h, w = in.w, t = in.t;
    const std::size_t nvox = in.voxels();
    const int half = ks / 2;
    for (int co = 0; co < co_n; ++co) {
        for (int ci = 0; ci < in.c; ++ci) {
            const double *xc = x ? x + static_cast<std::size_t>(ci) * nvox : nullptr;
            double *dxc = (pass == ConvPass::InputGrad) ? y_or_dx + static_cast<std::size_t>(ci) * nvox : nullptr;
            const double *dyc = (pass != ConvPass::Forward) ? dy + static_cast<std::size_t>(co) * nvox : nullptr;
            double *yc = (pass == ConvPass::Forward) ? y_or_dx + static_cast<std::size_t>(co) * nvox : nullptr;
            for (int a = 0; a < ks; ++a) {
                const int oa = (a - half) * dil;
                int ilo, ihi;
                tap_range(oa, h, ilo, ihi);
                if (ilo >= ihi) continue;
                for (int b = 0; b < ks; ++b) {
                    const int ob = (b - half) * dil;
                    int jlo, jhi;
                    tap_range(ob, w, jlo, jhi);
                    if (jlo >= jhi) continue;
                    for (int cc = 0; cc < ks; ++cc) {
                        const int oc = (cc - half) * dil;
                        int klo, khi;
                        tap_range(oc, t, klo, khi);
                        if (klo >= khi) continue;
                        const std::size_t widx =
                            ((static_cast<std::size_t>(co) * in.c + ci) * ks + a) * ks * ks + static_cast<std::size_t>(b) * ks + cc;
                        if (pass == ConvPass::Forward) {
                            const double wv = wt[widx];
                            if (wv == 0.0) continue;
                            for (int i = ilo; i < ihi; ++i) {
                                for (int j = jlo; j < jhi; ++j) {
                                    const double *xs = xc + (static_cast<std::size_t>(i + oa) * w + (j + ob)) * t + oc;
                                    double *ys = yc + (static_cast<std::size_t>(i) * w + j) * t;
                                    for (int k = klo; k < khi; ++k) ys[k] += wv * xs[k];
                                }
                            }
                        } else if (pass == ConvPass::InputGrad) {
                            const double wv = wt[widx];
                            if (wv == 0.0) continue;
                            for (int i = ilo; i < ihi; ++i) {
                                for (int j = jlo; j < jhi; ++j) {
                                    double *xs = dxc + (static_cast<std::size_t>(i + oa) * w + (j + ob)) * t + oc;
                                    const double *gs = dyc + (static_cast<std::size_t>(i) * w + j) * t;
                                    for (int k = klo; k < khi; ++k) xs[k] += wv * gs[k];
                                }
                            }
                        } else {
                            double acc = 0.0;
                            for (int i = ilo; i < ihi; ++i) {
                                for (int j = jlo; j < jhi; ++j) {
                                    const double *xs = xc + (static_cast<std::size_t>(i + oa) * w + (j + ob)) * t + oc;
                                    const double *gs = dyc + (static_cast<std::size_t>(i) * w + j) * t;
                                    for (int k = klo; k < khi; ++k) acc += gs[k] * xs[k];
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

// Linear x2 resampling along one axis of a (outer, n, inner) view and its adjoint.
struct UpsampleTap {
    int i0, i1;
    double f;
};

UpsampleTap upsample_tap(int o, int n) {
    double src = (o + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, n - 1);
    return {i0, i1, src - i0};
}

Tensor upsample_axis(const Tensor &x, int axis) {
    std::vector<int> shape = x.shape();
    const int n = shape[static_cast<std::size_t>(axis)];
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(d)]);
    for (int d = axis + 1; d < x.rank(); ++d) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(d)]);
    shape[static_cast<std::size_t>(axis)] = 2 * n;
    Tensor y(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (int q = 0; q < 2 * n; ++q) {
            const UpsampleTap tap = upsample_tap(q, n);
            const double *x0 = x.ptr() + (o * n + tap.i0) * inner;
            const double *x1 = x.ptr() + (o * n + tap.i1) * inner;
            double *yy = y.ptr() + (o * 2 * n + q) * inner;
            for (std::size_t r = 0; r < inner; ++r) yy[r] = (1.0 - tap.f) * x0[r] + tap.f * x1[r];
        }
    }
    return y;
}

Tensor upsample_axis_adjoint(const Tensor &g, int axis) {
    std::vector<int> shape = g.shape();
    const int n = shape[static_cast<std::size_t>(axis)] / 2;
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(d)]);
    for (int d = axis + 1; d < g.rank(); ++d) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(d)]);
    shape[static_cast<std::size_t>(axis)] = n;
    Tensor gx(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (int q = 0; q < 2 * n; ++q) {
            const UpsampleTap tap = upsample_tap(q, n);
            double *x0 = gx.ptr() + (o * n + tap.i0) * inner;
            double *x1 = gx.ptr() + (o * n + tap.i1) * inner;
            const double *gg = g.ptr() + (o * 2 * n + q) * inner;
            for (std::size_t r = 0; r < inner; ++r) {
                x0[r] += (1.0 - tap.f) * gg[r];
                x1[r] += tap.f * gg[r];
            }
        }
    }
    return gx;
}

} // namespace

// ---------------------------------------------------------------------------

const Tensor &Var::value() const {
    if (!node_) throw Error("access to undefined Var");
    return node_->value;
}

Tensor Var::grad() const {
    if (!node_) throw Error("access to undefined Var");
    if (node_->grad.empty() && !node_->value.empty()) return Tensor(node_->value.shape());
    return node_->grad;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

Tensor &Node::grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var make_op(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled) {
        for (const Var &v : inputs) {
            if (v.requires_grad()) {
                n->requires_grad = true;
                break;
            }
        }
    }
    if (n->requires_grad) {
        n->parents.reserve(inputs.size());
        for (const Var &v : inputs) {
            if (v.requires_grad()) n->parents.push_back(v.shared());
        }
        n->backward = std::move(backward);
    }
    return Var(std::move(n));
}

bool needs_grad(const Var &v) { return v.requires_grad(); }

void accumulate(const Var &v, const Tensor &g) {
    if (!v.requires_grad()) return;
    v.node()->grad_buffer().add_inplace(g);
}

void backward(const Var &root) {
    if (!root.defined() || root.value().size() != 1) throw ShapeError("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node *> order;
    std::unordered_set<Node *> seen;
    std::vector<std::pair<Node *, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            Node *p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node *n = *it;
        if (n->backward && !n->grad.empty()) n->backward(n->grad);
    }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var &a, const Var &b) {
    require(a.value().size() == b.value().size(), "add: size mismatch");
    Tensor y = a.value();
    y.add_inplace(b.value());
    const Var in[] = {a, b};
    return make_op(std::move(y), in, [a, b](const Tensor &g) {
        accumulate(a, g.reshaped(a.shape()));
        accumulate(b, g.reshaped(b.shape()));
    });
}

Var sub(const Var &a, const Var &b) {
    require(a.value().size() == b.value().size(), "sub: size mismatch");
    Tensor y = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    const Var in[] = {a, b};
    return make_op(std::move(y), in, [a, b](const Tensor &g) {
        accumulate(a, g.reshaped(a.shape()));
        if (needs_grad(b)) {
            Tensor gb(b.shape());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = -g[i];
            accumulate(b, gb);
        }
    });
}

Var mul(const Var &a, const Var &b) {
    require(a.value().size() == b.value().size(), "mul: size mismatch");
    Tensor y = a.value();
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    const Var in[] = {a, b};
    return make_op(std::move(y), in, [a, b](const Tensor &g) {
        if (needs_grad(a)) {
            Tensor ga(a.shape());
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * b.value()[i];
            accumulate(a, ga);
        }
        if (needs_grad(b)) {
            Tensor gb(b.shape());
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] = g[i] * a.value()[i];
            accumulate(b, gb);
        }
    });
}

Var scale(const Var &a, double s) {
    Tensor y = a.value();
    for (double &v : y.data()) v *= s;
    const Var in[] = {a};
    return make_op(std::move(y), in, [a, s](const Tensor &g) {
        Tensor ga(a.shape());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = g[i] * s;
        accumulate(a, ga);
    });
}

Var sum(const Var &a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const Var in[] = {a};
    return make_op(Tensor::scalar(s), in, [a](const Tensor &g) { accumulate(a, Tensor(a.shape(), g[0])); });
}

Var mean(const Var &a) {
    const std::size_t n = a.value().size();
    require(n > 0, "mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_squares(const Var &a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v * v;
    const Var in[] = {a};
    return make_op(Tensor::scalar(s), in, [a](const Tensor &g) {
        Tensor ga(a.shape());
        const auto av = a.value().data();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] = 2.0 * av[i] * g[0];
        accumulate(a, ga);
    });
}

Var mul_channels(const Var &x, const Var &w) {
    const Tensor &xv = x.value();
    const Tensor &wv = w.value();
    require(xv.rank() >= 1 && wv.rank() == xv.rank() && wv.dim(0) == 1, "mul_channels: weight must be (1, ...)");
    for (int d = 1; d < xv.rank(); ++d) require(xv.dim(d) == wv.dim(d), "mul_channels: spatial mismatch");
    const std::size_t n = wv.size();
    const int c = xv.dim(0);
    Tensor y = xv;
    for (int ch = 0; ch < c; ++ch) {
        double *yc = y.ptr() + static_cast<std::size_t>(ch) * n;
        for (std::size_t i = 0; i < n; ++i) yc[i] *= wv[i];
    }
    const Var in[] = {x, w};
    return make_op(std::move(y), in, [x, w, n, c](const Tensor &g) {
        if (needs_grad(x)) {
            Tensor gx(x.shape());
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < n; ++i) gx[ch * n + i] = g[ch * n + i] * w.value()[i];
            accumulate(x, gx);
        }
        if (needs_grad(w)) {
            Tensor gw(w.shape());
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < n; ++i) gw[i] += g[ch * n + i] * x.value()[ch * n + i];
            accumulate(w, gw);
        }
    });
}

Var leaky_relu(const Var &x, double negative_slope) {
    Tensor y = x.value();
    for (double &v : y.data())
        if (v < 0.0) v *= negative_slope;
    const Var in[] = {x};
    return make_op(std::move(y), in, [x, negative_slope](const Tensor &g) {
        Tensor gx(x.shape());
        const auto xv = x.value().data();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = xv[i] < 0.0 ? negative_slope * g[i] : g[i];
        accumulate(x, gx);
    });
}

// ---------------------------------------------------------------------------
// shape

Var reshape(const Var &a, std::vector<int> shape) {
    Tensor y = a.value().reshaped(std::move(shape));
    const Var in[] = {a};
    return make_op(std::move(y), in, [a](const Tensor &g) { accumulate(a, g.reshaped(a.shape())); });
}

Var concat(std::span<const Var> parts) {
    require(!parts.empty(), "concat: no inputs");
    const Tensor &first = parts.front().value();
    require(first.rank() >= 1, "concat: rank-0 input");
    std::vector<int> shape = first.shape();
    int total = 0;
    for (const Var &p : parts) {
        const Tensor &v = p.value();
        require(v.rank() == first.rank(), "concat: rank mismatch");
        for (int d = 1; d < v.rank(); ++d) require(v.dim(d) == first.dim(d), "concat: trailing dims mismatch");
        total += v.dim(0);
    }
    shape[0] = total;
    Tensor y(shape);
    std::size_t offset = 0;
    for (const Var &p : parts) {
        std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.value().size();
    }
    std::vector<Var> kept(parts.begin(), parts.end());
    return make_op(std::move(y), parts, [kept](const Tensor &g) {
        std::size_t off = 0;
        for (const Var &p : kept) {
            const std::size_t n = p.value().size();
            if (needs_grad(p)) {
                Tensor gp(p.shape());
                std::copy(g.data().begin() + static_cast<std::ptrdiff_t>(off),
                          g.data().begin() + static_cast<std::ptrdiff_t>(off + n), gp.data().begin());
                accumulate(p, gp);
            }
            off += n;
        }
    });
}

Var concat(const Var &a, const Var &b) {
    const Var parts[] = {a, b};
    return concat(parts);
}

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var &a, const Var &b, bool transpose_a, bool transpose_b) {
    const Tensor &av = a.value();
    const Tensor &bv = b.value();
    require(av.rank() == 2 && bv.rank() == 2, "matmul: rank-2 operands required");
    const int m = transpose_a ? av.dim(1) : av.dim(0);
    const int k = transpose_a ? av.dim(0) : av.dim(1);
    const int kb = transpose_b ? bv.dim(1) : bv.dim(0);
    const int n = transpose_b ? bv.dim(0) : bv.dim(1);
    if (k != kb) throw ShapeError("matmul: inner dimension mismatch " + av.shape_string() + " x " + bv.shape_string());
    Tensor y({m, n});
    gemm_acc(av.ptr(), transpose_a, bv.ptr(), transpose_b, y.ptr(), m, n, k);
    const Var in[] = {a, b};
    return make_op(std::move(y), in, [a, b, transpose_a, transpose_b, m, n, k](const Tensor &g) {
        // Y = A' B' with A' = op(A), B' = op(B).
        if (needs_grad(a)) {
            Tensor ga(a.shape());
            if (!transpose_a) {
                // dA = G B'^T : (m x n)(n x k)
                gemm_acc(g.ptr(), false, b.value().ptr(), !transpose_b, ga.ptr(), m, k, n);
            } else {
                // dA = B' G^T : (k x n)(n x m)
                gemm_acc(b.value().ptr(), transpose_b, g.ptr(), true, ga.ptr(), k, m, n);
            }
            accumulate(a, ga);
        }
        if (needs_grad(b)) {
            Tensor gb(b.shape());
            if (!transpose_b) {
                // dB = A'^T G : (k x m)(m x n)
                gemm_acc(a.value().ptr(), !transpose_a, g.ptr(), false, gb.ptr(), k, n, m);
            } else {
                // dB = G^T A' : (n x m)(m x k)
                gemm_acc(g.ptr(), true, a.value().ptr(), transpose_a, gb.ptr(), n, k, m);
            }
            accumulate(b, gb);
        }
    });
}

Var softmax_columns(const Var &logits) {
    const Tensor &lv = logits.value();
    require(lv.rank() == 2 && lv.dim(0) > 0 && lv.dim(1) > 0, "softmax_columns: non-empty rank-2 input required");
    const int rows = lv.dim(0), cols = lv.dim(1);
    Tensor y(lv.shape());
    for (int j = 0; j < cols; ++j) {
        double mx = lv[static_cast<std::size_t>(j)];
        for (int i = 1; i < rows; ++i) mx = std::max(mx, lv[static_cast<std::size_t>(i) * cols + j]);
        double s = 0.0;
        for (int i = 0; i < rows; ++i) {
            const double e = std::exp(lv[static_cast<std::size_t>(i) * cols + j] - mx);
            y[static_cast<std::size_t>(i) * cols + j] = e;
            s += e;
        }
        for (int i = 0; i < rows; ++i) y[static_cast<std::size_t>(i) * cols + j] /= s;
    }
    const Var in[] = {logits};
    Tensor ycopy = y;
    return make_op(std::move(y), in, [logits, ycopy, rows, cols](const Tensor &g) {
        Tensor gl(logits.shape());
        for (int j = 0; j < cols; ++j) {
            double dot = 0.0;
            for (int i = 0; i < rows; ++i) dot += g[static_cast<std::size_t>(i) * cols + j] * ycopy[static_cast<std::size_t>(i) * cols + j];
            for (int i = 0; i < rows; ++i) {
                const std::size_t idx = static_cast<std::size_t>(i) * cols + j;
                gl[idx] = ycopy[idx] * (g[idx] - dot);
            }
        }
        accumulate(logits, gl);
    });
}

// ---------------------------------------------------------------------------
// grid layers

Var conv3d(const Var &x, const Var &weight, const Var &bias, int dilation) {
    const GridDims in = grid_dims(x.value(), "conv3d");
    const Tensor &wv = weight.value();
    require(wv.rank() == 5, "conv3d: weight must be (Co, Ci, K, K, K)");
    const int co_n = wv.dim(0), ks = wv.dim(2);
    require(wv.dim(1) == in.c, "conv3d: weight input channels do not match x");
    require(ks % 2 == 1 && wv.dim(3) == ks && wv.dim(4) == ks, "conv3d: kernel must be cubic with odd size");
    require(dilation >= 1, "conv3d: dilation must be >= 1");
    if (bias.defined()) require(bias.value().size() == static_cast<std::size_t>(co_n), "conv3d: bias size mismatch");

    const std::size_t nvox = in.voxels();
    Tensor y({co_n, in.h, in.w, in.t});
    if (bias.defined()) {
        for (int co = 0; co < co_n; ++co)
            std::fill_n(y.ptr() + static_cast<std::size_t>(co) * nvox, nvox, bias.value()[static_cast<std::size_t>(co)]);
    }
    conv3d_pass(ConvPass::Forward, in, co_n, ks, dilation, x.value().ptr(), wv.ptr(), nullptr, y.ptr(), nullptr);

    std::vector<Var> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_op(std::move(y), inputs, [x, weight, bias, in, co_n, ks, dilation, nvox](const Tensor &g) {
        if (needs_grad(x)) {
            Tensor gx(x.shape());
            conv3d_pass(ConvPass::InputGrad, in, co_n, ks, dilation, nullptr, weight.value().ptr(), g.ptr(), gx.ptr(), nullptr);
            accumulate(x, gx);
        }
        if (needs_grad(weight)) {
            Tensor gw(weight.shape());
            conv3d_pass(ConvPass::WeightGrad, in, co_n, ks, dilation, x.value().ptr(), nullptr, g.ptr(), nullptr, gw.ptr());
            accumulate(weight, gw);
        }
        if (bias.defined() && needs_grad(bias)) {
            Tensor gb(bias.shape());
            for (int co = 0; co < co_n; ++co) {
                double s = 0.0;
                const double *gc = g.ptr() + static_cast<std::size_t>(co) * nvox;
                for (std::size_t i = 0; i < nvox; ++i) s += gc[i];
                gb[static_cast<std::size_t>(co)] = s;
            }
            accumulate(bias, gb);
        }
    });
}

Var avg_pool2(const Var &x) {
    const GridDims in = grid_dims(x.value(), "avg_pool2");
    if (in.h % 2 || in.w % 2 || in.t % 2) throw ShapeError("avg_pool2: spatial dims must be even, got " + x.value().shape_string());
    const int h = in.h / 2, w = in.w / 2, t = in.t / 2;
    Tensor y({in.c, h, w, t});
    const double *xv = x.value().ptr();
    auto xi = [&](int c, int i, int j, int k) {
        return ((static_cast<std::size_t>(c) * in.h + i) * in.w + j) * in.t + k;
    };
    std::size_t o = 0;
    for (int c = 0; c < in.c; ++c)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int k = 0; k < t; ++k, ++o) {
                    double s = 0.0;
                    for (int d = 0; d < 8; ++d) s += xv[xi(c, 2 * i + (d >> 2), 2 * j + ((d >> 1) & 1), 2 * k + (d & 1))];
                    y[o] = s * 0.125;
                }
    const Var inputs[] = {x};
    return make_op(std::move(y), inputs, [x, in, h, w, t](const Tensor &g) {
        Tensor gx(x.shape());
        auto xi2 = [&](int c, int i, int j, int k) {
            return ((static_cast<std::size_t>(c) * in.h + i) * in.w + j) * in.t + k;
        };
        std::size_t oo = 0;
        for (int c = 0; c < in.c; ++c)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    for (int k = 0; k < t; ++k, ++oo) {
                        const double v = g[oo] * 0.125;
                        for (int d = 0; d < 8; ++d) gx[xi2(c, 2 * i + (d >> 2), 2 * j + ((d >> 1) & 1), 2 * k + (d & 1))] += v;
                    }
        accumulate(x, gx);
    });
}

Var upsample2(const Var &x) {
    grid_dims(x.value(), "upsample2");
    Tensor y = upsample_axis(upsample_axis(upsample_axis(x.value(), 1), 2), 3);
    const Var in[] = {x};
    return make_op(std::move(y), in, [x](const Tensor &g) {
        accumulate(x, upsample_axis_adjoint(upsample_axis_adjoint(upsample_axis_adjoint(g, 3), 2), 1));
    });
}

} // namespace recureg::ad
