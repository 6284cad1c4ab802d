#include "recureg/fieldops.hpp"

#include <cmath>

#include "recureg/error.hpp"

namespace recureg::fieldops {

namespace {

struct AxisTap {
    int i0, i1;
    double w0, w1; // interpolation weights
    double d0, d1; // derivatives of the weights w.r.t. the coordinate
};

AxisTap axis_tap(double p, int n) {
    if (n == 1) return {0, 0, 1.0, 0.0, 0.0, 0.0};
    const double hi = static_cast<double>(n - 1);
    bool clamped = false;
    if (p < 0.0) {
        p = 0.0;
        clamped = true;
    } else if (p > hi) {
        p = hi;
        clamped = true;
    }
    int i0 = static_cast<int>(std::floor(p));
    if (i0 > n - 2) i0 = n - 2;
    const double f = p - i0;
    const double d = clamped ? 0.0 : 1.0;
    return {i0, i0 + 1, 1.0 - f, f, -d, d};
}

Shape3 grid_shape(const Tensor &t, const char *who) {
    if (t.rank() != 4) throw ShapeError(std::string(who) + ": expected (C, H, W, T), got " + t.shape_string());
    return {t.dim(1), t.dim(2), t.dim(3)};
}

void check_field(const Tensor &phi, const Shape3 &s, const char *who) {
    if (phi.rank() != 4 || phi.dim(0) != 3 || Shape3{phi.dim(1), phi.dim(2), phi.dim(3)} != s) {
        throw ShapeError(std::string(who) + ": field " + phi.shape_string() + " does not match grid " + s.str());
    }
}

Tensor warp_forward(const Tensor &src, const Tensor &phi) {
    const Shape3 s = grid_shape(src, "warp");
    check_field(phi, s, "warp");
    const int channels = src.dim(0);
    const std::size_t n = s.voxels();
    Tensor out(src.shape());
    std::size_t x = 0;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k, ++x) {
                const Point3 p{i + phi[x], j + phi[n + x], k + phi[2 * n + x]};
                const TrilinearStencil st = trilinear_stencil(s, p);
                for (int c = 0; c < channels; ++c) {
                    const double *plane = src.ptr() + static_cast<std::size_t>(c) * n;
                    double acc = 0.0;
                    for (int q = 0; q < 8; ++q) acc += st.weight[static_cast<std::size_t>(q)] * plane[st.index[static_cast<std::size_t>(q)]];
                    out[static_cast<std::size_t>(c) * n + x] = acc;
                }
            }
    return out;
}

void warp_backward(const Tensor &src, const Tensor &phi, const Tensor &g, Tensor *gsrc, Tensor *gphi) {
    const Shape3 s{src.dim(1), src.dim(2), src.dim(3)};
    const int channels = src.dim(0);
    const std::size_t n = s.voxels();
    std::size_t x = 0;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k, ++x) {
                const Point3 p{i + phi[x], j + phi[n + x], k + phi[2 * n + x]};
                const TrilinearStencil st = trilinear_stencil(s, p);
                for (int c = 0; c < channels; ++c) {
                    const double gv = g[static_cast<std::size_t>(c) * n + x];
                    if (gv == 0.0) continue;
                    const std::size_t off = static_cast<std::size_t>(c) * n;
                    if (gsrc) {
                        for (int q = 0; q < 8; ++q) (*gsrc)[off + st.index[static_cast<std::size_t>(q)]] += gv * st.weight[static_cast<std::size_t>(q)];
                    }
                    if (gphi) {
                        for (int a = 0; a < 3; ++a) {
                            double d = 0.0;
                            for (int q = 0; q < 8; ++q)
                                d += st.dweight[static_cast<std::size_t>(a)][static_cast<std::size_t>(q)] * src[off + st.index[static_cast<std::size_t>(q)]];
                            (*gphi)[static_cast<std::size_t>(a) * n + x] += gv * d;
                        }
                    }
                }
            }
}

std::size_t axis_stride(const Shape3 &s, int axis) {
    if (axis == 0) return static_cast<std::size_t>(s.w) * s.t;
    if (axis == 1) return static_cast<std::size_t>(s.t);
    return 1;
}

// Applies the difference stencil (adjoint = false) or its transpose.
void gradient_pass(const Tensor &in, Tensor &out, bool adjoint) {
    const Shape3 s{in.dim(1), in.dim(2), in.dim(3)};
    const int channels = adjoint ? in.dim(0) / 3 : in.dim(0);
    const std::size_t n = s.voxels();
    for (int c = 0; c < channels; ++c) {
        for (int a = 0; a < 3; ++a) {
            const int len = s[a];
            if (len < 2) continue;
            const std::size_t stride = axis_stride(s, a);
            const double *field = adjoint ? in.ptr() + (static_cast<std::size_t>(c) * 3 + a) * n : in.ptr() + static_cast<std::size_t>(c) * n;
            double *dst = adjoint ? out.ptr() + static_cast<std::size_t>(c) * n : out.ptr() + (static_cast<std::size_t>(c) * 3 + a) * n;
            std::size_t x = 0;
            for (int i = 0; i < s.h; ++i)
                for (int j = 0; j < s.w; ++j)
                    for (int k = 0; k < s.t; ++k, ++x) {
                        const int pos = a == 0 ? i : (a == 1 ? j : k);
                        std::size_t lo, hi;
                        double wgt;
                        if (pos == 0) {
                            lo = x;
                            hi = x + stride;
                            wgt = 1.0;
                        } else if (pos == len - 1) {
                            lo = x - stride;
                            hi = x;
                            wgt = 1.0;
                        } else {
                            lo = x - stride;
                            hi = x + stride;
                            wgt = 0.5;
                        }
                        if (!adjoint) {
                            dst[x] = wgt * (field[hi] - field[lo]);
                        } else {
                            const double g = field[x] * wgt;
                            dst[hi] += g;
                            dst[lo] -= g;
                        }
                    }
        }
    }
}

} // namespace

TrilinearStencil trilinear_stencil(const Shape3 &shape, const Point3 &p) {
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
        throw ValueError("trilinear_sample: non-finite position");
    }
    const AxisTap a = axis_tap(p[0], shape.h);
    const AxisTap b = axis_tap(p[1], shape.w);
    const AxisTap c = axis_tap(p[2], shape.t);
    TrilinearStencil st;
    for (int q = 0; q < 8; ++q) {
        const bool ua = q & 4, ub = q & 2, uc = q & 1;
        const int ii = ua ? a.i1 : a.i0, jj = ub ? b.i1 : b.i0, kk = uc ? c.i1 : c.i0;
        const double wa = ua ? a.w1 : a.w0, wb = ub ? b.w1 : b.w0, wc = uc ? c.w1 : c.w0;
        const double da = ua ? a.d1 : a.d0, db = ub ? b.d1 : b.d0, dc = uc ? c.d1 : c.d0;
        const auto qi = static_cast<std::size_t>(q);
        st.index[qi] = shape.index(ii, jj, kk);
        st.weight[qi] = wa * wb * wc;
        st.dweight[0][qi] = da * wb * wc;
        st.dweight[1][qi] = wa * db * wc;
        st.dweight[2][qi] = wa * wb * dc;
    }
    return st;
}

double trilinear_sample(const Volume &v, const Point3 &p) {
    const TrilinearStencil st = trilinear_stencil(v.shape(), p);
    double acc = 0.0;
    for (std::size_t q = 0; q < 8; ++q) acc += st.weight[q] * static_cast<double>(v[st.index[q]]);
    return acc;
}

Point3 trilinear_sample_vector(const DisplacementField &u, const Point3 &p) {
    const TrilinearStencil st = trilinear_stencil(u.shape(), p);
    Point3 out{0.0, 0.0, 0.0};
    const auto d = u.data();
    for (std::size_t q = 0; q < 8; ++q)
        for (std::size_t c = 0; c < 3; ++c) out[c] += st.weight[q] * static_cast<double>(d[st.index[q] * 3 + c]);
    return out;
}

Volume warp(const Volume &v, const DisplacementField &phi) {
    if (v.shape() != phi.shape()) throw ShapeError("warp: volume " + v.shape().str() + " vs field " + phi.shape().str());
    return Volume::from_tensor(warp_forward(v.to_tensor(), phi.to_tensor()), v.spacing());
}

DisplacementField compose(const DisplacementField &u_prev, const DisplacementField &v_res) {
    if (u_prev.shape() != v_res.shape()) throw ShapeError("compose: field shapes differ");
    const Tensor v = v_res.to_tensor();
    Tensor out = warp_forward(u_prev.to_tensor(), v);
    out.add_inplace(v);
    return DisplacementField::from_tensor(out);
}

Tensor spatial_gradient(const Tensor &grid) {
    const Shape3 s = grid_shape(grid, "spatial_gradient");
    validate_shape(s, "spatial_gradient");
    Tensor out({grid.dim(0) * 3, s.h, s.w, s.t});
    gradient_pass(grid, out, false);
    return out;
}

Tensor spatial_gradient(const Volume &v) { return spatial_gradient(v.to_tensor()); }
Tensor spatial_gradient(const DisplacementField &phi) { return spatial_gradient(phi.to_tensor()); }

Tensor jacobian_determinant(const DisplacementField &phi) {
    const Shape3 s = phi.shape();
    const Tensor g = spatial_gradient(phi.to_tensor());
    const std::size_t n = s.voxels();
    Tensor det({1, s.h, s.w, s.t});
    for (std::size_t x = 0; x < n; ++x) {
        // J[r][c] = delta_rc + d u_r / d x_c
        double m[3][3];
        for (std::size_t r = 0; r < 3; ++r)
            for (std::size_t c = 0; c < 3; ++c) m[r][c] = (r == c ? 1.0 : 0.0) + g[(r * 3 + c) * n + x];
        det[x] = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                 m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    }
    return det;
}

bool is_interior(const Shape3 &s, int i, int j, int k) {
    auto inside = [](int p, int len) { return len < 3 || (p > 0 && p < len - 1); };
    return inside(i, s.h) && inside(j, s.w) && inside(k, s.t);
}

std::size_t count_negative_jacobian(const DisplacementField &phi, const LabelMask &region) {
    const Shape3 s = phi.shape();
    if (region.shape() != s) throw ShapeError("count_negative_jacobian: mask " + region.shape().str() + " vs field " + s.str());
    const Tensor det = jacobian_determinant(phi);
    std::size_t count = 0;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                const std::size_t x = s.index(i, j, k);
                if (region[x] && det[x] < 0.0 && is_interior(s, i, j, k)) ++count;
            }
    return count;
}

namespace {

template <typename Fn>
void for_each_nearest(const Shape3 &s, const DisplacementField &phi, Fn &&fn) {
    const auto d = phi.data();
    auto nearest = [](double p, int len) {
        const double r = std::floor(p + 0.5);
        if (r < 0.0) return 0;
        if (r > len - 1) return len - 1;
        return static_cast<int>(r);
    };
    std::size_t x = 0;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k, ++x) {
                const int ii = nearest(i + static_cast<double>(d[x * 3]), s.h);
                const int jj = nearest(j + static_cast<double>(d[x * 3 + 1]), s.w);
                const int kk = nearest(k + static_cast<double>(d[x * 3 + 2]), s.t);
                fn(x, s.index(ii, jj, kk));
            }
}

} // namespace

LabelMap warp_labels(const LabelMap &labels, const DisplacementField &phi) {
    if (labels.shape() != phi.shape()) throw ShapeError("warp_labels: shape mismatch");
    std::vector<std::uint8_t> out(labels.shape().voxels());
    const auto src = labels.data();
    for_each_nearest(labels.shape(), phi, [&](std::size_t dst, std::size_t from) { out[dst] = src[from]; });
    return LabelMap(labels.shape(), std::move(out));
}

LabelMask warp_mask(const LabelMask &mask, const DisplacementField &phi) {
    if (mask.shape() != phi.shape()) throw ShapeError("warp_mask: shape mismatch");
    std::vector<std::uint8_t> out(mask.shape().voxels());
    const auto src = mask.data();
    for_each_nearest(mask.shape(), phi, [&](std::size_t dst, std::size_t from) { out[dst] = src[from]; });
    return LabelMask(mask.shape(), std::move(out));
}

LabelMask threshold_mask(const Volume &soft, double level) {
    std::vector<std::uint8_t> out(soft.size());
    for (std::size_t i = 0; i < soft.size(); ++i) out[i] = soft[i] >= level ? 1 : 0;
    return LabelMask(soft.shape(), std::move(out));
}

// ---------------------------------------------------------------------------

ad::Var warp(const ad::Var &src, const ad::Var &phi) {
    Tensor out = warp_forward(src.value(), phi.value());
    const ad::Var in[] = {src, phi};
    return ad::make_op(std::move(out), in, [src, phi](const Tensor &g) {
        Tensor gsrc, gphi;
        if (ad::needs_grad(src)) gsrc = Tensor(src.shape());
        if (ad::needs_grad(phi)) gphi = Tensor(phi.shape());
        warp_backward(src.value(), phi.value(), g, ad::needs_grad(src) ? &gsrc : nullptr,
                      ad::needs_grad(phi) ? &gphi : nullptr);
        if (ad::needs_grad(src)) ad::accumulate(src, gsrc);
        if (ad::needs_grad(phi)) ad::accumulate(phi, gphi);
    });
}

ad::Var compose(const ad::Var &u_prev, const ad::Var &v_res) {
    if (!u_prev.value().same_shape(v_res.value())) throw ShapeError("compose: field shapes differ");
    return ad::add(v_res, warp(u_prev, v_res));
}

ad::Var spatial_gradient(const ad::Var &grid) {
    Tensor out = spatial_gradient(grid.value());
    const ad::Var in[] = {grid};
    return ad::make_op(std::move(out), in, [grid](const Tensor &g) {
        Tensor gx(grid.shape());
        gradient_pass(g, gx, true);
        ad::accumulate(grid, gx);
    });
}

} // namespace recureg::fieldops
