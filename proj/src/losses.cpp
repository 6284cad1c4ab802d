#include "recureg/losses.hpp"

#include <cmath>

#include "recureg/error.hpp"
#include "recureg/fieldops.hpp"

namespace recureg::losses {

namespace {

void check_same(const Tensor &a, const Tensor &b, const char *who) {
    if (!a.same_shape(b)) throw ShapeError(std::string(who) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

void check_window(int window) {
    if (window < 3 || window % 2 == 0) throw ValueError("local_ncc: window must be odd and >= 3");
}

// Sum over the box [x - r, x + r] clipped to the grid, separably along each
// axis of a single-channel (H, W, T) block.
std::vector<double> box_sum(const std::vector<double> &in, const Shape3 &s, int r) {
    std::vector<double> cur = in, next(in.size());
    const int dims[3] = {s.h, s.w, s.t};
    const std::size_t strides[3] = {static_cast<std::size_t>(s.w) * s.t, static_cast<std::size_t>(s.t), 1};
    for (int a = 0; a < 3; ++a) {
        const int len = dims[a];
        const std::size_t stride = strides[a];
        std::vector<double> prefix(static_cast<std::size_t>(len) + 1);
        // Iterate over every line along axis a.
        const std::size_t lines = s.voxels() / static_cast<std::size_t>(len);
        for (std::size_t line = 0; line < lines; ++line) {
            // Decompose line index into the base offset of that line.
            std::size_t base;
            if (a == 0) base = line;
            else if (a == 1) base = (line / s.t) * static_cast<std::size_t>(s.w) * s.t + line % s.t;
            else base = line * static_cast<std::size_t>(s.t);
            prefix[0] = 0.0;
            for (int i = 0; i < len; ++i) prefix[static_cast<std::size_t>(i) + 1] = prefix[static_cast<std::size_t>(i)] + cur[base + i * stride];
            for (int i = 0; i < len; ++i) {
                const int lo = std::max(0, i - r), hi = std::min(len - 1, i + r);
                next[base + i * stride] = prefix[static_cast<std::size_t>(hi) + 1] - prefix[static_cast<std::size_t>(lo)];
            }
        }
        std::swap(cur, next);
    }
    return cur;
}

struct NccState {
    std::vector<double> cnt, sa, sb, cross, va, vb, denom, cc;
};

NccState ncc_state(const double *a, const double *b, const Shape3 &s, int r) {
    const std::size_t n = s.voxels();
    std::vector<double> ones(n, 1.0), va(a, a + n), vb(b, b + n), aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    NccState st;
    st.cnt = box_sum(ones, s, r);
    st.sa = box_sum(va, s, r);
    st.sb = box_sum(vb, s, r);
    const auto saa = box_sum(aa, s, r), sbb = box_sum(bb, s, r), sab = box_sum(ab, s, r);
    st.cross.resize(n);
    st.va.resize(n);
    st.vb.resize(n);
    st.denom.resize(n);
    st.cc.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        st.cross[i] = sab[i] - st.sa[i] * st.sb[i] / st.cnt[i];
        st.va[i] = saa[i] - st.sa[i] * st.sa[i] / st.cnt[i];
        st.vb[i] = sbb[i] - st.sb[i] * st.sb[i] / st.cnt[i];
        st.denom[i] = st.va[i] * st.vb[i] + kNccEpsilon;
        st.cc[i] = st.cross[i] * st.cross[i] / st.denom[i];
    }
    return st;
}

} // namespace

// ---------------------------------------------------------------------------
// differentiable

ad::Var mse(const ad::Var &a, const ad::Var &b) {
    check_same(a.value(), b.value(), "mse");
    if (a.value().empty()) throw ShapeError("mse: empty input");
    return ad::scale(ad::sum_squares(ad::sub(a, b)), 1.0 / static_cast<double>(a.value().size()));
}

ad::Var local_ncc(const ad::Var &a, const ad::Var &b, int window) {
    check_window(window);
    check_same(a.value(), b.value(), "local_ncc");
    const Tensor &av = a.value();
    if (av.rank() != 4) throw ShapeError("local_ncc: expected (C, H, W, T)");
    const Shape3 s{av.dim(1), av.dim(2), av.dim(3)};
    const int r = window / 2;
    const std::size_t n = s.voxels();
    const int channels = av.dim(0);
    const double total_voxels = static_cast<double>(av.size());

    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
        const NccState st = ncc_state(av.ptr() + c * n, b.value().ptr() + c * n, s, r);
        for (double v : st.cc) acc += v;
    }
    const ad::Var in[] = {a, b};
    return ad::make_op(Tensor::scalar(-acc / total_voxels), in, [a, b, s, r, n, channels, total_voxels](const Tensor &g) {
        const double scale = -g[0] / total_voxels;
        Tensor ga(a.shape()), gb(b.shape());
        for (int c = 0; c < channels; ++c) {
            const double *pa = a.value().ptr() + c * n;
            const double *pb = b.value().ptr() + c * n;
            const NccState st = ncc_state(pa, pb, s, r);
            std::vector<double> alpha(n), alpha_mb(n), alpha_ma(n), beta_a(n), beta_a_ma(n), beta_b(n), beta_b_mb(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double ma = st.sa[i] / st.cnt[i], mb = st.sb[i] / st.cnt[i];
                alpha[i] = 2.0 * st.cross[i] / st.denom[i];
                alpha_mb[i] = alpha[i] * mb;
                alpha_ma[i] = alpha[i] * ma;
                beta_a[i] = 2.0 * st.cc[i] * st.vb[i] / st.denom[i];
                beta_a_ma[i] = beta_a[i] * ma;
                beta_b[i] = 2.0 * st.cc[i] * st.va[i] / st.denom[i];
                beta_b_mb[i] = beta_b[i] * mb;
            }
            const auto s_alpha = box_sum(alpha, s, r), s_alpha_mb = box_sum(alpha_mb, s, r), s_alpha_ma = box_sum(alpha_ma, s, r);
            const auto s_beta_a = box_sum(beta_a, s, r), s_beta_a_ma = box_sum(beta_a_ma, s, r);
            const auto s_beta_b = box_sum(beta_b, s, r), s_beta_b_mb = box_sum(beta_b_mb, s, r);
            for (std::size_t i = 0; i < n; ++i) {
                ga[c * n + i] = scale * (pb[i] * s_alpha[i] - s_alpha_mb[i] - pa[i] * s_beta_a[i] + s_beta_a_ma[i]);
                gb[c * n + i] = scale * (pa[i] * s_alpha[i] - s_alpha_ma[i] - pb[i] * s_beta_b[i] + s_beta_b_mb[i]);
            }
        }
        ad::accumulate(a, ga);
        ad::accumulate(b, gb);
    });
}

ad::Var smoothness_l2(const ad::Var &phi) { return ad::sum_squares(fieldops::spatial_gradient(phi)); }

ad::Var edge_weighted_smoothness(const ad::Var &phi, const Tensor &weight) {
    return ad::sum_squares(ad::mul_channels(fieldops::spatial_gradient(phi), ad::constant(weight)));
}

LossReport LossTerms::report() const {
    return {total.value()[0], similarity.value()[0], regularization.value()[0], lambda};
}

LossTerms loss_synthetic(const ad::Var &phi, const ad::Var &phi_gt, double lambda) {
    check_same(phi.value(), phi_gt.value(), "loss_synthetic");
    LossTerms t;
    t.similarity = ad::sum_squares(ad::sub(phi, phi_gt));
    t.regularization = smoothness_l2(phi);
    t.lambda = lambda;
    t.total = ad::add(t.similarity, ad::scale(t.regularization, lambda));
    return t;
}

LossTerms loss_unsupervised(const ad::Var &source, const ad::Var &target, const ad::Var &phi, const ModelConfig &cfg) {
    check_same(source.value(), target.value(), "loss_unsupervised");
    const Tensor &tv = target.value();
    if (tv.rank() != 4 || tv.dim(0) != 1) throw ShapeError("loss_unsupervised: expected single-channel images");
    if (phi.value().rank() != 4 || phi.dim(0) != 3 || phi.dim(1) != tv.dim(1) || phi.dim(2) != tv.dim(2) || phi.dim(3) != tv.dim(3)) {
        throw ShapeError("loss_unsupervised: field does not match images");
    }
    const ad::Var warped = fieldops::warp(source, phi);
    LossTerms t;
    t.similarity = cfg.similarity == Similarity::Mse ? mse(warped, target) : local_ncc(warped, target, cfg.ncc_window);
    t.regularization = edge_weighted_smoothness(phi, edge_weight(Volume::from_tensor(tv)));
    t.lambda = cfg.lambda_unsup;
    t.total = ad::add(t.similarity, ad::scale(t.regularization, cfg.lambda_unsup));
    return t;
}

// ---------------------------------------------------------------------------
// value level

double mse(const Volume &a, const Volume &b) {
    if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch");
    ad::NoGradGuard guard;
    return mse(ad::constant(a.to_tensor()), ad::constant(b.to_tensor())).value()[0];
}

double local_ncc(const Volume &a, const Volume &b, int window) {
    if (a.shape() != b.shape()) throw ShapeError("local_ncc: shape mismatch");
    ad::NoGradGuard guard;
    return local_ncc(ad::constant(a.to_tensor()), ad::constant(b.to_tensor()), window).value()[0];
}

double smoothness_l2(const DisplacementField &phi) {
    ad::NoGradGuard guard;
    return smoothness_l2(ad::constant(phi.to_tensor())).value()[0];
}

Tensor edge_weight(const Volume &target) {
    const Tensor g = fieldops::spatial_gradient(target);
    const std::size_t n = target.shape().voxels();
    Tensor w({1, target.shape().h, target.shape().w, target.shape().t});
    for (std::size_t x = 0; x < n; ++x) {
        const double m = g[x] * g[x] + g[n + x] * g[n + x] + g[2 * n + x] * g[2 * n + x];
        w[x] = std::exp(-m);
    }
    return w;
}

LossReport loss_synthetic(const DisplacementField &phi, const DisplacementField &phi_gt, double lambda) {
    if (phi.shape() != phi_gt.shape()) throw ShapeError("loss_synthetic: shape mismatch");
    ad::NoGradGuard guard;
    return loss_synthetic(ad::constant(phi.to_tensor()), ad::constant(phi_gt.to_tensor()), lambda).report();
}

LossReport loss_unsupervised(const Volume &source, const Volume &target, const DisplacementField &phi, const ModelConfig &cfg) {
    if (source.shape() != target.shape() || source.shape() != phi.shape()) throw ShapeError("loss_unsupervised: shape mismatch");
    ad::NoGradGuard guard;
    return loss_unsupervised(ad::constant(source.to_tensor()), ad::constant(target.to_tensor()), ad::constant(phi.to_tensor()), cfg)
        .report();
}

} // namespace recureg::losses
