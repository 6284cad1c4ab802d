#include "recureg/attention.hpp"

#include <cmath>

#include "recureg/error.hpp"

namespace recureg::attention {

namespace {

void check_grid(const Tensor &t, const char *who) {
    if (t.rank() != 4) throw ShapeError(std::string(who) + ": expected (c, h, w, t), got " + t.shape_string());
    if (t.size() == 0) throw ShapeError(std::string(who) + ": empty grid");
}

int positions(const Tensor &t) { return t.dim(1) * t.dim(2) * t.dim(3); }

ad::Var flat(const ad::Var &f) { return ad::reshape(f, {f.dim(0), positions(f.value())}); }

} // namespace

int ProjectionParams::input_channels() const { return heads.empty() ? 0 : heads.front().query.dim(1); }
int ProjectionParams::head_channels() const { return heads.empty() ? 0 : heads.front().query.dim(0); }

void ProjectionParams::validate() const {
    if (heads.empty()) throw ValueError("ProjectionParams: no heads");
    const int c = input_channels(), ch = head_channels();
    for (const HeadProjection &h : heads) {
        for (const Tensor *w : {&h.query, &h.key, &h.value}) {
            if (w->rank() != 2 || w->dim(0) != ch || w->dim(1) != c) throw ShapeError("ProjectionParams: inconsistent head matrix");
            if (!w->all_finite()) throw ValueError("ProjectionParams: non-finite weight");
        }
    }
    if (merge.rank() != 2 || merge.dim(1) != ch * static_cast<int>(heads.size())) {
        throw ShapeError("ProjectionParams: merge matrix must be (c_out, heads * c_head)");
    }
    if (!merge.all_finite()) throw ValueError("ProjectionParams: non-finite weight");
}

ProjectionVars bind(const ProjectionParams &p, bool requires_grad) {
    ProjectionVars v;
    for (const HeadProjection &h : p.heads) {
        v.heads.push_back({ad::leaf(h.query, requires_grad), ad::leaf(h.key, requires_grad), ad::leaf(h.value, requires_grad)});
    }
    v.merge = ad::leaf(p.merge, requires_grad);
    return v;
}

// ---------------------------------------------------------------------------

ad::Var project(const ad::Var &f, const ad::Var &w) {
    check_grid(f.value(), "project");
    const Tensor &wv = w.value();
    if (wv.rank() != 2 || wv.dim(1) != f.dim(0)) {
        throw ShapeError("project: matrix " + wv.shape_string() + " does not match " + std::to_string(f.dim(0)) + " channels");
    }
    const ad::Var y = ad::matmul(w, flat(f));
    return ad::reshape(y, {wv.dim(0), f.dim(1), f.dim(2), f.dim(3)});
}

ad::Var indicator_matrix(const ad::Var &f_k, const ad::Var &f_q, const HeadVars &head) {
    check_grid(f_k.value(), "indicator_matrix");
    check_grid(f_q.value(), "indicator_matrix");
    if (f_k.dim(0) != f_q.dim(0)) throw ShapeError("indicator_matrix: key and query channel counts differ");
    const ad::Var q = flat(project(f_k, head.query)); // (c_head, n_k)
    const ad::Var k = flat(project(f_q, head.key));   // (c_head, n_q)
    const double s = 1.0 / std::sqrt(static_cast<double>(head.query.dim(0)));
    return ad::softmax_columns(ad::scale(ad::matmul(q, k, true, false), s));
}

ad::Var mutual_attention(const ad::Var &f_k, const ad::Var &f_q, const HeadVars &head) {
    const ad::Var phi = indicator_matrix(f_k, f_q, head);
    const ad::Var v = flat(project(f_k, head.value)); // (c_head, n_k)
    const ad::Var out = ad::matmul(v, phi);            // (c_head, n_q)
    return ad::reshape(out, {out.dim(0), f_q.dim(1), f_q.dim(2), f_q.dim(3)});
}

ad::Var multi_head_attention(const ad::Var &f_k, const ad::Var &f_q, const ProjectionVars &p) {
    if (p.heads.empty()) throw ValueError("multi_head_attention: no heads");
    std::vector<ad::Var> per_head;
    per_head.reserve(p.heads.size());
    for (const HeadVars &h : p.heads) per_head.push_back(mutual_attention(f_k, f_q, h));
    const ad::Var stacked = per_head.size() == 1 ? per_head.front() : ad::concat(per_head);
    return project(stacked, p.merge);
}

std::pair<ad::Var, ad::Var> bidirectional_exchange(const ad::Var &f_s, const ad::Var &f_t, const ProjectionVars &p) {
    if (f_s.shape() != f_t.shape()) throw ShapeError("bidirectional_exchange: stream shapes differ");
    ad::Var t_to_s = multi_head_attention(f_t, f_s, p);
    ad::Var s_to_t = multi_head_attention(f_s, f_t, p);
    return {t_to_s, s_to_t};
}

// ---------------------------------------------------------------------------

namespace {

const HeadProjection &head_at(const ProjectionParams &p, int head) {
    if (head < 0 || static_cast<std::size_t>(head) >= p.heads.size()) throw ValueError("attention: head index out of range");
    return p.heads[static_cast<std::size_t>(head)];
}

HeadVars constant_head(const HeadProjection &h) {
    return {ad::constant(h.query), ad::constant(h.key), ad::constant(h.value)};
}

void check_channels(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p) {
    if (f_k.channels() != f_q.channels()) throw ShapeError("attention: key and query channel counts differ");
    if (f_k.channels() != p.input_channels()) throw ShapeError("attention: projection input channels do not match features");
}

} // namespace

FeatureGrid project(const FeatureGrid &f, const Tensor &w) {
    ad::NoGradGuard guard;
    return FeatureGrid(project(ad::constant(f.tensor()), ad::constant(w)).value());
}

IndicatorMatrix indicator_matrix(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p, int head) {
    check_channels(f_k, f_q, p);
    ad::NoGradGuard guard;
    return IndicatorMatrix(
        indicator_matrix(ad::constant(f_k.tensor()), ad::constant(f_q.tensor()), constant_head(head_at(p, head))).value());
}

FeatureGrid mutual_attention(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p, int head) {
    check_channels(f_k, f_q, p);
    ad::NoGradGuard guard;
    return FeatureGrid(
        mutual_attention(ad::constant(f_k.tensor()), ad::constant(f_q.tensor()), constant_head(head_at(p, head))).value());
}

FeatureGrid multi_head_attention(const FeatureGrid &f_k, const FeatureGrid &f_q, const ProjectionParams &p) {
    check_channels(f_k, f_q, p);
    p.validate();
    ad::NoGradGuard guard;
    return FeatureGrid(multi_head_attention(ad::constant(f_k.tensor()), ad::constant(f_q.tensor()), bind(p, false)).value());
}

std::pair<FeatureGrid, FeatureGrid> bidirectional_exchange(const FeatureGrid &f_s, const FeatureGrid &f_t,
                                                           const ProjectionParams &p) {
    if (f_s.tensor().shape() != f_t.tensor().shape()) throw ShapeError("bidirectional_exchange: stream shapes differ");
    check_channels(f_s, f_t, p);
    p.validate();
    ad::NoGradGuard guard;
    auto [a, b] = bidirectional_exchange(ad::constant(f_s.tensor()), ad::constant(f_t.tensor()), bind(p, false));
    return {FeatureGrid(a.value()), FeatureGrid(b.value())};
}

} // namespace recureg::attention
