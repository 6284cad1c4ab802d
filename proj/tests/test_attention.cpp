#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "recureg/attention.hpp"
#include "recureg/error.hpp"

using namespace recureg;
namespace at = recureg::attention;

namespace {

at::ProjectionParams random_params(std::mt19937_64 &rng, int c, int c_head, int heads, int c_out) {
    at::ProjectionParams p;
    for (int h = 0; h < heads; ++h) {
        p.heads.push_back({oracle::random_tensor(rng, {c_head, c}), oracle::random_tensor(rng, {c_head, c}),
                           oracle::random_tensor(rng, {c_head, c})});
    }
    p.merge = oracle::random_tensor(rng, {c_out, c_head * heads});
    return p;
}

FeatureGrid random_grid(std::mt19937_64 &rng, int c, Shape3 s, double scale = 1.0) {
    return FeatureGrid(oracle::random_tensor(rng, {c, s.h, s.w, s.t}, -scale, scale));
}

// Reorders voxel columns: out column j = in column perm[j].
FeatureGrid permute(const FeatureGrid &f, const std::vector<std::size_t> &perm) {
    const Tensor &t = f.tensor();
    const std::size_t n = f.positions();
    Tensor out(t.shape());
    for (int c = 0; c < f.channels(); ++c)
        for (std::size_t j = 0; j < n; ++j) out[c * n + j] = t[c * n + perm[j]];
    return FeatureGrid(out);
}

// Direct evaluation of a single head.
Tensor head_oracle(const FeatureGrid &fk, const FeatureGrid &fq, const at::HeadProjection &h) {
    const int c = fk.channels(), ch = h.query.dim(0);
    const std::size_t nk = fk.positions(), nq = fq.positions();
    auto proj = [&](const Tensor &w, const FeatureGrid &f, int row, std::size_t col) {
        double s = 0;
        for (int i = 0; i < c; ++i) s += w[static_cast<std::size_t>(row * c + i)] * f.tensor()[i * f.positions() + col];
        return s;
    };
    Tensor out({ch, fq.tensor().dim(1), fq.tensor().dim(2), fq.tensor().dim(3)});
    for (std::size_t q = 0; q < nq; ++q) {
        std::vector<double> logit(nk);
        for (std::size_t k = 0; k < nk; ++k) {
            double s = 0;
            for (int r = 0; r < ch; ++r) s += proj(h.query, fk, r, k) * proj(h.key, fq, r, q);
            logit[k] = s / std::sqrt(double(ch));
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0;
        for (double &l : logit) z += (l = std::exp(l - mx));
        for (int r = 0; r < ch; ++r) {
            double acc = 0;
            for (std::size_t k = 0; k < nk; ++k) acc += proj(h.value, fk, r, k) * logit[k] / z;
            out[r * nq + q] = acc;
        }
    }
    return out;
}

} // namespace

TEST_CASE("single-head retrieval matches the direct formula") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_params(rng, 4, 2, 1, 4);
        const FeatureGrid fk = random_grid(rng, 4, {2, 3, 2}), fq = random_grid(rng, 4, {3, 1, 2});
        const Tensor got = at::mutual_attention(fk, fq, p, 0).tensor();
        const Tensor want = head_oracle(fk, fq, p.heads[0]);
        REQUIRE(got.shape() == want.shape());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("indicator matrix is column-stochastic") {
    std::mt19937_64 rng(32);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = random_params(rng, 6, 3, 2, 6);
        // Large feature scale makes the softmax nearly one-hot.
        const FeatureGrid fk = random_grid(rng, 6, {2, 2, 3}, trial % 2 ? 10.0 : 1.0);
        const FeatureGrid fq = random_grid(rng, 6, {3, 2, 1}, 1.0);
        const IndicatorMatrix m = at::indicator_matrix(fk, fq, p, trial % 2);
        CHECK(m.keys() == 12);
        CHECK(m.queries() == 6);
        for (int q = 0; q < m.queries(); ++q) {
            double s = 0;
            for (int k = 0; k < m.keys(); ++k) {
                CHECK(m(k, q) >= 0.0);
                s += m(k, q);
            }
            CHECK(std::abs(s - 1.0) < 1e-5);
        }
    }
}

TEST_CASE("retrieved features are convex combinations of value vectors") {
    std::mt19937_64 rng(33);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = random_params(rng, 4, 2, 2, 4);
        const FeatureGrid fk = random_grid(rng, 4, {2, 2, 2}, 3.0), fq = random_grid(rng, 4, {2, 1, 2});
        const int head = trial % 2;
        const Tensor v = at::project(fk, p.heads[static_cast<std::size_t>(head)].value).tensor();
        const Tensor out = at::mutual_attention(fk, fq, p, head).tensor();
        for (int r = 0; r < 2; ++r) {
            const auto row = v.data().subspan(static_cast<std::size_t>(r) * 8, 8);
            const double lo = *std::min_element(row.begin(), row.end()), hi = *std::max_element(row.begin(), row.end());
            for (std::size_t q = 0; q < 4; ++q) {
                CHECK(out[r * 4 + q] >= lo - 1e-12);
                CHECK(out[r * 4 + q] <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("permutation equivariance over positions") {
    std::mt19937_64 rng(34);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = random_params(rng, 4, 2, 2, 4);
        const Shape3 s{2, 3, 2};
        const FeatureGrid fk = random_grid(rng, 4, s), fq = random_grid(rng, 4, s);
        std::vector<std::size_t> perm(s.voxels());
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);

        const Tensor base = at::multi_head_attention(fk, fq, p).tensor();
        // Permuting queries permutes the output columns.
        const Tensor pq = at::multi_head_attention(fk, permute(fq, perm), p).tensor();
        // Permuting keys leaves the output unchanged.
        const Tensor pk = at::multi_head_attention(permute(fk, perm), fq, p).tensor();
        const std::size_t n = s.voxels();
        for (int c = 0; c < 4; ++c)
            for (std::size_t j = 0; j < n; ++j) {
                CHECK(pq[c * n + j] == doctest::Approx(base[c * n + perm[j]]).epsilon(1e-10));
                CHECK(pk[c * n + j] == doctest::Approx(base[c * n + j]).epsilon(1e-10));
            }
    }
}

TEST_CASE("bidirectional exchange shares weights across directions") {
    std::mt19937_64 rng(35);
    const auto p = random_params(rng, 4, 2, 2, 4);
    const FeatureGrid fs = random_grid(rng, 4, {2, 2, 2}), ft = random_grid(rng, 4, {2, 2, 2});
    const auto [t_to_s, s_to_t] = at::bidirectional_exchange(fs, ft, p);
    const Tensor want_ts = at::multi_head_attention(ft, fs, p).tensor();
    const Tensor want_st = at::multi_head_attention(fs, ft, p).tensor();
    for (std::size_t i = 0; i < want_ts.size(); ++i) {
        CHECK(t_to_s.tensor()[i] == want_ts[i]);
        CHECK(s_to_t.tensor()[i] == want_st[i]);
    }
    const auto [a, b] = at::bidirectional_exchange(ft, fs, p);
    for (std::size_t i = 0; i < want_ts.size(); ++i) {
        CHECK(a.tensor()[i] == s_to_t.tensor()[i]);
        CHECK(b.tensor()[i] == t_to_s.tensor()[i]);
    }
}

TEST_CASE("attention shape errors") {
    std::mt19937_64 rng(36);
    const auto p = random_params(rng, 4, 2, 2, 4);
    CHECK_THROWS_AS(at::mutual_attention(random_grid(rng, 3, {2, 2, 2}), random_grid(rng, 4, {2, 2, 2}), p, 0), ShapeError);
    auto bad = p;
    bad.merge = Tensor({4, 3});
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    CHECK_NOTHROW(p.validate());
}

TEST_CASE("mutual attention gradient matches finite differences") {
    std::mt19937_64 rng(37);
    auto p = random_params(rng, 4, 2, 2, 4);
    Tensor fk = oracle::random_tensor(rng, {4, 2, 2, 2}), fq = oracle::random_tensor(rng, {4, 2, 1, 2});
    const Tensor w = oracle::random_tensor(rng, {4, 2, 1, 2});
    auto loss = [&](const ad::Var &a, const ad::Var &b, const at::ProjectionVars &pv) {
        return ad::sum(ad::mul(at::multi_head_attention(a, b, pv), ad::constant(w)));
    };
    const ad::Var a = ad::leaf(fk), b = ad::leaf(fq);
    const at::ProjectionVars pv = at::bind(p, true);
    ad::backward(loss(a, b, pv));
    auto value = [&] {
        ad::NoGradGuard guard;
        return loss(ad::constant(fk), ad::constant(fq), at::bind(p, false)).value()[0];
    };
    std::uniform_int_distribution<std::size_t> pick_k(0, fk.size() - 1), pick_q(0, fq.size() - 1), pick_w(0, 7);
    const Tensor gk = a.grad(), gq = b.grad(), gw = pv.heads[1].query.grad(), gv = pv.heads[0].value.grad();
    for (int probe = 0; probe < 50; ++probe) {
        const std::size_t i = pick_k(rng), j = pick_q(rng), k = pick_w(rng);
        CHECK(oracle::relative_error(gk[i], oracle::central_difference(fk, i, value, 1e-6)) < 1e-3);
        CHECK(oracle::relative_error(gq[j], oracle::central_difference(fq, j, value, 1e-6)) < 1e-3);
        CHECK(oracle::relative_error(gw[k], oracle::central_difference(p.heads[1].query, k, value, 1e-6)) < 1e-3);
        CHECK(oracle::relative_error(gv[k], oracle::central_difference(p.heads[0].value, k, value, 1e-6)) < 1e-3);
    }
}
