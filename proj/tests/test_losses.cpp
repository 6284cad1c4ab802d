#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "recureg/error.hpp"
#include "recureg/fieldops.hpp"
#include "recureg/losses.hpp"
#include "recureg/synthdata.hpp"

using namespace recureg;
namespace ls = recureg::losses;

TEST_CASE("mse") {
    const Volume a = Volume::zeros({2, 2, 2});
    CHECK(ls::mse(a, a) == 0.0);
    CHECK(ls::mse(a, Volume({2, 2, 2}, std::vector<float>(8, 1.0f))) == 1.0);
    std::mt19937_64 rng(61);
    const Volume x = oracle::random_volume(rng, {2, 2, 2}), y = oracle::random_volume(rng, {2, 2, 2});
    double hand = 0;
    for (std::size_t i = 0; i < 8; ++i) hand += (double(x[i]) - y[i]) * (double(x[i]) - y[i]);
    CHECK(ls::mse(x, y) == doctest::Approx(hand / 8));
    CHECK_THROWS_AS(ls::mse(x, Volume::zeros({2, 2, 1})), ShapeError);
}

TEST_CASE("local ncc: perfect and affine correlation") {
    std::mt19937_64 rng(62);
    const Volume a = oracle::random_volume(rng, {6, 6, 6});
    CHECK(ls::local_ncc(a, a, 3) == doctest::Approx(-1.0).epsilon(1e-3));
    std::vector<float> b(a.size());
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 2.0f * a[i] + 1.0f;
    CHECK(ls::local_ncc(a, Volume(a.shape(), b), 5) == doctest::Approx(-1.0).epsilon(1e-3));
    CHECK_THROWS_AS(ls::local_ncc(a, a, 4), ValueError);
    CHECK_THROWS_AS(ls::local_ncc(a, Volume::zeros({6, 6, 5}), 3), ShapeError);
}

TEST_CASE("local ncc matches sliding windows on random instances") {
    std::mt19937_64 rng(63);
    std::uniform_int_distribution<int> dim(1, 6);
    for (int trial = 0; trial < 110; ++trial) {
        const Shape3 s = trial == 0 ? Shape3{5, 5, 5} : Shape3{dim(rng), dim(rng), dim(rng)};
        const Volume a = oracle::random_volume(rng, s), b = oracle::random_volume(rng, s);
        const int window = trial % 3 == 0 ? 5 : 3;
        const double got = ls::local_ncc(a, b, window);
        CHECK(got == doctest::Approx(oracle::local_ncc(a, b, window)).epsilon(1e-9));
        CHECK(got <= 0.0);
        CHECK(got >= -1.0);
    }
}

TEST_CASE("smoothness") {
    CHECK(ls::smoothness_l2(DisplacementField::zeros({3, 3, 3})) == 0.0);
    std::vector<float> c(27 * 3, 1.5f);
    CHECK(ls::smoothness_l2(DisplacementField({3, 3, 3}, c)) == 0.0);

    // Slope-1 ramp in component 2 along axis 2 of a 1x1x4 line: every stencil gives 1.
    std::vector<float> line(12, 0.0f);
    for (int k = 0; k < 4; ++k) line[static_cast<std::size_t>(k) * 3 + 2] = static_cast<float>(k);
    CHECK(ls::smoothness_l2(DisplacementField({1, 1, 4}, line)) == 4.0);

    std::mt19937_64 rng(64);
    const DisplacementField u = oracle::random_field(rng, {3, 4, 2}, 1.0);
    double want = 0;
    const Shape3 s = u.shape();
    for (int cc = 0; cc < 3; ++cc)
        for (int a = 0; a < 3; ++a)
            for (int i = 0; i < s.h; ++i)
                for (int j = 0; j < s.w; ++j)
                    for (int k = 0; k < s.t; ++k) {
                        const double d =
                            oracle::derivative([&](int x, int y, int z) { return double(u.at(x, y, z, cc)); }, s, a, i, j, k);
                        want += d * d;
                    }
    CHECK(ls::smoothness_l2(u) == doctest::Approx(want));
}

TEST_CASE("edge weight") {
    const Tensor flat = ls::edge_weight(Volume({3, 3, 3}, std::vector<float>(27, 0.3f)));
    for (double v : flat.data()) CHECK(v == 1.0);
    // Unit-slope ramp: |grad|^2 = 1 everywhere.
    const Tensor ramp = ls::edge_weight(Volume({1, 1, 4}, {0, 1, 2, 3}));
    for (double v : ramp.data()) CHECK(v == doctest::Approx(std::exp(-1.0)));
    double prev = 2.0;
    for (double slope : {0.0, 0.25, 0.5, 1.0, 2.0}) {
        const double w = ls::edge_weight(Volume({1, 1, 3}, {0.0f, float(slope), float(2 * slope)}))[1];
        CHECK(w < prev);
        CHECK(w > 0.0);
        prev = w;
    }
}

TEST_CASE("synthetic loss") {
    const DisplacementField z = DisplacementField::zeros({2, 2, 2});
    CHECK(ls::loss_synthetic(z, z, 1.0).total == 0.0);
    const DisplacementField smooth = synth::gen_smooth_ddf({8, 8, 8}, 2.0, 3.0, 1);
    const auto same = ls::loss_synthetic(smooth, smooth, 0.7);
    CHECK(same.similarity_term == 0.0);
    CHECK(same.total == doctest::Approx(0.7 * ls::smoothness_l2(smooth)));

    std::mt19937_64 rng(65);
    const DisplacementField a = oracle::random_field(rng, {2, 2, 2}, 1.0), b = oracle::random_field(rng, {2, 2, 2}, 1.0);
    double sq = 0, reg = 0;
    for (std::size_t i = 0; i < 24; ++i) sq += (double(a.data()[i]) - b.data()[i]) * (double(a.data()[i]) - b.data()[i]);
    // On a 2^3 grid every one-sided difference is the plain neighbour difference.
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                for (int k = 0; k < 2; ++k) {
                    const double d0 = a.at(1, j, k, c) - a.at(0, j, k, c);
                    const double d1 = a.at(i, 1, k, c) - a.at(i, 0, k, c);
                    const double d2 = a.at(i, j, 1, c) - a.at(i, j, 0, c);
                    reg += d0 * d0 + d1 * d1 + d2 * d2;
                }
    const auto r = ls::loss_synthetic(a, b, 0.5);
    CHECK(r.similarity_term == doctest::Approx(sq));
    CHECK(r.regularization_term == doctest::Approx(reg));
    CHECK(r.total == doctest::Approx(sq + 0.5 * reg).epsilon(1e-6));
    CHECK(std::abs(r.total - (r.similarity_term + r.lambda * r.regularization_term)) < 1e-6);
    CHECK_THROWS_AS(ls::loss_synthetic(a, DisplacementField::zeros({2, 2, 1}), 1.0), ShapeError);
}

TEST_CASE("unsupervised loss") {
    std::mt19937_64 rng(66);
    ModelConfig mse_cfg;
    mse_cfg.similarity = Similarity::Mse;
    const Volume s = oracle::random_volume(rng, {4, 4, 4});
    const auto zero = ls::loss_unsupervised(s, s, DisplacementField::zeros(s.shape()), mse_cfg);
    CHECK(zero.total == 0.0);
    CHECK(zero.similarity_term == 0.0);
    CHECK(zero.regularization_term == 0.0);

    const DisplacementField u = oracle::random_field(rng, s.shape(), 0.8);
    const Volume flat({4, 4, 4}, std::vector<float>(64, 0.5f));
    CHECK(ls::loss_unsupervised(s, flat, u, mse_cfg).regularization_term == doctest::Approx(ls::smoothness_l2(u)));

    const Volume t = oracle::random_volume(rng, s.shape());
    for (Similarity sim : {Similarity::Mse, Similarity::LocalNcc}) {
        ModelConfig cfg;
        cfg.similarity = sim;
        cfg.ncc_window = 3;
        cfg.lambda_unsup = 0.3;
        const auto r = ls::loss_unsupervised(s, t, u, cfg);
        const Volume warped = fieldops::warp(s, u);
        const double want_sim = sim == Similarity::Mse ? ls::mse(warped, t) : ls::local_ncc(warped, t, 3);
        const Tensor g = fieldops::spatial_gradient(u), w = ls::edge_weight(t);
        double want_reg = 0;
        for (int ch = 0; ch < 9; ++ch)
            for (std::size_t x = 0; x < 64; ++x) want_reg += (g[ch * 64 + x] * w[x]) * (g[ch * 64 + x] * w[x]);
        CHECK(r.similarity_term == doctest::Approx(want_sim).epsilon(1e-6));
        CHECK(r.regularization_term == doctest::Approx(want_reg));
        CHECK(r.total == doctest::Approx(want_sim + 0.3 * want_reg).epsilon(1e-6));
        // Weighting never increases the regularizer.
        CHECK(r.regularization_term <= ls::smoothness_l2(u) + 1e-12);
        cfg.lambda_unsup = 0.0;
        CHECK(ls::loss_unsupervised(s, t, u, cfg).total == r.similarity_term);
    }
}

TEST_CASE("loss gradients match finite differences at random voxels") {
    std::mt19937_64 rng(67);
    const Shape3 s{5, 4, 6};
    // Smooth images keep the warp away from flat-gradient corner cases.
    const Tensor src = synth::gen_phantom_pair({16, 16, 16}, 3, 0.0, 68).source.to_tensor();
    Tensor source({1, 5, 4, 6}), target({1, 5, 4, 6});
    for (std::size_t i = 0; i < source.size(); ++i) {
        source[i] = src[i * 7 % src.size()];
        target[i] = src[(i * 13 + 5) % src.size()];
    }
    Tensor phi = oracle::random_field(rng, s, 0.4).to_tensor();
    // Keep sample positions away from integer coordinates where trilinear
    // interpolation has a kink.
    for (double &v : phi.data()) v = std::floor(v) + 0.2 + 0.6 * (v - std::floor(v));
    Tensor phi_gt = oracle::random_field(rng, s, 1.0).to_tensor();

    std::vector<std::pair<const char *, std::function<ad::Var(const ad::Var &)>>> cases;
    cases.emplace_back("synthetic", [&](const ad::Var &p) { return ls::loss_synthetic(p, ad::constant(phi_gt), 0.5).total; });
    for (Similarity sim : {Similarity::Mse, Similarity::LocalNcc}) {
        ModelConfig cfg;
        cfg.similarity = sim;
        cfg.ncc_window = 3;
        cfg.lambda_unsup = 0.05;
        cases.emplace_back(sim == Similarity::Mse ? "unsup-mse" : "unsup-ncc", [&, cfg](const ad::Var &p) {
            return ls::loss_unsupervised(ad::constant(source), ad::constant(target), p, cfg).total;
        });
    }
    std::uniform_int_distribution<std::size_t> pick(0, phi.size() - 1);
    for (auto &[name, loss] : cases) {
        INFO(name);
        const ad::Var p = ad::leaf(phi);
        ad::backward(loss(p));
        const Tensor g = p.grad();
        for (int probe = 0; probe < 50; ++probe) {
            const std::size_t i = pick(rng);
            const double num = oracle::central_difference(
                phi, i,
                [&] {
                    ad::NoGradGuard guard;
                    return loss(ad::constant(phi)).value()[0];
                },
                1e-6);
            CHECK(oracle::relative_error(g[i], num) < 1e-3);
        }
    }
}

TEST_CASE("local ncc gradient with respect to both images") {
    std::mt19937_64 rng(69);
    Tensor a = oracle::random_tensor(rng, {1, 4, 5, 3}, 0.0, 1.0), b = oracle::random_tensor(rng, {1, 4, 5, 3}, 0.0, 1.0);
    const ad::Var va = ad::leaf(a), vb = ad::leaf(b);
    ad::backward(ls::local_ncc(va, vb, 3));
    const Tensor ga = va.grad(), gb = vb.grad();
    auto f = [&] {
        ad::NoGradGuard guard;
        return ls::local_ncc(ad::constant(a), ad::constant(b), 3).value()[0];
    };
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(oracle::relative_error(ga[i], oracle::central_difference(a, i, f, 1e-6)) < 1e-4);
        CHECK(oracle::relative_error(gb[i], oracle::central_difference(b, i, f, 1e-6)) < 1e-4);
    }
}
