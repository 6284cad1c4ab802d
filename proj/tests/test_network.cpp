#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "recureg/error.hpp"
#include "recureg/network.hpp"

using namespace recureg;
using namespace recureg::network;

namespace {

Tensor block_oracle(const Tensor &x, const BlockParams &p) {
    Tensor h = x;
    for (const ConvParams &c : p.convs) h = oracle::leaky(oracle::conv3d(h, c.weight, &c.bias, c.dilation), kLeakySlope);
    const Tensor skip = p.skip.empty() ? x : oracle::conv3d(x, p.skip, nullptr, 1);
    return oracle::add(h, skip);
}

std::size_t block_count(std::size_t ci, std::size_t co, std::size_t k3) {
    return (ci * co * k3 + co) + 2 * (co * co * k3 + co) + (ci != co ? ci * co : 0);
}

// Closed-form scalar count of the subnetwork for the default block layout.
std::size_t closed_form_count(const ModelConfig &cfg) {
    const std::size_t k3 = static_cast<std::size_t>(cfg.kernel_size) * cfg.kernel_size * cfg.kernel_size;
    auto ch = [&](int l) { return static_cast<std::size_t>(l == 0 ? 1 : cfg.base_channels << (l - 1)); };
    auto att = [&](int l) { return cfg.heads > 0 && l >= std::max(1, cfg.levels - 1); };
    auto stream = [&](int l) { return ch(l) * (att(l) && l > 0 ? 2 : 1); };
    std::size_t n = 0;
    for (int l = 1; l <= cfg.levels; ++l) {
        n += block_count(stream(l - 1), ch(l), k3);
        if (att(l)) n += 4 * ch(l) * ch(l);
    }
    std::size_t below = 2 * stream(cfg.levels);
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const std::size_t out = ch(std::max(l, 1));
        n += block_count(below + 2 * stream(l), out, k3);
        below = out;
    }
    return n + ch(1) * 3 * k3 + 3;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.base_channels = 4;
    cfg.levels = 2;
    cfg.heads = 2;
    return cfg;
}

BlockParams without_biases(BlockParams p) {
    for (ConvParams &c : p.convs) c.bias = Tensor(c.bias.shape());
    return p;
}

// Copy of params with the zero-initialised head replaced by small random weights.
ModelParams with_random_head(ModelParams p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Tensor> values;
    for (const auto &t : p.tensors()) {
        Tensor v = t.value;
        if (t.name == "head.w" || t.name == "head.b") v = oracle::random_tensor(rng, v.shape(), -0.1, 0.1);
        values.push_back(v);
    }
    p.assign(values);
    return p;
}

} // namespace

TEST_CASE("res-down block: shapes, zero response and impulse response") {
    const BlockParams p = make_block(4, 8, {1, 1, 3}, 3, 41);
    CHECK(p.convs.size() == 3);
    CHECK(p.convs[2].dilation == 3);
    const FeatureGrid out = res_down_block(FeatureGrid(Tensor({4, 8, 8, 8})), without_biases(p));
    CHECK(out.channels() == 8);
    CHECK(out.spatial() == Shape3{4, 4, 4});
    for (double v : out.tensor().data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(res_down_block(FeatureGrid(Tensor({4, 8, 7, 8})), p), ShapeError);

    // Single-voxel impulse on a 16^3 grid. Receptive radius 1 + 1 + 3 = 5.
    const BlockParams q = without_biases(make_block(1, 2, {1, 1, 3}, 3, 42));
    Tensor x({1, 16, 16, 16});
    x[Shape3{16, 16, 16}.index(8, 8, 8)] = 1.0;
    const Tensor got = res_down_block(FeatureGrid(x), q).tensor();
    const Tensor full = block_oracle(x, q);
    const Tensor want = oracle::pool(full);
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    const Shape3 s{16, 16, 16};
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j)
                for (int k = 0; k < 16; ++k) {
                    const int r = std::max({std::abs(i - 8), std::abs(j - 8), std::abs(k - 8)});
                    if (r > 5) CHECK(full[c * s.voxels() + s.index(i, j, k)] == 0.0);
                }
}

TEST_CASE("res-up block matches layer-by-layer composition on 2^3") {
    std::mt19937_64 rng(43);
    const BlockParams p = make_block(6, 4, {1, 1, 3}, 3, 44);
    const Tensor f = oracle::random_tensor(rng, {2, 2, 2, 2});
    const Tensor skip = oracle::random_tensor(rng, {4, 4, 4, 4});
    const FeatureGrid got = res_up_block(FeatureGrid(f), FeatureGrid(skip), p);
    CHECK(got.spatial() == Shape3{4, 4, 4});
    const Tensor want = block_oracle(oracle::concat(oracle::upsample(f), skip), p);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.tensor()[i] == doctest::Approx(want[i]).epsilon(1e-12));

    const BlockParams z = without_biases(make_block(16, 8, {1, 1, 3}, 3, 45));
    const FeatureGrid zero = res_up_block(FeatureGrid(Tensor({8, 4, 4, 4})), FeatureGrid(Tensor({8, 8, 8, 8})), z);
    CHECK(zero.spatial() == Shape3{8, 8, 8});
    for (double v : zero.tensor().data()) CHECK(v == 0.0);
    CHECK_THROWS_AS(res_up_block(FeatureGrid(Tensor({8, 4, 4, 4})), FeatureGrid(Tensor({8, 6, 8, 8})), z), ShapeError);
}

TEST_CASE("parameter counting") {
    ParamLayout single;
    single.add_conv("c", 1, 1, 3, false);
    CHECK(single.scalar_count() == 27);

    ModelConfig cfg;
    CHECK(parameter_count(cfg) == closed_form_count(cfg));
    CHECK(ModelParams::initialize(cfg, 1).scalar_count() == parameter_count(cfg));
    ModelConfig wide = cfg;
    wide.base_channels *= 2;
    CHECK(parameter_count(wide) == closed_form_count(wide));
    const double ratio = double(parameter_count(wide)) / double(parameter_count(cfg));
    CHECK(ratio > 3.5);
    CHECK(ratio < 4.0);
    const ModelConfig desk = ModelConfig::desk();
    CHECK(parameter_count(desk) == closed_form_count(desk));
    ModelConfig no_att = cfg;
    no_att.heads = 0;
    CHECK(parameter_count(no_att) == closed_form_count(no_att));
}

TEST_CASE("initialisation is seeded and the head starts at zero") {
    const ModelConfig cfg = tiny_config();
    const ModelParams a = ModelParams::initialize(cfg, 5), b = ModelParams::initialize(cfg, 5), c = ModelParams::initialize(cfg, 6);
    CHECK(a == b);
    CHECK_FALSE(a == c);
    for (double v : a.at("head.w").data()) CHECK(v == 0.0);
    for (double v : a.at("enc1.conv0.b").data()) CHECK(v == 0.0);
    // He initialisation: sample std close to sqrt(2 / ((1 + a^2) fan_in)).
    const ModelParams big = ModelParams::initialize(ModelConfig{}, 7);
    const Tensor &w = big.at("dec1.conv1.w");
    double ss = 0;
    for (double v : w.data()) ss += v * v;
    const double fan_in = w.dim(1) * 27.0;
    CHECK(std::sqrt(ss / w.size()) == doctest::Approx(std::sqrt(2.0 / (1.04 * fan_in))).epsilon(0.05));
}

TEST_CASE("siamese encoder: weight sharing and symmetry") {
    std::mt19937_64 rng(46);
    const ModelConfig cfg = tiny_config();
    const ModelParams params = ModelParams::initialize(cfg, 47);
    const Volume a = oracle::random_volume(rng, {8, 8, 8}), b = oracle::random_volume(rng, {8, 8, 8});

    auto [pa, pb] = siamese_encode(a, a, params);
    REQUIRE(pa.size() == 3);
    for (std::size_t l = 0; l < pa.size(); ++l) {
        CHECK(pa[l].spatial() == Shape3{8 >> l, 8 >> l, 8 >> l});
        CHECK(pa[l].channels() == stream_channels(cfg, static_cast<int>(l)));
        const auto x = pa[l].tensor().data(), y = pb[l].tensor().data();
        CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
    auto [ab_a, ab_b] = siamese_encode(a, b, params);
    auto [ba_b, ba_a] = siamese_encode(b, a, params);
    for (std::size_t l = 0; l < ab_a.size(); ++l) {
        CHECK(std::equal(ab_a[l].tensor().data().begin(), ab_a[l].tensor().data().end(), ba_a[l].tensor().data().begin()));
        CHECK(std::equal(ab_b[l].tensor().data().begin(), ab_b[l].tensor().data().end(), ba_b[l].tensor().data().begin()));
    }
    CHECK_THROWS_AS(siamese_encode(a, Volume::zeros({8, 8, 4}), params), ShapeError);
    CHECK_THROWS_AS(siamese_encode(Volume::zeros({6, 8, 8}), Volume::zeros({6, 8, 8}), params), ShapeError);
}

TEST_CASE("without attention each stream is the plain encoder") {
    std::mt19937_64 rng(48);
    ModelConfig cfg = tiny_config();
    cfg.heads = 0;
    const ModelParams params = ModelParams::initialize(cfg, 49);
    const Volume a = oracle::random_volume(rng, {8, 8, 8}), b = oracle::random_volume(rng, {8, 8, 8});
    auto [pa, pb] = siamese_encode(a, b, params);
    for (const auto &[vol, pyr] : {std::pair{&a, &pa}, std::pair{&b, &pb}}) {
        Tensor f = vol->to_tensor();
        for (int l = 1; l <= cfg.levels; ++l) {
            f = oracle::pool(block_oracle(f, block_params(params, "enc" + std::to_string(l))));
            const Tensor &got = (*pyr)[static_cast<std::size_t>(l)].tensor();
            REQUIRE(got.shape() == f.shape());
            for (std::size_t i = 0; i < f.size(); ++i) CHECK(got[i] == doctest::Approx(f[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("subnetwork output contract") {
    std::mt19937_64 rng(50);
    const ModelParams params = ModelParams::initialize(ModelConfig::desk(), 51);
    const Volume a = oracle::random_volume(rng, {16, 16, 16}), b = oracle::random_volume(rng, {16, 16, 16});
    const DisplacementField u = subnet_forward(a, b, params);
    CHECK(u.shape() == Shape3{16, 16, 16});
    CHECK(u.is_zero());
    CHECK_THROWS_AS(subnet_forward(a, Volume::zeros({16, 16, 8}), params), ShapeError);
}

TEST_CASE("activations stay finite over repeated forward passes") {
    std::mt19937_64 rng(52);
    const ModelParams params = with_random_head(ModelParams::initialize(tiny_config(), 53), 54);
    for (int pass = 0; pass < 100; ++pass) {
        const Volume a = oracle::random_volume(rng, {8, 8, 8}), b = oracle::random_volume(rng, {8, 8, 8});
        const Tensor u = subnet_forward(a, b, params).to_tensor();
        CHECK(u.all_finite());
    }
}

TEST_CASE("subnetwork gradient matches finite differences") {
    std::mt19937_64 rng(55);
    ModelParams params = with_random_head(ModelParams::initialize(tiny_config(), 56), 57);
    const ad::Var a = ad::constant(oracle::random_volume(rng, {8, 8, 8}).to_tensor());
    const ad::Var b = ad::constant(oracle::random_volume(rng, {8, 8, 8}).to_tensor());
    const BoundParams bound(params, true);
    ad::backward(ad::mean(subnet_forward(a, b, bound)));
    const std::vector<Tensor> grads = bound.gradients();

    // Probe a middle encoder layer, an attention projection and a decoder layer.
    std::vector<Tensor> values;
    for (const auto &t : params.tensors()) values.push_back(t.value);
    const std::vector<std::string> probe_names{"enc2.conv1.w", "att2.h0.k", "dec1.conv0.w"};
    std::size_t checked = 0;
    for (const std::string &name : probe_names) {
        std::size_t idx = 0;
        while (params.tensors()[idx].name != name) ++idx;
        Tensor &w = values[idx];
        std::uniform_int_distribution<std::size_t> pick(0, w.size() - 1);
        for (int probe = 0; probe < 20; ++probe) {
            const std::size_t i = pick(rng);
            auto f = [&] {
                ad::NoGradGuard guard;
                // Leaves are rebuilt from unrounded doubles so the probe step survives.
                std::vector<ad::Var> leaves;
                BoundParams probe_bound(params, false);
                Tensor saved = params.at(name);
                params.at(name) = w;
                const BoundParams pb(params, false);
                const double v = ad::mean(subnet_forward(a, b, pb)).value()[0];
                params.at(name) = saved;
                return v;
            };
            const double num = oracle::central_difference(w, i, f, 1e-6);
            CHECK(oracle::relative_error(grads[idx][i], num) < 1e-3);
            ++checked;
        }
    }
    CHECK(checked >= 50);
}

TEST_CASE("checkpoint round trip is bit exact") {
    const ModelParams p = with_random_head(ModelParams::initialize(tiny_config(), 58), 59);
    std::stringstream ss;
    write_checkpoint(ss, p);
    const ModelParams q = read_checkpoint(ss);
    CHECK(p == q);
    CHECK(q.config() == p.config());

    std::string bytes = [&] {
        std::stringstream s2;
        write_checkpoint(s2, p);
        return s2.str();
    }();
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream bad_magic(bad);
    CHECK_THROWS_AS(read_checkpoint(bad_magic), FormatError);
    std::istringstream truncated(bytes.substr(0, bytes.size() - 5));
    try {
        read_checkpoint(truncated);
        CHECK(false);
    } catch (const FormatError &e) {
        CHECK(e.kind() == FormatError::Kind::Truncated);
    }
    CHECK(config_from_string(config_to_string(ModelConfig::paper_scale())) == ModelConfig::paper_scale());
}
