#include "recureg/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "recureg/error.hpp"

namespace recureg::network {

namespace {

std::string enc_prefix(int level) { return "enc" + std::to_string(level); }
std::string dec_prefix(int level) { return "dec" + std::to_string(level); }
std::string att_prefix(int level) { return "att" + std::to_string(level); }

// Adds a residual block: one conv per atrous rate, plus a skip projection.
void add_block(ParamLayout &layout, const std::string &prefix, int ci, int co, const ModelConfig &cfg) {
    int in = ci;
    for (std::size_t r = 0; r < cfg.atrous_rates.size(); ++r) {
        layout.add_conv(prefix + ".conv" + std::to_string(r), in, co, cfg.kernel_size, true);
        in = co;
    }
    if (ci != co) layout.add_conv(prefix + ".skip", ci, co, 1, false);
}

int decoder_channels(const ModelConfig &cfg, int level) { return cfg.level_channels(std::max(level, 1)); }

} // namespace

// ---------------------------------------------------------------------------
// layout

void ParamLayout::add(ParamSpec spec) {
    for (const ParamSpec &s : specs_)
        if (s.name == spec.name) throw ValueError("ParamLayout: duplicate parameter " + spec.name);
    specs_.push_back(std::move(spec));
}

void ParamLayout::add_conv(const std::string &prefix, int ci, int co, int kernel, bool bias, InitKind init) {
    add({prefix + ".w", {co, ci, kernel, kernel, kernel}, init, ci * kernel * kernel * kernel});
    if (bias) add({prefix + ".b", {co}, InitKind::Zero, 1});
}

std::size_t ParamLayout::scalar_count() const {
    std::size_t n = 0;
    for (const ParamSpec &s : specs_) n += element_count(s.shape);
    return n;
}

std::vector<int> attention_levels(const ModelConfig &cfg) {
    std::vector<int> out;
    if (cfg.heads <= 0) return out;
    for (int l = std::max(1, cfg.levels - 1); l <= cfg.levels; ++l) out.push_back(l);
    return out;
}

int stream_channels(const ModelConfig &cfg, int level) {
    if (level == 0) return 1;
    const auto att = attention_levels(cfg);
    const bool has_att = std::find(att.begin(), att.end(), level) != att.end();
    return cfg.level_channels(level) * (has_att ? 2 : 1);
}

ParamLayout model_layout(const ModelConfig &cfg) {
    cfg.validate();
    ParamLayout layout;
    for (int l = 1; l <= cfg.levels; ++l) {
        add_block(layout, enc_prefix(l), stream_channels(cfg, l - 1), cfg.level_channels(l), cfg);
    }
    for (int l : attention_levels(cfg)) {
        const int c = cfg.level_channels(l);
        const int ch = c / cfg.heads;
        for (int h = 0; h < cfg.heads; ++h) {
            const std::string p = att_prefix(l) + ".h" + std::to_string(h);
            layout.add({p + ".q", {ch, c}, InitKind::Attention, c});
            layout.add({p + ".k", {ch, c}, InitKind::Attention, c});
            layout.add({p + ".v", {ch, c}, InitKind::Attention, c});
        }
        layout.add({att_prefix(l) + ".merge", {c, ch * cfg.heads}, InitKind::Attention, ch * cfg.heads});
    }
    int below = 2 * stream_channels(cfg, cfg.levels);
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const int in = below + 2 * stream_channels(cfg, l);
        const int out = decoder_channels(cfg, l);
        add_block(layout, dec_prefix(l), in, out, cfg);
        below = out;
    }
    layout.add_conv("head", decoder_channels(cfg, 0), 3, cfg.kernel_size, true, InitKind::Zero);
    return layout;
}

std::size_t parameter_count(const ModelConfig &cfg) { return model_layout(cfg).scalar_count(); }

// ---------------------------------------------------------------------------
// parameters

void round_to_float(Tensor &t) {
    for (double &v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

ModelParams::ModelParams(ModelConfig cfg, std::vector<NamedTensor> tensors) : cfg_(cfg), tensors_(std::move(tensors)) {
    const ParamLayout layout = model_layout(cfg_);
    const auto &specs = layout.specs();
    if (specs.size() != tensors_.size()) throw ValueError("ModelParams: tensor count does not match the model layout");
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].name != tensors_[i].name) throw ValueError("ModelParams: unexpected tensor " + tensors_[i].name);
        if (specs[i].shape != tensors_[i].value.shape()) throw ShapeError("ModelParams: bad shape for " + specs[i].name);
        if (!tensors_[i].value.all_finite()) throw ValueError("ModelParams: non-finite weight in " + specs[i].name);
        index_.emplace(tensors_[i].name, i);
    }
}

ModelParams ModelParams::initialize(const ModelConfig &cfg, std::uint64_t seed) {
    const ParamLayout layout = model_layout(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<NamedTensor> tensors;
    for (const ParamSpec &s : layout.specs()) {
        Tensor t(s.shape);
        double stddev = 0.0;
        switch (s.init) {
        case InitKind::He:
            stddev = std::sqrt(2.0 / ((1.0 + kLeakySlope * kLeakySlope) * s.fan_in));
            break;
        case InitKind::Attention:
            stddev = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
            break;
        case InitKind::Zero:
            break;
        }
        if (stddev > 0.0)
            for (double &v : t.data()) v = stddev * normal(rng);
        round_to_float(t);
        tensors.push_back({s.name, std::move(t)});
    }
    return ModelParams(cfg, std::move(tensors));
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const NamedTensor &t : tensors_) n += t.value.size();
    return n;
}

bool ModelParams::has(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::size_t ModelParams::index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ValueError("ModelParams: no parameter named " + std::string(name));
    return it->second;
}

const Tensor &ModelParams::at(std::string_view name) const { return tensors_[index_of(name)].value; }
Tensor &ModelParams::at(std::string_view name) { return tensors_[index_of(name)].value; }

void ModelParams::assign(std::vector<Tensor> values) {
    if (values.size() != tensors_.size()) throw ShapeError("ModelParams::assign: tensor count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!values[i].same_shape(tensors_[i].value)) throw ShapeError("ModelParams::assign: shape mismatch for " + tensors_[i].name);
        round_to_float(values[i]);
        tensors_[i].value = std::move(values[i]);
    }
}

bool ModelParams::operator==(const ModelParams &other) const {
    if (!(cfg_ == other.cfg_) || tensors_.size() != other.tensors_.size()) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
        const auto &a = tensors_[i], &b = other.tensors_[i];
        if (a.name != b.name || !a.value.same_shape(b.value)) return false;
        if (!std::equal(a.value.data().begin(), a.value.data().end(), b.value.data().begin())) return false;
    }
    return true;
}

BoundParams::BoundParams(const ModelParams &params, bool requires_grad) : cfg_(params.config()) {
    vars_.reserve(params.tensors().size());
    for (const NamedTensor &t : params.tensors()) {
        index_.emplace(t.name, vars_.size());
        vars_.push_back(ad::leaf(t.value, requires_grad));
    }
}

const ad::Var &BoundParams::operator()(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ValueError("BoundParams: no parameter named " + std::string(name));
    return vars_[it->second];
}

bool BoundParams::has(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::vector<Tensor> BoundParams::gradients() const {
    std::vector<Tensor> out;
    out.reserve(vars_.size());
    for (const ad::Var &v : vars_) out.push_back(v.grad());
    return out;
}

// ---------------------------------------------------------------------------
// blocks

namespace {

template <typename Has, typename Get, typename Out>
void collect_block(const std::string &prefix, const std::array<int, 3> &rates, Has &&has, Get &&get, Out &out) {
    for (std::size_t r = 0; r < rates.size(); ++r) {
        const std::string p = prefix + ".conv" + std::to_string(r);
        out.convs.push_back({get(p + ".w"), get(p + ".b"), rates[r]});
    }
    if (has(prefix + ".skip.w")) out.skip = get(prefix + ".skip.w");
}

ad::Var block_body(const ad::Var &x, const BlockVars &p) {
    ad::Var h = x;
    for (const ConvVars &c : p.convs) h = ad::leaky_relu(ad::conv3d(h, c.weight, c.bias, c.dilation), kLeakySlope);
    const ad::Var skip = p.skip.defined() ? ad::conv3d(x, p.skip, ad::Var(), 1) : x;
    return ad::add(h, skip);
}

} // namespace

BlockParams block_params(const ModelParams &params, const std::string &prefix) {
    BlockParams out;
    collect_block(
        prefix, params.config().atrous_rates, [&](const std::string &n) { return params.has(n); },
        [&](const std::string &n) { return params.at(n); }, out);
    return out;
}

BlockVars block_vars(const BoundParams &params, const std::string &prefix) {
    BlockVars out;
    collect_block(
        prefix, params.config().atrous_rates, [&](const std::string &n) { return params.has(n); },
        [&](const std::string &n) { return params(n); }, out);
    return out;
}

BlockVars bind(const BlockParams &p, bool requires_grad) {
    BlockVars out;
    for (const ConvParams &c : p.convs) out.convs.push_back({ad::leaf(c.weight, requires_grad), ad::leaf(c.bias, requires_grad), c.dilation});
    if (!p.skip.empty()) out.skip = ad::leaf(p.skip, requires_grad);
    return out;
}

BlockParams make_block(int ci, int co, const std::array<int, 3> &rates, int kernel, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.atrous_rates = rates;
    cfg.kernel_size = kernel;
    ParamLayout layout;
    add_block(layout, "blk", ci, co, cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::map<std::string, Tensor> values;
    for (const ParamSpec &s : layout.specs()) {
        Tensor t(s.shape);
        const double stddev = std::sqrt(2.0 / s.fan_in);
        for (double &v : t.data()) v = stddev * normal(rng);
        values[s.name] = std::move(t);
    }
    BlockParams out;
    collect_block(
        "blk", rates, [&](const std::string &n) { return values.count(n) != 0; }, [&](const std::string &n) { return values.at(n); },
        out);
    return out;
}

ad::Var res_down_block(const ad::Var &x, const BlockVars &p) {
    const Tensor &v = x.value();
    if (v.rank() != 4 || v.dim(1) % 2 || v.dim(2) % 2 || v.dim(3) % 2) {
        throw ShapeError("res_down_block: spatial dims must be even, got " + v.shape_string());
    }
    return ad::avg_pool2(block_body(x, p));
}

ad::Var res_up_block(const ad::Var &x, const ad::Var &skip, const BlockVars &p) {
    const Tensor &xv = x.value();
    const Tensor &sv = skip.value();
    if (xv.rank() != 4 || sv.rank() != 4 || sv.dim(1) != 2 * xv.dim(1) || sv.dim(2) != 2 * xv.dim(2) || sv.dim(3) != 2 * xv.dim(3)) {
        throw ShapeError("res_up_block: skip " + sv.shape_string() + " must be twice the size of " + xv.shape_string());
    }
    return block_body(ad::concat(ad::upsample2(x), skip), p);
}

FeatureGrid res_down_block(const FeatureGrid &f, const BlockParams &p) {
    ad::NoGradGuard guard;
    return FeatureGrid(res_down_block(ad::constant(f.tensor()), bind(p, false)).value());
}

FeatureGrid res_up_block(const FeatureGrid &f, const FeatureGrid &skip, const BlockParams &p) {
    ad::NoGradGuard guard;
    return FeatureGrid(res_up_block(ad::constant(f.tensor()), ad::constant(skip.tensor()), bind(p, false)).value());
}

attention::ProjectionVars attention_vars(const BoundParams &params, int level) {
    attention::ProjectionVars out;
    const std::string prefix = att_prefix(level);
    for (int h = 0; h < params.config().heads; ++h) {
        const std::string p = prefix + ".h" + std::to_string(h);
        out.heads.push_back({params(p + ".q"), params(p + ".k"), params(p + ".v")});
    }
    out.merge = params(prefix + ".merge");
    return out;
}

// ---------------------------------------------------------------------------
// network

namespace {

void check_input(const ad::Var &v, const ModelConfig &cfg, const char *who) {
    const Tensor &t = v.value();
    if (t.rank() != 4 || t.dim(0) != 1) throw ShapeError(std::string(who) + ": expected (1, H, W, T), got " + t.shape_string());
    cfg.validate_input({t.dim(1), t.dim(2), t.dim(3)});
}

} // namespace

std::pair<VarPyramid, VarPyramid> siamese_encode(const ad::Var &a, const ad::Var &b, const BoundParams &params) {
    const ModelConfig &cfg = params.config();
    check_input(a, cfg, "siamese_encode");
    check_input(b, cfg, "siamese_encode");
    if (a.shape() != b.shape()) throw ShapeError("siamese_encode: input shapes differ");
    const auto att = attention_levels(cfg);
    VarPyramid pa{a}, pb{b};
    for (int l = 1; l <= cfg.levels; ++l) {
        const BlockVars blk = block_vars(params, enc_prefix(l));
        ad::Var fa = res_down_block(pa.back(), blk);
        ad::Var fb = res_down_block(pb.back(), blk);
        if (std::find(att.begin(), att.end(), l) != att.end()) {
            auto [b_to_a, a_to_b] = attention::bidirectional_exchange(fa, fb, attention_vars(params, l));
            fa = ad::concat(fa, b_to_a);
            fb = ad::concat(fb, a_to_b);
        }
        pa.push_back(fa);
        pb.push_back(fb);
    }
    return {pa, pb};
}

std::pair<FeaturePyramid, FeaturePyramid> siamese_encode(const Volume &a, const Volume &b, const ModelParams &params) {
    ad::NoGradGuard guard;
    const BoundParams bound(params, false);
    auto [pa, pb] = siamese_encode(ad::constant(a.to_tensor()), ad::constant(b.to_tensor()), bound);
    FeaturePyramid fa, fb;
    for (const ad::Var &v : pa) fa.emplace_back(v.value());
    for (const ad::Var &v : pb) fb.emplace_back(v.value());
    return {fa, fb};
}

ad::Var subnet_forward(const ad::Var &source_warped, const ad::Var &target, const BoundParams &params) {
    const ModelConfig &cfg = params.config();
    auto [ps, pt] = siamese_encode(source_warped, target, params);
    const auto top = static_cast<std::size_t>(cfg.levels);
    ad::Var x = ad::concat(ps[top], pt[top]);
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        x = res_up_block(x, ad::concat(ps[li], pt[li]), block_vars(params, dec_prefix(l)));
    }
    return ad::conv3d(x, params("head.w"), params("head.b"), 1);
}

DisplacementField subnet_forward(const Volume &source_warped, const Volume &target, const ModelParams &params) {
    if (source_warped.shape() != target.shape()) throw ShapeError("subnet_forward: input shapes differ");
    ad::NoGradGuard guard;
    const BoundParams bound(params, false);
    return DisplacementField::from_tensor(
        subnet_forward(ad::constant(source_warped.to_tensor()), ad::constant(target.to_tensor()), bound).value());
}

// ---------------------------------------------------------------------------
// checkpoint

namespace {

constexpr const char *kCheckpointMagic = "RECUREG-CKPT";
constexpr int kCheckpointVersion = 1;

} // namespace

std::string config_to_string(const ModelConfig &cfg) {
    using io_detail::format_double;
    std::ostringstream os;
    os << "base_channels=" << cfg.base_channels << " levels=" << cfg.levels << " heads=" << cfg.heads << " atrous="
       << cfg.atrous_rates[0] << "," << cfg.atrous_rates[1] << "," << cfg.atrous_rates[2] << " kernel=" << cfg.kernel_size
       << " lambda_syn=" << format_double(cfg.lambda_syn) << " lambda_unsup=" << format_double(cfg.lambda_unsup)
       << " similarity=" << to_string(cfg.similarity) << " ncc_window=" << cfg.ncc_window;
    return os.str();
}

ModelConfig config_from_string(const std::string &s) {
    using io_detail::parse_count;
    using io_detail::parse_double;
    ModelConfig cfg;
    for (const std::string &tok : io_detail::split_ws(s)) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) throw FormatError(FormatError::Kind::BadHeader, "malformed config entry '" + tok + "'");
        const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
        if (key == "base_channels") cfg.base_channels = static_cast<int>(parse_count(val, 1 << 16));
        else if (key == "levels") cfg.levels = static_cast<int>(parse_count(val, 16));
        else if (key == "heads") cfg.heads = static_cast<int>(parse_count(val, 1 << 10));
        else if (key == "kernel") cfg.kernel_size = static_cast<int>(parse_count(val, 15));
        else if (key == "lambda_syn") cfg.lambda_syn = parse_double(val);
        else if (key == "lambda_unsup") cfg.lambda_unsup = parse_double(val);
        else if (key == "ncc_window") cfg.ncc_window = static_cast<int>(parse_count(val, 1 << 10));
        else if (key == "similarity") {
            try {
                cfg.similarity = similarity_from_string(val);
            } catch (const ValueError &e) {
                throw FormatError(FormatError::Kind::BadHeader, e.what());
            }
        } else if (key == "atrous") {
            std::size_t start = 0;
            for (std::size_t r = 0; r < 3; ++r) {
                const auto comma = val.find(',', start);
                const bool last = r == 2;
                if (last != (comma == std::string::npos)) throw FormatError(FormatError::Kind::BadHeader, "malformed atrous rates");
                cfg.atrous_rates[r] = static_cast<int>(parse_count(val.substr(start, last ? std::string::npos : comma - start), 64));
                start = comma + 1;
            }
        } else {
            throw FormatError(FormatError::Kind::BadHeader, "unknown config key '" + key + "'");
        }
    }
    try {
        cfg.validate();
    } catch (const ValueError &e) {
        throw FormatError(FormatError::Kind::BadHeader, std::string("invalid model config: ") + e.what());
    }
    return cfg;
}

void write_checkpoint(std::ostream &os, const ModelParams &params) {
    os << kCheckpointMagic << "\n"
       << "version " << kCheckpointVersion << "\n"
       << "config " << config_to_string(params.config()) << "\n"
       << "tensors " << params.tensors().size() << "\n";
    for (const NamedTensor &t : params.tensors()) {
        os << t.name << " " << t.value.rank();
        for (int d : t.value.shape()) os << " " << d;
        os << "\n";
    }
    os << "end\n";
    for (const NamedTensor &t : params.tensors()) {
        std::vector<float> f(t.value.size());
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(t.value[i]);
        io_detail::write_f32_le(os, f);
    }
    if (!os) throw FormatError(FormatError::Kind::Io, "checkpoint write failed");
}

ModelParams read_checkpoint(std::istream &is) {
    using FK = FormatError::Kind;
    std::string magic;
    try {
        magic = io_detail::read_header_line(is, FK::BadMagic);
    } catch (const FormatError &) {
        throw FormatError(FK::BadMagic, "not a recureg checkpoint");
    }
    if (magic != kCheckpointMagic) throw FormatError(FK::BadMagic, "not a recureg checkpoint (bad magic)");
    const auto version = io_detail::split_ws(io_detail::read_header_line(is));
    if (version.size() != 2 || version[0] != "version") throw FormatError(FK::BadHeader, "missing version line");
    if (version[1] != std::to_string(kCheckpointVersion)) throw FormatError(FK::BadVersion, "unsupported checkpoint version " + version[1]);
    const std::string cfg_line = io_detail::read_header_line(is);
    if (cfg_line.rfind("config ", 0) != 0) throw FormatError(FK::BadHeader, "missing config line");
    const ModelConfig cfg = config_from_string(cfg_line.substr(7));
    const auto count_line = io_detail::split_ws(io_detail::read_header_line(is));
    if (count_line.size() != 2 || count_line[0] != "tensors") throw FormatError(FK::BadHeader, "missing tensor count");
    const auto count = static_cast<std::size_t>(io_detail::parse_count(count_line[1], 1 << 20));
    std::vector<NamedTensor> tensors;
    std::size_t total = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const auto tok = io_detail::split_ws(io_detail::read_header_line(is));
        if (tok.size() < 2) throw FormatError(FK::BadHeader, "malformed tensor line");
        const auto rank = static_cast<std::size_t>(io_detail::parse_count(tok[1], 8));
        if (tok.size() != 2 + rank) throw FormatError(FK::BadHeader, "tensor line rank mismatch for " + tok[0]);
        std::vector<int> shape;
        std::size_t n = 1;
        for (std::size_t d = 0; d < rank; ++d) {
            const auto v = io_detail::parse_count(tok[2 + d], 1 << 24);
            shape.push_back(static_cast<int>(v));
            n *= static_cast<std::size_t>(v);
            if (n > (std::size_t{1} << 31)) throw FormatError(FK::DimOverflow, "tensor " + tok[0] + " too large");
        }
        total += n;
        if (total > (std::size_t{1} << 31)) throw FormatError(FK::DimOverflow, "checkpoint too large");
        tensors.push_back({tok[0], Tensor(shape)});
    }
    if (io_detail::read_header_line(is) != "end") throw FormatError(FK::BadHeader, "missing end of header");
    for (NamedTensor &t : tensors) {
        std::vector<float> f(t.value.size());
        io_detail::read_f32_le(is, f);
        for (std::size_t i = 0; i < f.size(); ++i) t.value[i] = f[i];
    }
    try {
        return ModelParams(cfg, std::move(tensors));
    } catch (const FormatError &) {
        throw;
    } catch (const Error &e) {
        throw FormatError(FK::BadHeader, std::string("checkpoint does not match its config: ") + e.what());
    }
}

void write_checkpoint(const std::string &path, const ModelParams &params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path + " for writing");
    write_checkpoint(os, params);
}

ModelParams read_checkpoint(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path);
    return read_checkpoint(is);
}

} // namespace recureg::network
