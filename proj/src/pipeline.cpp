#include "recureg/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <ostream>
#include <random>

#include "recureg/error.hpp"
#include "recureg/fieldops.hpp"

namespace recureg::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed ^ (stream * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull);
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void save_checkpoint(const std::string &path, const ModelParams &params) {
    const std::string tmp = path + ".tmp";
    network::write_checkpoint(tmp, params);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw FormatError(FormatError::Kind::Io, "cannot move checkpoint into place: " + path);
}

struct BatchLoss {
    ad::Var total;
    losses::LossReport report;
};

// Shared driver for both regimes: `batch_loss(iter)` builds the graph for one
// batch over the given bound parameters.
template <typename BatchFn>
TrainResult train_loop(const TrainConfig &cfg, const char *stage, int iters, ModelParams params, BatchFn &&batch_loss) {
    TrainResult result;
    OptimizerState opt = OptimizerState::for_params(params);
    const int cadence = std::max(1, iters / 10);
    const auto t0 = Clock::now();
    for (int it = 0; it < iters; ++it) {
        const network::BoundParams bound(params, true);
        BatchLoss loss = batch_loss(it, bound);
        const losses::LossReport &r = loss.report;
        if (!std::isfinite(r.total) || !std::isfinite(r.similarity_term) || !std::isfinite(r.regularization_term)) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "%s: non-finite loss at iteration %d (total=%g similarity=%g regularization=%g)", stage, it,
                          r.total, r.similarity_term, r.regularization_term);
            throw DivergenceError(buf);
        }
        result.history.push_back(r);
        ad::backward(loss.total);
        adam_step(params, bound.gradients(), opt, cfg.lr);
        if (cfg.log) {
            char buf[256];
            std::snprintf(buf, sizeof buf, "stage=%s iter=%d total=%.9g similarity=%.9g regularization=%.9g lambda=%g wall_s=%.3f\n",
                          stage, it, r.total, r.similarity_term, r.regularization_term, r.lambda, seconds_since(t0));
            *cfg.log << buf << std::flush;
        }
        const int done = it + 1;
        if (!cfg.checkpoint_path.empty() && (done % cadence == 0 || done == iters)) {
            save_checkpoint(cfg.checkpoint_path, params);
            result.checkpoint_steps.push_back(done);
        }
    }
    if (!cfg.checkpoint_path.empty() && iters == 0) save_checkpoint(cfg.checkpoint_path, params);
    result.params = std::move(params);
    return result;
}

BatchLoss average(const std::vector<losses::LossTerms> &terms) {
    const double inv = 1.0 / static_cast<double>(terms.size());
    std::vector<ad::Var> totals;
    losses::LossReport rep;
    for (const losses::LossTerms &t : terms) {
        totals.push_back(t.total);
        const losses::LossReport r = t.report();
        rep.total += r.total * inv;
        rep.similarity_term += r.similarity_term * inv;
        rep.regularization_term += r.regularization_term * inv;
        rep.lambda = r.lambda;
    }
    ad::Var sum = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) sum = ad::add(sum, totals[i]);
    return {ad::scale(sum, inv), rep};
}

synth::PhantomPair maybe_crop(const TrainConfig &cfg, const synth::PhantomPair &p, std::uint64_t seed) {
    if (!cfg.crop) return p;
    return synth::random_crop(p, *cfg.crop, seed, 1 << cfg.model.levels);
}

} // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    model.validate();
    recursion.validate();
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ValueError("TrainConfig: lr must be > 0");
    if (batch_size < 1) throw ValueError("TrainConfig: batch_size must be >= 1");
    if (pretrain_iters < 0 || finetune_iters < 0) throw ValueError("TrainConfig: iteration counts must be >= 0");
    if (n_blobs < 1) throw ValueError("TrainConfig: n_blobs must be >= 1");
    model.validate_input(crop ? *crop : phantom_shape);
}

OptimizerState OptimizerState::for_params(const ModelParams &params) {
    OptimizerState s;
    for (const auto &t : params.tensors()) {
        s.m.emplace_back(t.value.shape());
        s.v.emplace_back(t.value.shape());
    }
    return s;
}

void adam_step(ModelParams &params, const std::vector<Tensor> &grads, OptimizerState &state, double lr) {
    const auto &tensors = params.tensors();
    if (grads.size() != tensors.size() || state.m.size() != tensors.size() || state.v.size() != tensors.size()) {
        throw ShapeError("adam_step: gradient / state count does not match parameters");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (!grads[i].same_shape(tensors[i].value) || !state.m[i].same_shape(tensors[i].value)) {
            throw ShapeError("adam_step: shape mismatch for " + tensors[i].name);
        }
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(OptimizerState::kBeta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(OptimizerState::kBeta2, static_cast<double>(state.step));
    std::vector<Tensor> next;
    next.reserve(tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        Tensor p = tensors[i].value;
        Tensor &m = state.m[i];
        Tensor &v = state.v[i];
        const Tensor &g = grads[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = OptimizerState::kBeta1 * m[j] + (1.0 - OptimizerState::kBeta1) * g[j];
            v[j] = OptimizerState::kBeta2 * v[j] + (1.0 - OptimizerState::kBeta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + OptimizerState::kEpsilon);
        }
        next.push_back(std::move(p));
    }
    params.assign(std::move(next));
}

Registration register_pair(const Volume &source, const Volume &target, const ModelParams &params, int k_infer) {
    if (source.shape() != target.shape()) throw ShapeError("register_pair: source and target shapes differ");
    if (k_infer < 0) throw ValueError("register_pair: k_infer must be >= 0");
    params.config().validate_input(source.shape());
    DisplacementField phi = DisplacementField::zeros(source.shape());
    Volume warped = source;
    for (int k = 0; k < k_infer; ++k) {
        const DisplacementField residual = network::subnet_forward(warped, target, params);
        phi = k == 0 ? residual : fieldops::compose(phi, residual);
        warped = fieldops::warp(source, phi);
    }
    return {phi, warped};
}

ad::Var unroll(const ad::Var &source, const ad::Var &target, const network::BoundParams &params, int k) {
    if (k < 1) throw ValueError("unroll: k must be >= 1");
    ad::Var phi = network::subnet_forward(source, target, params);
    for (int i = 1; i < k; ++i) {
        const ad::Var residual = network::subnet_forward(fieldops::warp(source, phi), target, params);
        phi = fieldops::compose(phi, residual);
    }
    return phi;
}

TrainResult pretrain_synthetic(const TrainConfig &cfg, std::optional<ModelParams> init) {
    cfg.validate();
    ModelParams params = init ? std::move(*init) : ModelParams::initialize(cfg.model, cfg.seed);
    if (!(params.config() == cfg.model)) throw ValueError("pretrain_synthetic: initial parameters built from a different config");
    return train_loop(cfg, "pretrain", cfg.pretrain_iters, std::move(params), [&](int it, const network::BoundParams &bound) {
        std::vector<losses::LossTerms> terms;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::uint64_t s = mix(cfg.seed, 0x5e000000ull + static_cast<std::uint64_t>(it) * cfg.batch_size + b);
            const synth::PhantomPair p =
                maybe_crop(cfg, synth::gen_phantom_pair(cfg.phantom_shape, cfg.n_blobs, cfg.ddf_amplitude, s, cfg.ddf_smoothness), s);
            const ad::Var src = ad::constant(p.source.to_tensor());
            const ad::Var tgt = ad::constant(p.target.to_tensor());
            const ad::Var phi = unroll(src, tgt, bound, cfg.recursion.k_train);
            terms.push_back(losses::loss_synthetic(phi, ad::constant(p.gt_field->to_tensor()), cfg.model.lambda_syn));
        }
        return average(terms);
    });
}

TrainResult finetune(const TrainConfig &cfg, const std::vector<synth::PhantomPair> &pairs, std::optional<ModelParams> init) {
    cfg.validate();
    if (pairs.empty()) throw ValueError("finetune: no training pairs");
    if (static_cast<std::size_t>(cfg.batch_size) > pairs.size()) throw ValueError("finetune: batch_size exceeds the number of pairs");
    ModelParams params = init ? std::move(*init) : ModelParams::initialize(cfg.model, cfg.seed);
    if (!(params.config() == cfg.model)) throw ValueError("finetune: initial parameters built from a different config");
    std::mt19937_64 rng(mix(cfg.seed, 0xf1e7));
    std::vector<std::size_t> order(pairs.size());
    return train_loop(cfg, "finetune", cfg.finetune_iters, std::move(params), [&](int it, const network::BoundParams &bound) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Partial Fisher-Yates: the first batch_size entries are distinct pairs.
        for (int b = 0; b < cfg.batch_size; ++b) {
            std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(b), order.size() - 1);
            std::swap(order[static_cast<std::size_t>(b)], order[pick(rng)]);
        }
        std::vector<losses::LossTerms> terms;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const std::uint64_t s = mix(cfg.seed, 0xc0000000ull + static_cast<std::uint64_t>(it) * cfg.batch_size + b);
            const synth::PhantomPair p = maybe_crop(cfg, pairs[order[static_cast<std::size_t>(b)]], s);
            const ad::Var src = ad::constant(p.source.to_tensor());
            const ad::Var tgt = ad::constant(p.target.to_tensor());
            const ad::Var phi = unroll(src, tgt, bound, cfg.recursion.k_train);
            terms.push_back(losses::loss_unsupervised(src, tgt, phi, cfg.model));
        }
        return average(terms);
    });
}

std::vector<EvalPair> load_manifest_pairs(const std::string &manifest_path) {
    std::vector<EvalPair> out;
    for (const synth::ManifestEntry &e : synth::read_manifest(manifest_path)) out.push_back({e.id, synth::load_pair(e)});
    return out;
}

EvalReport evaluate(const std::vector<EvalPair> &pairs, const ModelParams &params, int k_infer, const EvalOptions &opt) {
    EvalReport rep;
    for (const EvalPair &ep : pairs) {
        const synth::PhantomPair &p = ep.pair;
        if (p.source_labels.shape() != p.source.shape() || p.target_labels.shape() != p.target.shape()) {
            throw ValueError("evaluate: pair " + ep.id + " is missing label maps");
        }
        const auto t0 = Clock::now();
        DisplacementField phi = register_pair(p.source, p.target, params, k_infer).field;
        const double secs = seconds_since(t0);
        if (opt.field_override) {
            phi = opt.field_override(ep.id, phi);
            if (phi.shape() != p.source.shape()) throw ShapeError("evaluate: override field shape mismatch for " + ep.id);
        }
        const LabelMap warped = fieldops::warp_labels(p.source_labels, phi);
        metrics::MetricRow row = metrics::score_labels(ep.id, warped, p.target_labels, p.target.spacing(), opt.hd_percentile);
        row.neg_jdet = static_cast<double>(fieldops::count_negative_jacobian(phi, p.target_labels.foreground()));
        rep.rows.push_back(std::move(row));
        rep.seconds_per_pair.push_back(secs);
    }
    rep.mean = metrics::mean_row(rep.rows);
    return rep;
}

void write_timing(std::ostream &os, const std::vector<metrics::MetricRow> &rows, const std::vector<double> &seconds) {
    os << "pair_id,seconds\n";
    for (std::size_t i = 0; i < rows.size() && i < seconds.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f", seconds[i]);
        os << rows[i].pair_id << "," << buf << "\n";
    }
}

SweepResult ablation_sweep(const TrainConfig &cfg, const std::vector<synth::PhantomPair> &train, const std::vector<EvalPair> &test,
                           const std::vector<int> &k_train_list, const std::vector<int> &k_infer_list) {
    if (k_train_list.empty() || k_infer_list.empty()) throw ValueError("ablation_sweep: empty recursion list");
    for (int k : k_infer_list)
        if (k < 1) throw ValueError("ablation_sweep: k_infer values must be >= 1");
    SweepResult out;
    const ModelParams fresh = ModelParams::initialize(cfg.model, cfg.seed);
    out.pre_registration = evaluate(test, fresh, 0).mean;
    for (int kt : k_train_list) {
        TrainConfig c = cfg;
        c.recursion.k_train = kt;
        if (!cfg.checkpoint_path.empty()) c.checkpoint_path = cfg.checkpoint_path + ".k" + std::to_string(kt);
        std::optional<ModelParams> init;
        if (c.pretrain_iters > 0) init = pretrain_synthetic(c).params;
        const ModelParams params = finetune(c, train, std::move(init)).params;
        for (int ki : k_infer_list) {
            const EvalReport r = evaluate(test, params, ki);
            SweepCell cell{kt, ki, r.mean, 0.0};
            for (double s : r.seconds_per_pair) cell.seconds_per_pair += s;
            if (!r.seconds_per_pair.empty()) cell.seconds_per_pair /= static_cast<double>(r.seconds_per_pair.size());
            out.cells.push_back(cell);
        }
    }
    return out;
}

void write_sweep_table(std::ostream &os, const SweepResult &r) {
    os << "k_train,k_infer,dsc,hd_mm,asd_mm,neg_jdet\n";
    char buf[256];
    for (const SweepCell &c : r.cells) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g\n", c.k_train, c.k_infer, c.mean.dsc, c.mean.hd_mm, c.mean.asd_mm,
                      c.mean.neg_jdet);
        os << buf;
    }
}

void write_sweep_plot(std::ostream &os, const SweepResult &r) {
    std::vector<int> ktrain, kinfer;
    for (const SweepCell &c : r.cells) {
        if (std::find(ktrain.begin(), ktrain.end(), c.k_train) == ktrain.end()) ktrain.push_back(c.k_train);
        if (std::find(kinfer.begin(), kinfer.end(), c.k_infer) == kinfer.end()) kinfer.push_back(c.k_infer);
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", r.pre_registration.dsc);
    os << "# mean DSC by inference recursion count; pre-registration DSC " << buf << "\n# k_infer";
    for (int kt : ktrain) os << " k_train=" << kt;
    os << "\n";
    for (int ki : kinfer) {
        os << ki;
        for (int kt : ktrain) {
            auto it = std::find_if(r.cells.begin(), r.cells.end(), [&](const SweepCell &c) { return c.k_train == kt && c.k_infer == ki; });
            std::snprintf(buf, sizeof buf, " %.9g", it == r.cells.end() ? std::nan("") : it->mean.dsc);
            os << buf;
        }
        os << "\n";
    }
}

std::vector<synth::PhantomPair> phantom_corpus(const Shape3 &shape, int count, int n_blobs, double amplitude, double smoothness,
                                               std::uint64_t seed) {
    std::vector<synth::PhantomPair> out;
    for (int i = 0; i < count; ++i) out.push_back(synth::gen_phantom_pair(shape, n_blobs, amplitude, seed + static_cast<std::uint64_t>(i), smoothness));
    return out;
}

} // namespace recureg::pipeline
