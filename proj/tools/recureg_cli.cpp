// recureg command line: phantom generation, training, registration,
// evaluation and the recursion-count sweep.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "recureg/error.hpp"
#include "recureg/fieldops.hpp"
#include "recureg/network.hpp"
#include "recureg/pipeline.hpp"
#include "recureg/synthdata.hpp"

using namespace recureg;
using network::ModelParams;

namespace {

struct ModelFlags {
    std::string preset = "desk";
    std::optional<int> base_channels, levels, heads, ncc_window;
    std::optional<double> lambda_syn, lambda_unsup;
    std::optional<std::string> similarity;

    void add(CLI::App *app) {
        app->add_option("--preset", preset, "Model preset: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
        app->add_option("--base-channels", base_channels, "Channels of encoder level 1");
        app->add_option("--levels", levels, "Encoder levels");
        app->add_option("--heads", heads, "Attention heads (0 disables attention)");
        app->add_option("--similarity", similarity, "ncc or mse");
        app->add_option("--ncc-window", ncc_window, "Local NCC window (odd)");
        app->add_option("--lambda-syn", lambda_syn, "Smoothness weight, synthetic loss");
        app->add_option("--lambda-unsup", lambda_unsup, "Smoothness weight, unsupervised loss");
    }

    ModelConfig build() const {
        ModelConfig cfg = preset == "paper" ? ModelConfig::paper_scale() : ModelConfig::desk();
        if (base_channels) cfg.base_channels = *base_channels;
        if (levels) cfg.levels = *levels;
        if (heads) cfg.heads = *heads;
        if (ncc_window) cfg.ncc_window = *ncc_window;
        if (lambda_syn) cfg.lambda_syn = *lambda_syn;
        if (lambda_unsup) cfg.lambda_unsup = *lambda_unsup;
        if (similarity) cfg.similarity = similarity_from_string(*similarity);
        cfg.validate();
        return cfg;
    }
};

struct TrainFlags {
    double lr = 1e-3;
    int batch = 1;
    int k_train = 2;
    std::vector<int> crop;
    std::string out = "model.ckpt";
    std::string init;
    std::string log;

    void add(CLI::App *app) {
        app->add_option("--lr", lr, "Adam learning rate");
        app->add_option("--batch", batch, "Pairs per batch");
        app->add_option("--k-train", k_train, "Recursion count unrolled during training");
        app->add_option("--crop", crop, "Random crop H W T")->expected(3);
        app->add_option("--out", out, "Checkpoint path");
        app->add_option("--init", init, "Start from this checkpoint");
        app->add_option("--log", log, "Training log file (default stdout)");
    }
};

Shape3 to_shape(const std::vector<int> &v) { return {v.at(0), v.at(1), v.at(2)}; }

void write_text(const std::string &path, const std::function<void(std::ostream &)> &fn) {
    std::ofstream os(path);
    if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path + " for writing");
    fn(os);
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Recursive deformable registration with mutual attention"};
    app.set_config("--config", "", "Key-value config file; command-line flags take precedence");
    app.require_subcommand(1);
    std::uint64_t seed = 0;

    // gen
    auto *gen = app.add_subcommand("gen", "Write a phantom pair corpus and its manifest");
    std::string gen_out = "corpus";
    std::vector<int> gen_shape{16, 16, 16};
    int gen_count = 8, gen_blobs = 4;
    double gen_amp = synth::kDefaultDdfAmplitude, gen_smooth = synth::kDefaultDdfSmoothness;
    gen->add_option("--out", gen_out, "Output directory");
    gen->add_option("--shape", gen_shape, "H W T")->expected(3);
    gen->add_option("--count", gen_count, "Number of pairs");
    gen->add_option("--blobs", gen_blobs, "Blobs (labels) per phantom");
    gen->add_option("--amplitude", gen_amp, "Peak displacement, voxels");
    gen->add_option("--smoothness", gen_smooth, "Field smoothing std, voxels");
    gen->add_option("--seed", seed, "Seed of the first pair");

    // pretrain
    auto *pre = app.add_subcommand("pretrain", "Supervised pretraining on generated fields");
    ModelFlags pre_model;
    TrainFlags pre_train;
    int pre_iters = 200;
    std::vector<int> pre_shape{16, 16, 16};
    int pre_blobs = 4;
    double pre_amp = synth::kDefaultDdfAmplitude, pre_smooth = synth::kDefaultDdfSmoothness;
    pre_model.add(pre);
    pre_train.add(pre);
    pre->add_option("--iters", pre_iters, "Iterations");
    pre->add_option("--shape", pre_shape, "Phantom shape H W T")->expected(3);
    pre->add_option("--blobs", pre_blobs, "Blobs per phantom");
    pre->add_option("--amplitude", pre_amp, "Peak synthetic displacement, voxels");
    pre->add_option("--smoothness", pre_smooth, "Synthetic field smoothing std, voxels");
    pre->add_option("--seed", seed, "Seed");

    // train
    auto *train = app.add_subcommand("train", "Unsupervised training on a pair manifest");
    ModelFlags train_model;
    TrainFlags train_train;
    int train_iters = 500;
    std::string train_manifest;
    train_model.add(train);
    train_train.add(train);
    train->add_option("--manifest", train_manifest, "Training pair manifest")->required();
    train->add_option("--iters", train_iters, "Iterations");
    train->add_option("--seed", seed, "Seed");

    // register
    auto *reg = app.add_subcommand("register", "Register a source volume to a target volume");
    std::string reg_model, reg_source, reg_target, reg_field = "field.ddf", reg_warped = "warped.vol";
    int reg_k = 3;
    reg->add_option("--model", reg_model, "Checkpoint")->required();
    reg->add_option("--source", reg_source, "Source volume")->required();
    reg->add_option("--target", reg_target, "Target volume")->required();
    reg->add_option("--k-infer", reg_k, "Inference recursion count");
    reg->add_option("--out-field", reg_field, "Output displacement field");
    reg->add_option("--out-warped", reg_warped, "Output warped source");
    reg->add_option("--seed", seed, "Seed (unused; registration is deterministic)");

    // evaluate
    auto *ev = app.add_subcommand("evaluate", "Score registrations over a manifest");
    std::string ev_model, ev_manifest, ev_out = "metrics.csv", ev_timing, ev_debug_field;
    int ev_k = 3;
    double ev_pct = 100.0;
    ev->add_option("--model", ev_model, "Checkpoint")->required();
    ev->add_option("--manifest", ev_manifest, "Pair manifest with label maps")->required();
    ev->add_option("--k-infer", ev_k, "Inference recursion count (0 = no registration)");
    ev->add_option("--out", ev_out, "Metric table path");
    ev->add_option("--timing", ev_timing, "Per-pair timing path");
    ev->add_option("--hd-percentile", ev_pct, "Hausdorff percentile (100 = exact maximum)");
    ev->add_option("--debug-field", ev_debug_field, "Score this field for every pair instead of the prediction");
    ev->add_option("--seed", seed, "Seed (unused; evaluation is deterministic)");

    // sweep
    auto *sw = app.add_subcommand("sweep", "Train per k_train, evaluate per k_infer");
    ModelFlags sw_model;
    TrainFlags sw_train;
    std::string sw_train_manifest, sw_test_manifest, sw_table = "sweep.csv", sw_plot = "sweep_plot.dat";
    std::vector<int> sw_kt{1, 2}, sw_ki{1, 2, 3, 4};
    int sw_pre_iters = 0, sw_iters = 500;
    sw_model.add(sw);
    sw_train.add(sw);
    sw->add_option("--train-manifest", sw_train_manifest, "Training manifest")->required();
    sw->add_option("--test-manifest", sw_test_manifest, "Test manifest")->required();
    sw->add_option("--k-train-list", sw_kt, "Training recursion counts");
    sw->add_option("--k-infer-list", sw_ki, "Inference recursion counts");
    sw->add_option("--pretrain-iters", sw_pre_iters, "Synthetic pretraining iterations per model");
    sw->add_option("--iters", sw_iters, "Finetuning iterations per model");
    sw->add_option("--table", sw_table, "Cross table path");
    sw->add_option("--plot", sw_plot, "Plot data path");
    sw->add_option("--seed", seed, "Seed");

    CLI11_PARSE(app, argc, argv);

    try {
        std::unique_ptr<std::ofstream> log_file;
        auto train_config = [&](const ModelFlags &mf, const TrainFlags &tf) {
            pipeline::TrainConfig cfg;
            cfg.model = mf.build();
            cfg.recursion.k_train = tf.k_train;
            cfg.lr = tf.lr;
            cfg.batch_size = tf.batch;
            cfg.seed = seed;
            if (!tf.crop.empty()) cfg.crop = to_shape(tf.crop);
            cfg.checkpoint_path = tf.out;
            if (tf.log.empty()) {
                cfg.log = &std::cout;
            } else {
                log_file = std::make_unique<std::ofstream>(tf.log);
                if (!*log_file) throw FormatError(FormatError::Kind::Io, "cannot open log " + tf.log);
                cfg.log = log_file.get();
            }
            return cfg;
        };
        auto initial = [](const TrainFlags &tf) -> std::optional<ModelParams> {
            if (tf.init.empty()) return std::nullopt;
            return network::read_checkpoint(tf.init);
        };

        if (*gen) {
            const auto entries = synth::write_phantom_corpus(gen_out, to_shape(gen_shape), gen_count, gen_blobs, gen_amp, seed, gen_smooth);
            std::cout << "wrote " << entries.size() << " pairs to " << gen_out << "\n";
        } else if (*pre) {
            pipeline::TrainConfig cfg = train_config(pre_model, pre_train);
            cfg.pretrain_iters = pre_iters;
            cfg.phantom_shape = to_shape(pre_shape);
            cfg.n_blobs = pre_blobs;
            cfg.ddf_amplitude = pre_amp;
            cfg.ddf_smoothness = pre_smooth;
            auto init = initial(pre_train);
            if (init) cfg.model = init->config();
            pipeline::pretrain_synthetic(cfg, std::move(init));
        } else if (*train) {
            pipeline::TrainConfig cfg = train_config(train_model, train_train);
            cfg.finetune_iters = train_iters;
            auto init = initial(train_train);
            if (init) cfg.model = init->config();
            std::vector<synth::PhantomPair> pairs;
            for (auto &ep : pipeline::load_manifest_pairs(train_manifest)) pairs.push_back(std::move(ep.pair));
            if (!cfg.crop) cfg.phantom_shape = pairs.at(0).source.shape();
            pipeline::finetune(cfg, pairs, std::move(init));
        } else if (*reg) {
            const ModelParams params = network::read_checkpoint(reg_model);
            const auto r = pipeline::register_pair(synth::read_volume(reg_source), synth::read_volume(reg_target), params, reg_k);
            synth::write_ddf(reg_field, r.field);
            synth::write_volume(reg_warped, r.warped);
        } else if (*ev) {
            const ModelParams params = network::read_checkpoint(ev_model);
            const auto pairs = pipeline::load_manifest_pairs(ev_manifest);
            pipeline::EvalOptions opt;
            opt.hd_percentile = ev_pct;
            if (!ev_debug_field.empty()) {
                const DisplacementField injected = synth::read_ddf(ev_debug_field);
                opt.field_override = [injected](const std::string &, const DisplacementField &) { return injected; };
            }
            const auto rep = pipeline::evaluate(pairs, params, ev_k, opt);
            auto rows = rep.rows;
            rows.push_back(rep.mean);
            write_text(ev_out, [&](std::ostream &os) { metrics::write_metric_table(os, rows); });
            if (!ev_timing.empty()) write_text(ev_timing, [&](std::ostream &os) { pipeline::write_timing(os, rep.rows, rep.seconds_per_pair); });
            std::cout << "mean dsc=" << rep.mean.dsc << " hd_mm=" << rep.mean.hd_mm << " asd_mm=" << rep.mean.asd_mm
                      << " neg_jdet=" << rep.mean.neg_jdet << "\n";
        } else if (*sw) {
            pipeline::TrainConfig cfg = train_config(sw_model, sw_train);
            cfg.pretrain_iters = sw_pre_iters;
            cfg.finetune_iters = sw_iters;
            std::vector<synth::PhantomPair> train_pairs;
            for (auto &ep : pipeline::load_manifest_pairs(sw_train_manifest)) train_pairs.push_back(std::move(ep.pair));
            if (!cfg.crop) cfg.phantom_shape = train_pairs.at(0).source.shape();
            const auto result = pipeline::ablation_sweep(cfg, train_pairs, pipeline::load_manifest_pairs(sw_test_manifest), sw_kt, sw_ki);
            write_text(sw_table, [&](std::ostream &os) { pipeline::write_sweep_table(os, result); });
            write_text(sw_plot, [&](std::ostream &os) { pipeline::write_sweep_plot(os, result); });
            pipeline::write_sweep_table(std::cout, result);
        }
    } catch (const recureg::Error &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
