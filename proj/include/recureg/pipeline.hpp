// Recursive registration, Adam, the two training regimes, evaluation and the
// recursion-count sweep.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "recureg/autodiff.hpp"
#include "recureg/core.hpp"
#include "recureg/losses.hpp"
#include "recureg/metrics.hpp"
#include "recureg/network.hpp"
#include "recureg/synthdata.hpp"

namespace recureg::pipeline {

using network::ModelParams;

struct TrainConfig {
    ModelConfig model = ModelConfig::desk();
    RecursionConfig recursion;
    double lr = 1e-3;
    int batch_size = 1;
    int pretrain_iters = 200;
    int finetune_iters = 500;
    std::uint64_t seed = 0;

    // Synthetic pairs drawn during pretraining.
    Shape3 phantom_shape{16, 16, 16};
    int n_blobs = 4;
    double ddf_amplitude = synth::kDefaultDdfAmplitude;
    double ddf_smoothness = synth::kDefaultDdfSmoothness;

    // Random crop applied to every training pair; unset trains on full volumes.
    std::optional<Shape3> crop;

    // Latest checkpoint, rewritten every max(1, iters / 10) iterations and at
    // the end. Empty disables checkpointing.
    std::string checkpoint_path;
    // Training log (one line per iteration); may be null.
    std::ostream *log = nullptr;

    void validate() const;
};

struct OptimizerState {
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEpsilon = 1e-8;

    std::vector<Tensor> m, v;
    long step = 0;

    static OptimizerState for_params(const ModelParams &params);
};

// One bias-corrected Adam update. Results are rounded to float like every
// stored parameter.
void adam_step(ModelParams &params, const std::vector<Tensor> &grads, OptimizerState &state, double lr);

struct Registration {
    DisplacementField field;
    Volume warped;
};

// phi_0 = 0; phi_k = compose(phi_{k-1}, R(warp(source, phi_{k-1}), target)).
// k_infer = 0 returns the identity (the pre-registration baseline).
Registration register_pair(const Volume &source, const Volume &target, const ModelParams &params, int k_infer);

// Differentiable unrolled recursion; returns phi_k.
ad::Var unroll(const ad::Var &source, const ad::Var &target, const network::BoundParams &params, int k);

struct TrainResult {
    ModelParams params;
    // history[i] is the batch-mean loss evaluated before update i.
    std::vector<losses::LossReport> history;
    std::vector<int> checkpoint_steps;
};

// Supervised regime on generated pairs with known fields. Only the final
// composed field is supervised. `init` defaults to a fresh model from cfg.seed.
TrainResult pretrain_synthetic(const TrainConfig &cfg, std::optional<ModelParams> init = std::nullopt);

// Unsupervised regime on image pairs. Batches draw distinct pairs.
TrainResult finetune(const TrainConfig &cfg, const std::vector<synth::PhantomPair> &pairs,
                     std::optional<ModelParams> init = std::nullopt);

struct EvalPair {
    std::string id;
    synth::PhantomPair pair;
};

std::vector<EvalPair> load_manifest_pairs(const std::string &manifest_path);

struct EvalOptions {
    double hd_percentile = 100.0;
    // Debug hook: replaces the predicted field of a pair before scoring.
    std::function<DisplacementField(const std::string &id, const DisplacementField &predicted)> field_override;
};

struct EvalReport {
    std::vector<metrics::MetricRow> rows;
    metrics::MetricRow mean;
    std::vector<double> seconds_per_pair; // measured, never part of the table
};

// Registers every pair, warps the source labels (nearest neighbour) and scores
// them against the target labels. The folding count covers the target's
// foreground.
EvalReport evaluate(const std::vector<EvalPair> &pairs, const ModelParams &params, int k_infer, const EvalOptions &opt = {});

// Timing as "pair_id,seconds" lines.
void write_timing(std::ostream &os, const std::vector<metrics::MetricRow> &rows, const std::vector<double> &seconds);

struct SweepCell {
    int k_train = 0;
    int k_infer = 0;
    metrics::MetricRow mean;
    double seconds_per_pair = 0.0;
};

struct SweepResult {
    std::vector<SweepCell> cells; // k_train major
    metrics::MetricRow pre_registration;
};

// Trains one model per k_train (optional synthetic pretraining, then
// finetuning on `train`), evaluates each on `test` at every k_infer.
SweepResult ablation_sweep(const TrainConfig &cfg, const std::vector<synth::PhantomPair> &train, const std::vector<EvalPair> &test,
                           const std::vector<int> &k_train_list, const std::vector<int> &k_infer_list);

// k_train,k_infer,dsc,hd_mm,asd_mm,neg_jdet
void write_sweep_table(std::ostream &os, const SweepResult &r);
// Whitespace columns: k_infer, then mean DSC per k_train (plot-ready).
void write_sweep_plot(std::ostream &os, const SweepResult &r);

// Pairs generated from consecutive seeds starting at `seed`.
std::vector<synth::PhantomPair> phantom_corpus(const Shape3 &shape, int count, int n_blobs, double amplitude, double smoothness,
                                               std::uint64_t seed);

} // namespace recureg::pipeline
