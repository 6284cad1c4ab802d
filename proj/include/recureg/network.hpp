// The registration subnetwork: a weight-sharing (Siamese) residual encoder
// whose two streams exchange features through mutual attention at the two
// coarsest levels, and a residual decoder that regresses a residual
// displacement field at full resolution.
//
// Encoder level 0 is the input image (1 channel). Level l >= 1 is produced by a
// Res-down block with cfg.level_channels(l) outputs; at attention levels the
// merged features retrieved from the other stream are appended, doubling the
// channels carried forward. The decoder starts from both streams' coarsest
// features and walks back up with Res-up blocks whose skips are both streams'
// features at that level. The output head is a 3-channel convolution
// initialised to zero, so a fresh model predicts the identity transform.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recureg/attention.hpp"
#include "recureg/autodiff.hpp"
#include "recureg/core.hpp"

namespace recureg::network {

inline constexpr double kLeakySlope = 0.2;

enum class InitKind { He, Attention, Zero };

struct ParamSpec {
    std::string name;
    std::vector<int> shape;
    InitKind init = InitKind::He;
    int fan_in = 1;
};

// Ordered list of named weight tensors.
class ParamLayout {
public:
    void add(ParamSpec spec);
    // Adds "<prefix>.w" (co, ci, k, k, k) and optionally "<prefix>.b" (co).
    void add_conv(const std::string &prefix, int ci, int co, int kernel, bool bias, InitKind init = InitKind::He);

    const std::vector<ParamSpec> &specs() const noexcept { return specs_; }
    std::size_t scalar_count() const;

private:
    std::vector<ParamSpec> specs_;
};

ParamLayout model_layout(const ModelConfig &cfg);
// Exact number of scalar weights in a model built from cfg.
std::size_t parameter_count(const ModelConfig &cfg);

// Levels (1-based) whose features pass through mutual attention.
std::vector<int> attention_levels(const ModelConfig &cfg);
// Channels carried forward from encoder level l (after attention concatenation).
int stream_channels(const ModelConfig &cfg, int level);

struct NamedTensor {
    std::string name;
    Tensor value;
};

// All trainable weights of the subnetwork. Values are kept at float precision
// so checkpoints reproduce them exactly.
class ModelParams {
public:
    ModelParams() = default;
    // Validates names and shapes against model_layout(cfg).
    ModelParams(ModelConfig cfg, std::vector<NamedTensor> tensors);

    static ModelParams initialize(const ModelConfig &cfg, std::uint64_t seed);

    const ModelConfig &config() const noexcept { return cfg_; }
    const std::vector<NamedTensor> &tensors() const noexcept { return tensors_; }
    std::size_t scalar_count() const;
    bool has(std::string_view name) const;
    const Tensor &at(std::string_view name) const;
    Tensor &at(std::string_view name);
    // Replaces every tensor value (same order and shapes), rounding to float.
    void assign(std::vector<Tensor> values);

    bool operator==(const ModelParams &other) const;

private:
    std::size_t index_of(std::string_view name) const;

    ModelConfig cfg_;
    std::vector<NamedTensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Rounds every element to the nearest float.
void round_to_float(Tensor &t);

// Graph leaves for every parameter of a model.
class BoundParams {
public:
    BoundParams(const ModelParams &params, bool requires_grad);

    const ModelConfig &config() const noexcept { return cfg_; }
    const ad::Var &operator()(std::string_view name) const;
    bool has(std::string_view name) const;
    const std::vector<ad::Var> &vars() const noexcept { return vars_; }
    // Gradients after ad::backward(), in parameter order.
    std::vector<Tensor> gradients() const;

private:
    ModelConfig cfg_;
    std::vector<ad::Var> vars_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---- blocks ----

struct ConvParams {
    Tensor weight; // (co, ci, k, k, k)
    Tensor bias;   // (co)
    int dilation = 1;
};

// One convolution per atrous rate, then a residual skip (1x1x1 projection
// when channel counts differ, identity otherwise).
struct BlockParams {
    std::vector<ConvParams> convs;
    Tensor skip; // (co, ci, 1, 1, 1) or empty
};

struct ConvVars {
    ad::Var weight, bias;
    int dilation = 1;
};

struct BlockVars {
    std::vector<ConvVars> convs;
    ad::Var skip;
};

BlockParams block_params(const ModelParams &params, const std::string &prefix);
BlockVars block_vars(const BoundParams &params, const std::string &prefix);
BlockVars bind(const BlockParams &p, bool requires_grad);

// Randomly initialised standalone block, for experiments and tests.
BlockParams make_block(int ci, int co, const std::array<int, 3> &rates, int kernel, std::uint64_t seed);

ad::Var res_down_block(const ad::Var &x, const BlockVars &p);
ad::Var res_up_block(const ad::Var &x, const ad::Var &skip, const BlockVars &p);
FeatureGrid res_down_block(const FeatureGrid &f, const BlockParams &p);
FeatureGrid res_up_block(const FeatureGrid &f, const FeatureGrid &skip, const BlockParams &p);

attention::ProjectionVars attention_vars(const BoundParams &params, int level);

// ---- full network ----

using FeaturePyramid = std::vector<FeatureGrid>;
using VarPyramid = std::vector<ad::Var>;

// Inputs are (1, H, W, T) grids. Returns one feature map per level 0..L.
std::pair<VarPyramid, VarPyramid> siamese_encode(const ad::Var &a, const ad::Var &b, const BoundParams &params);
std::pair<FeaturePyramid, FeaturePyramid> siamese_encode(const Volume &a, const Volume &b, const ModelParams &params);

// Residual displacement field (3, H, W, T).
ad::Var subnet_forward(const ad::Var &source_warped, const ad::Var &target, const BoundParams &params);
DisplacementField subnet_forward(const Volume &source_warped, const Volume &target, const ModelParams &params);

// ---- checkpoint file ----
//
//   RECUREG-CKPT\n
//   version 1\n
//   config <key=value ...>\n
//   tensors <count>\n
//   <name> <rank> <d0> ... \n      (one line per tensor, in order)
//   end\n
//   <little-endian float32 payload, tensors concatenated in order>

void write_checkpoint(std::ostream &os, const ModelParams &params);
ModelParams read_checkpoint(std::istream &is);
void write_checkpoint(const std::string &path, const ModelParams &params);
ModelParams read_checkpoint(const std::string &path);

std::string config_to_string(const ModelConfig &cfg);
ModelConfig config_from_string(const std::string &s);

} // namespace recureg::network
