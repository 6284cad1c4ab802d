// Domain types shared by every module.
//
// Memory layout is row-major with the last spatial axis fastest everywhere:
// voxel (i, j, k) of an (H, W, T) grid lives at (i * W + j) * T + k. Axis 0 is
// H, axis 1 is W, axis 2 is T, and displacement component c moves along
// axis c. Displacements are in voxel units; spacing is metadata used only to
// express distances in millimetres.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "recureg/tensor.hpp"

namespace recureg {

struct Shape3 {
    int h = 0, w = 0, t = 0;

    std::size_t voxels() const noexcept {
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(t);
    }
    int operator[](int axis) const { return axis == 0 ? h : (axis == 1 ? w : t); }
    std::size_t index(int i, int j, int k) const noexcept {
        return (static_cast<std::size_t>(i) * w + j) * t + k;
    }
    bool contains(int i, int j, int k) const noexcept {
        return i >= 0 && j >= 0 && k >= 0 && i < h && j < w && k < t;
    }
    bool operator==(const Shape3 &) const = default;
    std::string str() const;
};

using Spacing = std::array<double, 3>;

// Throws ShapeError unless every extent is >= 1.
void validate_shape(const Shape3 &s, const char *who);

// Scalar intensity grid.
class Volume {
public:
    Volume() = default;
    Volume(Shape3 shape, std::vector<float> data, Spacing spacing = {1.0, 1.0, 1.0});

    static Volume zeros(Shape3 shape, Spacing spacing = {1.0, 1.0, 1.0});
    // Accepts (1, H, W, T) or (H, W, T); values are rounded to float.
    static Volume from_tensor(const Tensor &t, Spacing spacing = {1.0, 1.0, 1.0});

    Tensor to_tensor() const; // (1, H, W, T)

    const Shape3 &shape() const noexcept { return shape_; }
    const Spacing &spacing() const noexcept { return spacing_; }
    std::span<const float> data() const noexcept { return data_; }
    float at(int i, int j, int k) const { return data_[shape_.index(i, j, k)]; }
    float operator[](std::size_t idx) const { return data_[idx]; }
    std::size_t size() const noexcept { return data_.size(); }

    Volume with_spacing(Spacing s) const { return Volume(shape_, data_, s); }

private:
    Shape3 shape_;
    std::vector<float> data_;
    Spacing spacing_{1.0, 1.0, 1.0};
};

// Dense displacement field, stored (H, W, T, 3) with the component fastest.
class DisplacementField {
public:
    DisplacementField() = default;
    DisplacementField(Shape3 shape, std::vector<float> data);

    static DisplacementField zeros(Shape3 shape);
    // Accepts a planar (3, H, W, T) tensor.
    static DisplacementField from_tensor(const Tensor &t);
    Tensor to_tensor() const; // (3, H, W, T)

    const Shape3 &shape() const noexcept { return shape_; }
    std::span<const float> data() const noexcept { return data_; }
    float at(int i, int j, int k, int c) const { return data_[shape_.index(i, j, k) * 3 + static_cast<std::size_t>(c)]; }
    bool is_zero() const noexcept;

private:
    Shape3 shape_;
    std::vector<float> data_;
};

// Binary region mask; values are 0 or 1.
class LabelMask {
public:
    LabelMask() = default;
    LabelMask(Shape3 shape, std::vector<std::uint8_t> data);

    static LabelMask full(Shape3 shape, bool value);

    const Shape3 &shape() const noexcept { return shape_; }
    std::span<const std::uint8_t> data() const noexcept { return data_; }
    bool at(int i, int j, int k) const { return data_[shape_.index(i, j, k)] != 0; }
    bool operator[](std::size_t idx) const { return data_[idx] != 0; }
    std::size_t count() const noexcept;
    bool empty() const noexcept { return count() == 0; }

private:
    Shape3 shape_;
    std::vector<std::uint8_t> data_;
};

// Integer segmentation, 0 is background. Phantoms and evaluation carry one of
// these per image; per-label binary masks are extracted on demand.
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(Shape3 shape, std::vector<std::uint8_t> labels);

    const Shape3 &shape() const noexcept { return shape_; }
    std::span<const std::uint8_t> data() const noexcept { return data_; }
    std::uint8_t at(int i, int j, int k) const { return data_[shape_.index(i, j, k)]; }

    LabelMask mask_of(std::uint8_t label) const;
    LabelMask foreground() const;
    // Sorted distinct non-zero labels.
    std::vector<std::uint8_t> labels() const;

    Volume to_volume(Spacing spacing = {1.0, 1.0, 1.0}) const;
    // Rounds each value to the nearest integer label; throws outside [0, 255].
    static LabelMap from_volume(const Volume &v);

private:
    Shape3 shape_;
    std::vector<std::uint8_t> data_;
};

// Multi-channel feature map (c, h, w, t).
class FeatureGrid {
public:
    FeatureGrid() = default;
    explicit FeatureGrid(Tensor data);

    const Tensor &tensor() const noexcept { return data_; }
    int channels() const { return data_.dim(0); }
    Shape3 spatial() const { return {data_.dim(1), data_.dim(2), data_.dim(3)}; }
    std::size_t positions() const { return spatial().voxels(); }

private:
    Tensor data_;
};

// Records the spatial extents a feature matrix was flattened from.
struct FlattenOrder {
    Shape3 spatial;
    // Column of the flattened matrix holding voxel (i, j, k).
    std::size_t column(int i, int j, int k) const { return spatial.index(i, j, k); }
};

struct FlatFeatures {
    Tensor matrix; // (c, n'), column j is one voxel in last-axis-fastest order
    FlattenOrder order;
};

FlatFeatures flatten_features(const FeatureGrid &f);
FeatureGrid unflatten_features(const FlatFeatures &flat);

// Attention weights, rows indexed by key positions and columns by query
// positions. Every column is a probability distribution.
class IndicatorMatrix {
public:
    static constexpr double kColumnSumTolerance = 1e-5;

    IndicatorMatrix() = default;
    explicit IndicatorMatrix(Tensor weights);

    const Tensor &tensor() const noexcept { return data_; }
    int keys() const { return data_.dim(0); }
    int queries() const { return data_.dim(1); }
    double operator()(int key, int query) const {
        return data_[static_cast<std::size_t>(key) * static_cast<std::size_t>(queries()) + static_cast<std::size_t>(query)];
    }

private:
    Tensor data_;
};

enum class Similarity { LocalNcc, Mse };

std::string to_string(Similarity s);
Similarity similarity_from_string(const std::string &s);

struct ModelConfig {
    int base_channels = 8;
    int levels = 4;
    int heads = 2;
    std::array<int, 3> atrous_rates{1, 1, 3};
    int kernel_size = 3;
    double lambda_syn = 1.0;
    double lambda_unsup = 1.0;
    Similarity similarity = Similarity::LocalNcc;
    int ncc_window = 9;

    // Encoder output channels of level l (1-based); level 0 is the image itself.
    int level_channels(int level) const;
    // Throws ValueError on an invalid configuration.
    void validate() const;
    // Throws ShapeError unless every axis is divisible by 2^levels.
    void validate_input(const Shape3 &s) const;

    // Defaults tuned for 16^3 to 32^3 phantoms on a CPU.
    static ModelConfig desk();
    // Widths sized to the reference model's parameter budget.
    static ModelConfig paper_scale();

    bool operator==(const ModelConfig &) const = default;
};

struct RecursionConfig {
    int k_train = 2;
    int k_infer = 3;

    void validate() const;
};

} // namespace recureg
