#include "recureg/core.hpp"

#include <algorithm>
#include <cmath>

#include "recureg/error.hpp"

namespace recureg {

std::string Shape3::str() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(t);
}

void validate_shape(const Shape3 &s, const char *who) {
    if (s.h < 1 || s.w < 1 || s.t < 1) throw ShapeError(std::string(who) + ": invalid grid shape " + s.str());
}

namespace {

template <typename T>
void require_finite(std::span<const T> v, const char *who) {
    for (T x : v) {
        if (!std::isfinite(x)) throw ValueError(std::string(who) + ": non-finite value");
    }
}

void check_spacing(const Spacing &s) {
    for (double v : s) {
        if (!std::isfinite(v) || v <= 0.0) throw ValueError("spacing components must be finite and positive");
    }
}

std::vector<float> to_floats(std::span<const double> v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------

Volume::Volume(Shape3 shape, std::vector<float> data, Spacing spacing)
    : shape_(shape), data_(std::move(data)), spacing_(spacing) {
    validate_shape(shape_, "Volume");
    if (data_.size() != shape_.voxels()) throw ShapeError("Volume: data size does not match " + shape_.str());
    require_finite<float>(data_, "Volume");
    check_spacing(spacing_);
}

Volume Volume::zeros(Shape3 shape, Spacing spacing) {
    validate_shape(shape, "Volume");
    return Volume(shape, std::vector<float>(shape.voxels(), 0.0f), spacing);
}

Volume Volume::from_tensor(const Tensor &t, Spacing spacing) {
    Shape3 s;
    if (t.rank() == 4 && t.dim(0) == 1) {
        s = {t.dim(1), t.dim(2), t.dim(3)};
    } else if (t.rank() == 3) {
        s = {t.dim(0), t.dim(1), t.dim(2)};
    } else {
        throw ShapeError("Volume::from_tensor: expected (1, H, W, T) or (H, W, T), got " + t.shape_string());
    }
    return Volume(s, to_floats(t.data()), spacing);
}

Tensor Volume::to_tensor() const {
    Tensor t({1, shape_.h, shape_.w, shape_.t});
    for (std::size_t i = 0; i < data_.size(); ++i) t[i] = data_[i];
    return t;
}

// ---------------------------------------------------------------------------

DisplacementField::DisplacementField(Shape3 shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    validate_shape(shape_, "DisplacementField");
    if (data_.size() != shape_.voxels() * 3) throw ShapeError("DisplacementField: data size does not match " + shape_.str());
    require_finite<float>(data_, "DisplacementField");
}

DisplacementField DisplacementField::zeros(Shape3 shape) {
    validate_shape(shape, "DisplacementField");
    return DisplacementField(shape, std::vector<float>(shape.voxels() * 3, 0.0f));
}

DisplacementField DisplacementField::from_tensor(const Tensor &t) {
    if (t.rank() != 4 || t.dim(0) != 3) throw ShapeError("DisplacementField::from_tensor: expected (3, H, W, T), got " + t.shape_string());
    const Shape3 s{t.dim(1), t.dim(2), t.dim(3)};
    const std::size_t n = s.voxels();
    std::vector<float> data(n * 3);
    for (std::size_t v = 0; v < n; ++v)
        for (std::size_t c = 0; c < 3; ++c) data[v * 3 + c] = static_cast<float>(t[c * n + v]);
    return DisplacementField(s, std::move(data));
}

Tensor DisplacementField::to_tensor() const {
    const std::size_t n = shape_.voxels();
    Tensor t({3, shape_.h, shape_.w, shape_.t});
    for (std::size_t v = 0; v < n; ++v)
        for (std::size_t c = 0; c < 3; ++c) t[c * n + v] = data_[v * 3 + c];
    return t;
}

bool DisplacementField::is_zero() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return v == 0.0f; });
}

// ---------------------------------------------------------------------------

LabelMask::LabelMask(Shape3 shape, std::vector<std::uint8_t> data) : shape_(shape), data_(std::move(data)) {
    validate_shape(shape_, "LabelMask");
    if (data_.size() != shape_.voxels()) throw ShapeError("LabelMask: data size does not match " + shape_.str());
    for (auto v : data_)
        if (v > 1) throw ValueError("LabelMask: values must be 0 or 1");
}

LabelMask LabelMask::full(Shape3 shape, bool value) {
    validate_shape(shape, "LabelMask");
    return LabelMask(shape, std::vector<std::uint8_t>(shape.voxels(), value ? 1 : 0));
}

std::size_t LabelMask::count() const noexcept {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

LabelMap::LabelMap(Shape3 shape, std::vector<std::uint8_t> labels) : shape_(shape), data_(std::move(labels)) {
    validate_shape(shape_, "LabelMap");
    if (data_.size() != shape_.voxels()) throw ShapeError("LabelMap: data size does not match " + shape_.str());
}

LabelMask LabelMap::mask_of(std::uint8_t label) const {
    std::vector<std::uint8_t> m(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) m[i] = data_[i] == label ? 1 : 0;
    return LabelMask(shape_, std::move(m));
}

LabelMask LabelMap::foreground() const {
    std::vector<std::uint8_t> m(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) m[i] = data_[i] != 0 ? 1 : 0;
    return LabelMask(shape_, std::move(m));
}

std::vector<std::uint8_t> LabelMap::labels() const {
    std::array<bool, 256> present{};
    for (auto v : data_) present[v] = true;
    std::vector<std::uint8_t> out;
    for (int l = 1; l < 256; ++l)
        if (present[static_cast<std::size_t>(l)]) out.push_back(static_cast<std::uint8_t>(l));
    return out;
}

Volume LabelMap::to_volume(Spacing spacing) const {
    std::vector<float> v(data_.begin(), data_.end());
    return Volume(shape_, std::move(v), spacing);
}

LabelMap LabelMap::from_volume(const Volume &v) {
    std::vector<std::uint8_t> labels(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double r = std::round(static_cast<double>(v[i]));
        if (r < 0.0 || r > 255.0) throw ValueError("LabelMap::from_volume: label out of range");
        labels[i] = static_cast<std::uint8_t>(r);
    }
    return LabelMap(v.shape(), std::move(labels));
}

// ---------------------------------------------------------------------------

FeatureGrid::FeatureGrid(Tensor data) : data_(std::move(data)) {
    if (data_.rank() != 4) throw ShapeError("FeatureGrid: expected (c, h, w, t), got " + data_.shape_string());
    if (data_.dim(0) < 1) throw ShapeError("FeatureGrid: at least one channel required");
    validate_shape(spatial(), "FeatureGrid");
    if (!data_.all_finite()) throw ValueError("FeatureGrid: non-finite value");
}

FlatFeatures flatten_features(const FeatureGrid &f) {
    const Shape3 s = f.spatial();
    return {f.tensor().reshaped({f.channels(), static_cast<int>(s.voxels())}), FlattenOrder{s}};
}

FeatureGrid unflatten_features(const FlatFeatures &flat) {
    const Shape3 &s = flat.order.spatial;
    if (flat.matrix.rank() != 2 || static_cast<std::size_t>(flat.matrix.dim(1)) != s.voxels()) {
        throw ShapeError("unflatten_features: matrix " + flat.matrix.shape_string() + " does not match " + s.str());
    }
    return FeatureGrid(flat.matrix.reshaped({flat.matrix.dim(0), s.h, s.w, s.t}));
}

IndicatorMatrix::IndicatorMatrix(Tensor weights) : data_(std::move(weights)) {
    if (data_.rank() != 2 || data_.dim(0) < 1 || data_.dim(1) < 1) {
        throw ShapeError("IndicatorMatrix: expected non-empty (n_keys, n_queries), got " + data_.shape_string());
    }
    const int rows = data_.dim(0), cols = data_.dim(1);
    for (int j = 0; j < cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < rows; ++i) {
            const double v = (*this)(i, j);
            if (!(v >= 0.0 && v <= 1.0)) throw ValueError("IndicatorMatrix: entry outside [0, 1]");
            s += v;
        }
        if (std::abs(s - 1.0) > kColumnSumTolerance) throw ValueError("IndicatorMatrix: column does not sum to 1");
    }
}

// ---------------------------------------------------------------------------

std::string to_string(Similarity s) { return s == Similarity::LocalNcc ? "local-ncc" : "mse"; }

Similarity similarity_from_string(const std::string &s) {
    if (s == "local-ncc" || s == "ncc") return Similarity::LocalNcc;
    if (s == "mse") return Similarity::Mse;
    throw ValueError("unknown similarity '" + s + "' (expected local-ncc or mse)");
}

int ModelConfig::level_channels(int level) const {
    if (level <= 0) return 1;
    return base_channels << (level - 1);
}

void ModelConfig::validate() const {
    if (base_channels < 1) throw ValueError("ModelConfig: base_channels must be >= 1");
    if (levels < 1 || levels > 8) throw ValueError("ModelConfig: levels must be in [1, 8]");
    if (heads < 0) throw ValueError("ModelConfig: heads must be >= 0");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ValueError("ModelConfig: kernel_size must be odd and positive");
    for (int r : atrous_rates)
        if (r < 1) throw ValueError("ModelConfig: atrous rates must be >= 1");
    if (heads > 0) {
        const int first_attention_level = std::max(1, levels - 1);
        for (int l = first_attention_level; l <= levels; ++l) {
            if (level_channels(l) % heads != 0) {
                throw ValueError("ModelConfig: level " + std::to_string(l) + " channels not divisible by heads");
            }
        }
    }
    if (!(lambda_syn >= 0.0) || !(lambda_unsup >= 0.0)) throw ValueError("ModelConfig: lambdas must be >= 0");
    if (ncc_window < 3 || ncc_window % 2 == 0) throw ValueError("ModelConfig: ncc_window must be odd and >= 3");
}

void ModelConfig::validate_input(const Shape3 &s) const {
    const int factor = 1 << levels;
    if (s.h % factor || s.w % factor || s.t % factor || s.h < factor) {
        throw ShapeError("input " + s.str() + " is not divisible by 2^" + std::to_string(levels));
    }
}

ModelConfig ModelConfig::desk() {
    ModelConfig cfg;
    cfg.base_channels = 8;
    cfg.levels = 3;
    cfg.heads = 2;
    cfg.similarity = Similarity::LocalNcc;
    cfg.ncc_window = 9;
    cfg.lambda_syn = 1.0;
    cfg.lambda_unsup = 3e-5;
    return cfg;
}

ModelConfig ModelConfig::paper_scale() {
    ModelConfig cfg;
    cfg.base_channels = 11;
    cfg.levels = 3;
    cfg.heads = 2;
    return cfg;
}

void RecursionConfig::validate() const {
    if (k_train < 1 || k_infer < 1) throw ValueError("RecursionConfig: recursion counts must be >= 1");
}

} // namespace recureg
