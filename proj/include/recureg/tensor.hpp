// Dense row-major tensor of doubles, the numeric currency of the compute core.
#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace recureg {

// Row-major storage, last axis fastest. Spatial grids use the shape
// (channels, H, W, T) so that a voxel (i, j, k) of channel c sits at
// ((c * H + i) * W + j) * T + k.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, double fill = 0.0);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, v); }

    const std::vector<int> &shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double *ptr() noexcept { return data_.data(); }
    const double *ptr() const noexcept { return data_.data(); }

    double &operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    // Same data, new shape with equal element count.
    Tensor reshaped(std::vector<int> shape) const;

    void fill(double v);
    // this += other (shapes must match).
    void add_inplace(const Tensor &other);

    bool same_shape(const Tensor &other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;

    std::string shape_string() const;

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

std::size_t element_count(const std::vector<int> &shape);

} // namespace recureg
