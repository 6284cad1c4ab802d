// Spatial-transform algebra: trilinear sampling, warping, field composition,
// finite-difference gradients and Jacobian analysis.
//
// Sampling uses clamp-to-edge: positions outside the grid are clamped to the
// nearest boundary voxel along each axis, and the clamped coordinate carries
// zero derivative.
//
// Composition convention: compose(u, v)(x) = v(x) + u(x + v(x)), so that
// warp(I, compose(u, v)) == warp(warp(I, u), v) up to interpolation error.
#pragma once

#include <array>
#include <cstddef>

#include "recureg/autodiff.hpp"
#include "recureg/core.hpp"

namespace recureg::fieldops {

using Point3 = std::array<double, 3>;

// Eight-corner interpolation stencil for one position.
struct TrilinearStencil {
    std::array<std::size_t, 8> index{};
    std::array<double, 8> weight{};
    // d weight / d position, per axis.
    std::array<std::array<double, 8>, 3> dweight{};
};

// Throws ValueError for a non-finite position.
TrilinearStencil trilinear_stencil(const Shape3 &shape, const Point3 &p);

double trilinear_sample(const Volume &v, const Point3 &p);
Point3 trilinear_sample_vector(const DisplacementField &u, const Point3 &p);

// output(x) = v(x + phi[x]).
Volume warp(const Volume &v, const DisplacementField &phi);
// out[x] = v_res[x] + u_prev(x + v_res[x]).
DisplacementField compose(const DisplacementField &u_prev, const DisplacementField &v_res);

// Per-axis derivative in value units per voxel: central differences inside,
// one-sided at the two boundary samples, zero along axes of extent 1.
// Input (C, H, W, T); output (3C, H, W, T) with channel c * 3 + axis.
Tensor spatial_gradient(const Tensor &grid);
Tensor spatial_gradient(const Volume &v);
Tensor spatial_gradient(const DisplacementField &phi);

// det(I + du/dx) per voxel, shape (1, H, W, T).
Tensor jacobian_determinant(const DisplacementField &phi);

// True for voxels that do not lie on a grid face (axes of extent < 3 have no
// faces excluded). Determinant counts consider interior voxels only.
bool is_interior(const Shape3 &s, int i, int j, int k);

// Number of interior voxels inside `region` whose Jacobian determinant is < 0.
std::size_t count_negative_jacobian(const DisplacementField &phi, const LabelMask &region);

// Nearest-neighbour warps for label data (ties round up, positions clamped).
LabelMap warp_labels(const LabelMap &labels, const DisplacementField &phi);
LabelMask warp_mask(const LabelMask &mask, const DisplacementField &phi);
// Binarizes a soft mask: value >= level.
LabelMask threshold_mask(const Volume &soft, double level = 0.5);

// ---- differentiable variants on (C, H, W, T) / (3, H, W, T) tensors ----

// Warps every channel of `src` by `phi`; gradients flow to both.
ad::Var warp(const ad::Var &src, const ad::Var &phi);
// v_res + warp(u_prev, v_res).
ad::Var compose(const ad::Var &u_prev, const ad::Var &v_res);
ad::Var spatial_gradient(const ad::Var &grid);

} // namespace recureg::fieldops
