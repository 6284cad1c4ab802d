// Training objectives.
//
//   synthetic:     sum |phi - phi_gt|^2 + lambda * sum |grad phi|^2
//   unsupervised:  D(warp(source, phi), target)
//                  + lambda * sum_x sum_{9 entries} (w(x) * d phi_c / d x_a)^2
//                  with w(x) = exp(-|grad target(x)|^2)
//
// D is either mean squared error or negative mean local squared normalised
// cross-correlation. Sums and means traverse voxels in layout order.
#pragma once

#include "recureg/autodiff.hpp"
#include "recureg/core.hpp"

namespace recureg::losses {

inline constexpr double kNccEpsilon = 1e-5;

struct LossReport {
    double total = 0.0;
    double similarity_term = 0.0;
    double regularization_term = 0.0;
    double lambda = 0.0;
};

double mse(const Volume &a, const Volume &b);
// Negative mean over voxels of the squared correlation coefficient in a
// window x window x window box centred on each voxel, clipped to the grid.
double local_ncc(const Volume &a, const Volume &b, int window);
double smoothness_l2(const DisplacementField &phi);
// exp(-|grad target|^2) per voxel, shape (1, H, W, T).
Tensor edge_weight(const Volume &target);
LossReport loss_synthetic(const DisplacementField &phi, const DisplacementField &phi_gt, double lambda);
LossReport loss_unsupervised(const Volume &source, const Volume &target, const DisplacementField &phi, const ModelConfig &cfg);

// ---- differentiable variants; grids are (C, H, W, T) ----

ad::Var mse(const ad::Var &a, const ad::Var &b);
ad::Var local_ncc(const ad::Var &a, const ad::Var &b, int window);
ad::Var smoothness_l2(const ad::Var &phi);
ad::Var edge_weighted_smoothness(const ad::Var &phi, const Tensor &weight);

// Scalar Vars for the pieces of a loss; total = similarity + lambda * regularization.
struct LossTerms {
    ad::Var total;
    ad::Var similarity;
    ad::Var regularization;
    double lambda = 0.0;

    LossReport report() const;
};

LossTerms loss_synthetic(const ad::Var &phi, const ad::Var &phi_gt, double lambda);
// `target` is a constant; edge weights are computed from its value.
LossTerms loss_unsupervised(const ad::Var &source, const ad::Var &target, const ad::Var &phi, const ModelConfig &cfg);

} // namespace recureg::losses
