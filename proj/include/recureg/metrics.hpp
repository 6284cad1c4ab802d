// Registration quality: overlap and surface distances between label masks,
// plus the folding count in the tissue region.
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "recureg/core.hpp"

namespace recureg::metrics {

using Voxel = std::array<int, 3>;

// 2|A & B| / (|A| + |B|); 1 when both masks are empty.
double dice(const LabelMask &a, const LabelMask &b);

// Foreground voxels with at least one background 6-neighbour; the outside of
// the grid counts as background. Throws ValueError for an empty mask.
std::vector<Voxel> surface_voxels(const LabelMask &m);

// For every surface voxel of `from`, the distance in mm to the nearest surface
// voxel of `to`. Computed with an exact Euclidean distance transform.
std::vector<double> directed_surface_distances(const LabelMask &from, const LabelMask &to, const Spacing &spacing);

// Symmetric Hausdorff distance between the two surfaces in mm. `percentile`
// 100 gives the exact maximum; lower values take that percentile of each
// directed distance set (nearest-rank) before the max.
double hausdorff(const LabelMask &a, const LabelMask &b, const Spacing &spacing, double percentile = 100.0);

// Mean of the two directed mean surface distances, in mm.
double asd(const LabelMask &a, const LabelMask &b, const Spacing &spacing);

struct LabelScore {
    int label = 0;
    double dsc = 0.0;
    double hd_mm = 0.0;
    double asd_mm = 0.0;
};

struct MetricRow {
    std::string pair_id;
    double dsc = 0.0;
    double hd_mm = 0.0;
    double asd_mm = 0.0;
    double neg_jdet = 0.0; // count; fractional only in averaged rows
    std::vector<LabelScore> per_label;
};

// Scores a warped segmentation against the target per label, averaging over
// the target's labels. neg_jdet is left to the caller.
MetricRow score_labels(const std::string &pair_id, const LabelMap &warped, const LabelMap &target, const Spacing &spacing,
                       double hd_percentile = 100.0);

// Element-wise mean over rows (per_label left empty), id "mean".
MetricRow mean_row(const std::vector<MetricRow> &rows);

// Comma-separated table. Column order:
//   pair_id,label,dsc,hd_mm,asd_mm,neg_jdet
// One row per (pair, label) with label >= 1, then one "all" row per pair with
// the label-averaged scores and the pair's folding count; label is "all".
// Values are written with 9 significant digits.
void write_metric_table(std::ostream &os, const std::vector<MetricRow> &rows);
std::string metric_table_header();

} // namespace recureg::metrics
