// Synthetic deformation fields, phantom image pairs, augmentation, and the
// on-disk formats for volumes, fields and pair manifests.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "recureg/core.hpp"

namespace recureg::synth {

struct PhantomPair {
    Volume source;
    Volume target;
    LabelMap source_labels;
    LabelMap target_labels;
    std::optional<DisplacementField> gt_field;
};

inline constexpr double kDefaultDdfAmplitude = 3.0;
inline constexpr double kDefaultDdfSmoothness = 8.0;

// White noise per component, Gaussian-smoothed (std = smoothness voxels) on a
// grid padded by the kernel radius, cropped, then scaled so the largest
// |component| equals amplitude.
DisplacementField gen_smooth_ddf(const Shape3 &shape, double amplitude, double smoothness, std::uint64_t seed);

// Smooth multi-blob phantom with one label per blob. The ground-truth field is
// gen_smooth_ddf(shape, deform_amplitude, smoothness, seed'); the target is the
// source warped by it and the target labels are its nearest-neighbour warp.
PhantomPair gen_phantom_pair(const Shape3 &shape, int n_blobs, double deform_amplitude, std::uint64_t seed,
                             double smoothness = kDefaultDdfSmoothness);

// (v - min) / (max - min); constant volumes map to zero.
Volume normalize_volume(const Volume &v);

// Same random window applied to every member of the pair. Window extents must
// fit and be divisible by `multiple`.
PhantomPair random_crop(const PhantomPair &p, const Shape3 &crop, std::uint64_t seed, int multiple = 1);
PhantomPair crop_at(const PhantomPair &p, const Shape3 &crop, const std::array<int, 3> &origin);

// ---- volume / field files ----
//
//   RECUREG-VOL\n
//   version 1\n
//   dims <H> <W> <T>\n
//   components <1|3>\n
//   spacing <sx> <sy> <sz>\n
//   end\n
//   <H*W*T*components little-endian float32, last axis fastest, component
//    fastest within a voxel>

void write_volume(std::ostream &os, const Volume &v);
Volume read_volume(std::istream &is);
void write_ddf(std::ostream &os, const DisplacementField &phi);
DisplacementField read_ddf(std::istream &is);

void write_volume(const std::string &path, const Volume &v);
Volume read_volume(const std::string &path);
void write_ddf(const std::string &path, const DisplacementField &phi);
DisplacementField read_ddf(const std::string &path);
void write_labels(const std::string &path, const LabelMap &labels, const Spacing &spacing = {1.0, 1.0, 1.0});
LabelMap read_labels(const std::string &path);

// ---- manifest ----
//
// One record per line: whitespace-separated key=value fields. Keys: id,
// source, target, source_labels, target_labels, gt (gt and the label keys are
// optional). Blank lines and lines starting with '#' are ignored. Relative
// paths resolve against the manifest's directory.

struct ManifestEntry {
    std::string id;
    std::string source, target;
    std::string source_labels, target_labels;
    std::string gt;
};

std::vector<ManifestEntry> read_manifest(const std::string &path);
std::vector<ManifestEntry> parse_manifest(std::istream &is, const std::string &base_dir);
void write_manifest(const std::string &path, const std::vector<ManifestEntry> &entries);
PhantomPair load_pair(const ManifestEntry &e);

// Writes `count` phantom pairs to `dir` plus dir/manifest.txt. Pair i uses
// seed + i. File names: pair_<i>_{source,target,source_labels,target_labels}.vol
// and pair_<i>_gt.ddf.
std::vector<ManifestEntry> write_phantom_corpus(const std::string &dir, const Shape3 &shape, int count, int n_blobs,
                                                double deform_amplitude, std::uint64_t seed,
                                                double smoothness = kDefaultDdfSmoothness);

} // namespace recureg::synth
