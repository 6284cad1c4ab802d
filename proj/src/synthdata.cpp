#include "recureg/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "binary_io.hpp"
#include "recureg/error.hpp"
#include "recureg/fieldops.hpp"

namespace recureg::synth {

namespace {

namespace fs = std::filesystem;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(seed ^ splitmix64(stream)); }

// Separable Gaussian blur of one (H, W, T) block with edge replication.
std::vector<double> gaussian_blur(const std::vector<double> &in, const Shape3 &s, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = v;
        ksum += v;
    }
    for (double &v : kernel) v /= ksum;

    std::vector<double> cur = in, next(in.size());
    const int dims[3] = {s.h, s.w, s.t};
    for (int a = 0; a < 3; ++a) {
        for (int i = 0; i < s.h; ++i)
            for (int j = 0; j < s.w; ++j)
                for (int k = 0; k < s.t; ++k) {
                    double acc = 0.0;
                    for (int o = -radius; o <= radius; ++o) {
                        int p[3] = {i, j, k};
                        p[a] = std::clamp(p[a] + o, 0, dims[a] - 1);
                        acc += kernel[static_cast<std::size_t>(o + radius)] * cur[s.index(p[0], p[1], p[2])];
                    }
                    next[s.index(i, j, k)] = acc;
                }
        std::swap(cur, next);
    }
    return cur;
}

constexpr double kTextureContrast = 0.08;

struct Blob {
    double center[3];
    double radius[3];
    double intensity;
};

constexpr const char *kVolumeMagic = "RECUREG-VOL";
constexpr int kVolumeVersion = 1;
constexpr long long kMaxExtent = 1 << 15;
constexpr long long kMaxElements = 1LL << 30;

void write_grid(std::ostream &os, const Shape3 &s, int components, const Spacing &sp, std::span<const float> data) {
    os << kVolumeMagic << "\n"
       << "version " << kVolumeVersion << "\n"
       << "dims " << s.h << " " << s.w << " " << s.t << "\n"
       << "components " << components << "\n"
       << "spacing " << io_detail::format_double(sp[0]) << " " << io_detail::format_double(sp[1]) << " "
       << io_detail::format_double(sp[2]) << "\n"
       << "end\n";
    io_detail::write_f32_le(os, data);
    if (!os) throw FormatError(FormatError::Kind::Io, "volume write failed");
}

struct GridHeader {
    Shape3 shape;
    int components = 1;
    Spacing spacing{1.0, 1.0, 1.0};
};

std::vector<std::string> header_fields(std::istream &is, const char *key, std::size_t count) {
    auto tok = io_detail::split_ws(io_detail::read_header_line(is));
    if (tok.size() != count + 1 || tok[0] != key) {
        throw FormatError(FormatError::Kind::BadHeader, std::string("expected '") + key + "' header line");
    }
    tok.erase(tok.begin());
    return tok;
}

GridHeader read_grid_header(std::istream &is) {
    using FK = FormatError::Kind;
    std::string magic;
    try {
        magic = io_detail::read_header_line(is, FK::BadMagic);
    } catch (const FormatError &) {
        throw FormatError(FK::BadMagic, "not a recureg volume");
    }
    if (magic != kVolumeMagic) throw FormatError(FK::BadMagic, "not a recureg volume (bad magic)");
    const auto ver = header_fields(is, "version", 1);
    if (ver[0] != std::to_string(kVolumeVersion)) throw FormatError(FK::BadVersion, "unsupported volume version " + ver[0]);
    GridHeader h;
    const auto dims = header_fields(is, "dims", 3);
    const long long d0 = io_detail::parse_count(dims[0], kMaxExtent);
    const long long d1 = io_detail::parse_count(dims[1], kMaxExtent);
    const long long d2 = io_detail::parse_count(dims[2], kMaxExtent);
    if (d0 < 1 || d1 < 1 || d2 < 1) throw FormatError(FK::BadHeader, "zero extent in dims");
    const auto comp = header_fields(is, "components", 1);
    h.components = static_cast<int>(io_detail::parse_count(comp[0], 3));
    if (h.components != 1 && h.components != 3) throw FormatError(FK::BadHeader, "components must be 1 or 3");
    if (d0 * d1 * d2 * h.components > kMaxElements) throw FormatError(FK::DimOverflow, "volume exceeds the element limit");
    h.shape = {static_cast<int>(d0), static_cast<int>(d1), static_cast<int>(d2)};
    const auto sp = header_fields(is, "spacing", 3);
    for (std::size_t i = 0; i < 3; ++i) {
        h.spacing[i] = io_detail::parse_double(sp[i]);
        if (!(h.spacing[i] > 0.0) || !std::isfinite(h.spacing[i])) throw FormatError(FK::BadHeader, "spacing must be positive");
    }
    if (io_detail::read_header_line(is) != "end") throw FormatError(FK::BadHeader, "missing end of header");
    return h;
}

std::vector<float> read_payload(std::istream &is, const GridHeader &h) {
    std::vector<float> data(h.shape.voxels() * static_cast<std::size_t>(h.components));
    io_detail::read_f32_le(is, data);
    for (float v : data)
        if (!std::isfinite(v)) throw FormatError(FormatError::Kind::BadHeader, "payload contains non-finite values");
    return data;
}

template <typename Fn>
auto with_file_in(const std::string &path, Fn &&fn) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError(FormatError::Kind::Io, "cannot open " + path);
    return fn(is);
}

template <typename Fn>
void with_file_out(const std::string &path, Fn &&fn) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path + " for writing");
    fn(os);
}

} // namespace

// ---------------------------------------------------------------------------

DisplacementField gen_smooth_ddf(const Shape3 &shape, double amplitude, double smoothness, std::uint64_t seed) {
    validate_shape(shape, "gen_smooth_ddf");
    if (!(amplitude >= 0.0) || !std::isfinite(amplitude)) throw ValueError("gen_smooth_ddf: amplitude must be >= 0");
    if (!(smoothness > 0.0) || !std::isfinite(smoothness)) throw ValueError("gen_smooth_ddf: smoothness must be > 0");
    const std::size_t n = shape.voxels();
    if (amplitude == 0.0) return DisplacementField::zeros(shape);

    // Noise is drawn on a grid padded by the kernel radius and cropped after
    // blurring, so the field statistics do not change near the border.
    const int pad = std::max(1, static_cast<int>(std::ceil(3.0 * smoothness)));
    const Shape3 big{shape.h + 2 * pad, shape.w + 2 * pad, shape.t + 2 * pad};
    std::mt19937_64 rng(derive_seed(seed, 0x44446));
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor field({3, shape.h, shape.w, shape.t});
    double peak = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> noise(big.voxels());
        for (double &v : noise) v = normal(rng);
        const auto smooth = gaussian_blur(noise, big, smoothness);
        for (int i = 0; i < shape.h; ++i)
            for (int j = 0; j < shape.w; ++j)
                for (int k = 0; k < shape.t; ++k) {
                    const double v = smooth[big.index(i + pad, j + pad, k + pad)];
                    field[c * n + shape.index(i, j, k)] = v;
                    peak = std::max(peak, std::abs(v));
                }
    }
    if (peak == 0.0) return DisplacementField::zeros(shape);
    const double scale = amplitude / peak;
    for (double &v : field.data()) v *= scale;
    return DisplacementField::from_tensor(field);
}

PhantomPair gen_phantom_pair(const Shape3 &shape, int n_blobs, double deform_amplitude, std::uint64_t seed, double smoothness) {
    if (shape.h < 16 || shape.w < 16 || shape.t < 16) throw ShapeError("gen_phantom_pair: each axis must be >= 16, got " + shape.str());
    if (n_blobs < 1 || n_blobs > 255) throw ValueError("gen_phantom_pair: n_blobs must be in [1, 255]");

    std::mt19937_64 rng(derive_seed(seed, 0xb10b));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int dims[3] = {shape.h, shape.w, shape.t};
    const double min_dim = std::min({shape.h, shape.w, shape.t});

    std::vector<Blob> blobs(static_cast<std::size_t>(n_blobs));
    for (Blob &b : blobs) {
        for (int a = 0; a < 3; ++a) {
            b.center[a] = (0.25 + 0.5 * unit(rng)) * (dims[a] - 1);
            b.radius[a] = std::max(2.0, (0.12 + 0.13 * unit(rng)) * min_dim);
        }
        b.intensity = 0.35 + 0.65 * unit(rng);
    }

    // Smooth texture with unit standard deviation, so that local correlation
    // has structure inside blobs and in the background.
    std::vector<double> texture(shape.voxels());
    for (double &v : texture) v = unit(rng) - 0.5;
    texture = gaussian_blur(texture, shape, 1.5);
    double tex_sq = 0.0;
    for (double v : texture) tex_sq += v * v;
    const double tex_scale = tex_sq > 0.0 ? 1.0 / std::sqrt(tex_sq / static_cast<double>(texture.size())) : 0.0;
    for (double &v : texture) v *= tex_scale;

    std::vector<float> img(shape.voxels());
    std::vector<std::uint8_t> labels(shape.voxels(), 0);
    for (int i = 0; i < shape.h; ++i)
        for (int j = 0; j < shape.w; ++j)
            for (int k = 0; k < shape.t; ++k) {
                const std::size_t x = shape.index(i, j, k);
                const double p[3] = {static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
                double value = 0.1 + 0.05 * static_cast<double>(i) / (shape.h - 1);
                for (std::size_t bi = 0; bi < blobs.size(); ++bi) {
                    const Blob &b = blobs[bi];
                    double r2 = 0.0;
                    for (int a = 0; a < 3; ++a) {
                        const double d = (p[a] - b.center[a]) / b.radius[a];
                        r2 += d * d;
                    }
                    const double r = std::sqrt(r2);
                    // Soft boundary about one voxel wide.
                    const double member = 1.0 / (1.0 + std::exp((r - 1.0) * b.radius[0] * 2.0));
                    value += b.intensity * member;
                    if (r <= 1.0) labels[x] = static_cast<std::uint8_t>(bi + 1);
                }
                value += kTextureContrast * texture[x];
                img[x] = static_cast<float>(value);
            }

    PhantomPair pair;
    pair.source = normalize_volume(Volume(shape, std::move(img)));
    pair.source_labels = LabelMap(shape, std::move(labels));
    const DisplacementField gt = gen_smooth_ddf(shape, deform_amplitude, smoothness, derive_seed(seed, 0xddf));
    pair.target = fieldops::warp(pair.source, gt);
    pair.target_labels = fieldops::warp_labels(pair.source_labels, gt);
    pair.gt_field = gt;
    return pair;
}

Volume normalize_volume(const Volume &v) {
    const auto d = v.data();
    const auto [lo_it, hi_it] = std::minmax_element(d.begin(), d.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<float> out(d.size(), 0.0f);
    if (hi > lo) {
        const double range = hi - lo;
        for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>((static_cast<double>(d[i]) - lo) / range);
    }
    return Volume(v.shape(), std::move(out), v.spacing());
}

PhantomPair crop_at(const PhantomPair &p, const Shape3 &crop, const std::array<int, 3> &origin) {
    const Shape3 &s = p.source.shape();
    for (int a = 0; a < 3; ++a) {
        if (origin[static_cast<std::size_t>(a)] < 0 || origin[static_cast<std::size_t>(a)] + crop[a] > s[a]) {
            throw ShapeError("crop window " + crop.str() + " does not fit " + s.str());
        }
    }
    validate_shape(crop, "crop");
    auto window = [&](auto src, std::size_t comps) {
        using T = typename decltype(src)::value_type;
        std::vector<std::remove_const_t<T>> out;
        out.reserve(crop.voxels() * comps);
        for (int i = 0; i < crop.h; ++i)
            for (int j = 0; j < crop.w; ++j)
                for (int k = 0; k < crop.t; ++k) {
                    const std::size_t x = s.index(i + origin[0], j + origin[1], k + origin[2]);
                    for (std::size_t c = 0; c < comps; ++c) out.push_back(src[x * comps + c]);
                }
        return out;
    };
    PhantomPair out;
    out.source = Volume(crop, window(p.source.data(), 1), p.source.spacing());
    out.target = Volume(crop, window(p.target.data(), 1), p.target.spacing());
    out.source_labels = LabelMap(crop, window(p.source_labels.data(), 1));
    out.target_labels = LabelMap(crop, window(p.target_labels.data(), 1));
    if (p.gt_field) out.gt_field = DisplacementField(crop, window(p.gt_field->data(), 3));
    return out;
}

PhantomPair random_crop(const PhantomPair &p, const Shape3 &crop, std::uint64_t seed, int multiple) {
    const Shape3 &s = p.source.shape();
    if (crop.h > s.h || crop.w > s.w || crop.t > s.t) throw ShapeError("random_crop: crop " + crop.str() + " larger than " + s.str());
    if (multiple < 1 || crop.h % multiple || crop.w % multiple || crop.t % multiple) {
        throw ShapeError("random_crop: crop " + crop.str() + " not divisible by " + std::to_string(multiple));
    }
    std::mt19937_64 rng(derive_seed(seed, 0xc409));
    std::array<int, 3> origin{};
    for (int a = 0; a < 3; ++a) {
        std::uniform_int_distribution<int> pick(0, s[a] - crop[a]);
        origin[static_cast<std::size_t>(a)] = pick(rng);
    }
    return crop_at(p, crop, origin);
}

// ---------------------------------------------------------------------------
// files

void write_volume(std::ostream &os, const Volume &v) { write_grid(os, v.shape(), 1, v.spacing(), v.data()); }

Volume read_volume(std::istream &is) {
    const GridHeader h = read_grid_header(is);
    if (h.components != 1) throw FormatError(FormatError::Kind::BadHeader, "expected a scalar volume, file has 3 components");
    return Volume(h.shape, read_payload(is, h), h.spacing);
}

void write_ddf(std::ostream &os, const DisplacementField &phi) { write_grid(os, phi.shape(), 3, {1.0, 1.0, 1.0}, phi.data()); }

DisplacementField read_ddf(std::istream &is) {
    const GridHeader h = read_grid_header(is);
    if (h.components != 3) throw FormatError(FormatError::Kind::BadHeader, "expected a displacement field with 3 components");
    return DisplacementField(h.shape, read_payload(is, h));
}

void write_volume(const std::string &path, const Volume &v) {
    with_file_out(path, [&](std::ostream &os) { write_volume(os, v); });
}
Volume read_volume(const std::string &path) {
    return with_file_in(path, [](std::istream &is) { return read_volume(is); });
}
void write_ddf(const std::string &path, const DisplacementField &phi) {
    with_file_out(path, [&](std::ostream &os) { write_ddf(os, phi); });
}
DisplacementField read_ddf(const std::string &path) {
    return with_file_in(path, [](std::istream &is) { return read_ddf(is); });
}
void write_labels(const std::string &path, const LabelMap &labels, const Spacing &spacing) {
    write_volume(path, labels.to_volume(spacing));
}
LabelMap read_labels(const std::string &path) { return LabelMap::from_volume(read_volume(path)); }

// ---------------------------------------------------------------------------
// manifest

std::vector<ManifestEntry> parse_manifest(std::istream &is, const std::string &base_dir) {
    std::vector<ManifestEntry> out;
    std::string line;
    int line_no = 0;
    auto resolve = [&](const std::string &p) {
        if (p.empty()) return p;
        const fs::path path(p);
        return path.is_absolute() || base_dir.empty() ? p : (fs::path(base_dir) / path).string();
    };
    while (std::getline(is, line)) {
        ++line_no;
        const auto tok = io_detail::split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        ManifestEntry e;
        for (const std::string &t : tok) {
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw FormatError(FormatError::Kind::BadHeader, "manifest line " + std::to_string(line_no) + ": expected key=value");
            }
            const std::string key = t.substr(0, eq), val = t.substr(eq + 1);
            if (key == "id") e.id = val;
            else if (key == "source") e.source = resolve(val);
            else if (key == "target") e.target = resolve(val);
            else if (key == "source_labels") e.source_labels = resolve(val);
            else if (key == "target_labels") e.target_labels = resolve(val);
            else if (key == "gt") e.gt = resolve(val);
            else throw FormatError(FormatError::Kind::BadHeader, "manifest line " + std::to_string(line_no) + ": unknown key " + key);
        }
        if (e.source.empty() || e.target.empty()) {
            throw FormatError(FormatError::Kind::BadHeader, "manifest line " + std::to_string(line_no) + ": source and target required");
        }
        if (e.id.empty()) e.id = "pair" + std::to_string(out.size());
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<ManifestEntry> read_manifest(const std::string &path) {
    std::ifstream is(path);
    if (!is) throw FormatError(FormatError::Kind::Io, "cannot open manifest " + path);
    return parse_manifest(is, fs::path(path).parent_path().string());
}

void write_manifest(const std::string &path, const std::vector<ManifestEntry> &entries) {
    std::ofstream os(path);
    if (!os) throw FormatError(FormatError::Kind::Io, "cannot open " + path + " for writing");
    os << "# recureg pair manifest\n";
    for (const ManifestEntry &e : entries) {
        os << "id=" << e.id << " source=" << e.source << " target=" << e.target;
        if (!e.source_labels.empty()) os << " source_labels=" << e.source_labels;
        if (!e.target_labels.empty()) os << " target_labels=" << e.target_labels;
        if (!e.gt.empty()) os << " gt=" << e.gt;
        os << "\n";
    }
}

PhantomPair load_pair(const ManifestEntry &e) {
    PhantomPair p;
    p.source = read_volume(e.source);
    p.target = read_volume(e.target);
    if (p.source.shape() != p.target.shape()) throw ShapeError("pair " + e.id + ": source and target shapes differ");
    if (!e.source_labels.empty()) p.source_labels = read_labels(e.source_labels);
    if (!e.target_labels.empty()) p.target_labels = read_labels(e.target_labels);
    if (!e.gt.empty()) p.gt_field = read_ddf(e.gt);
    return p;
}

std::vector<ManifestEntry> write_phantom_corpus(const std::string &dir, const Shape3 &shape, int count, int n_blobs,
                                                double deform_amplitude, std::uint64_t seed, double smoothness) {
    fs::create_directories(dir);
    std::vector<ManifestEntry> entries, relative;
    for (int i = 0; i < count; ++i) {
        const PhantomPair p = gen_phantom_pair(shape, n_blobs, deform_amplitude, seed + static_cast<std::uint64_t>(i), smoothness);
        char stem[32];
        std::snprintf(stem, sizeof stem, "pair_%04d", i);
        ManifestEntry rel{stem, std::string(stem) + "_source.vol", std::string(stem) + "_target.vol",
                          std::string(stem) + "_source_labels.vol", std::string(stem) + "_target_labels.vol",
                          std::string(stem) + "_gt.ddf"};
        write_volume((fs::path(dir) / rel.source).string(), p.source);
        write_volume((fs::path(dir) / rel.target).string(), p.target);
        write_labels((fs::path(dir) / rel.source_labels).string(), p.source_labels);
        write_labels((fs::path(dir) / rel.target_labels).string(), p.target_labels);
        write_ddf((fs::path(dir) / rel.gt).string(), *p.gt_field);
        relative.push_back(rel);
    }
    write_manifest((fs::path(dir) / "manifest.txt").string(), relative);
    for (const ManifestEntry &r : relative) {
        ManifestEntry e = r;
        for (std::string *s : {&e.source, &e.target, &e.source_labels, &e.target_labels, &e.gt}) *s = (fs::path(dir) / *s).string();
        entries.push_back(e);
    }
    return entries;
}

} // namespace recureg::synth
