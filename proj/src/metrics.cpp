#include "recureg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "recureg/error.hpp"

namespace recureg::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const LabelMask &a, const LabelMask &b, const char *who) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(who) + ": mask shapes differ");
}

// Squared distance transform along one line: out[q] = min_p (x_q - x_p)^2 + f[p],
// x_p = p * h. Lower envelope of parabolas.
void edt_line(const std::vector<double> &f, double h, std::vector<double> &out, std::vector<int> &v, std::vector<double> &z) {
    const int n = static_cast<int>(f.size());
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[static_cast<std::size_t>(q)] == kInf) continue;
        const double xq = q * h;
        while (k >= 0) {
            const int p = v[static_cast<std::size_t>(k)];
            const double xp = p * h;
            const double s = ((f[static_cast<std::size_t>(q)] + xq * xq) - (f[static_cast<std::size_t>(p)] + xp * xp)) / (2.0 * (xq - xp));
            if (s <= z[static_cast<std::size_t>(k)]) {
                --k;
            } else {
                ++k;
                v[static_cast<std::size_t>(k)] = q;
                z[static_cast<std::size_t>(k)] = s;
                z[static_cast<std::size_t>(k) + 1] = kInf;
                break;
            }
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
        }
    }
    if (k < 0) {
        std::fill(out.begin(), out.end(), kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        const double xq = q * h;
        while (z[static_cast<std::size_t>(j) + 1] < xq) ++j;
        const int p = v[static_cast<std::size_t>(j)];
        const double d = xq - p * h;
        out[static_cast<std::size_t>(q)] = d * d + f[static_cast<std::size_t>(p)];
    }
}

// Squared Euclidean distance (mm^2) from every voxel to the nearest seed.
std::vector<double> squared_distance_map(const Shape3 &s, const std::vector<Voxel> &seeds, const Spacing &spacing) {
    std::vector<double> d(s.voxels(), kInf);
    for (const Voxel &v : seeds) d[s.index(v[0], v[1], v[2])] = 0.0;
    const int dims[3] = {s.h, s.w, s.t};
    const std::size_t strides[3] = {static_cast<std::size_t>(s.w) * s.t, static_cast<std::size_t>(s.t), 1};
    for (int a = 0; a < 3; ++a) {
        const int len = dims[a];
        const std::size_t stride = strides[a];
        std::vector<double> line(static_cast<std::size_t>(len)), out(static_cast<std::size_t>(len));
        std::vector<int> v(static_cast<std::size_t>(len));
        std::vector<double> z(static_cast<std::size_t>(len) + 1);
        const std::size_t lines = s.voxels() / static_cast<std::size_t>(len);
        for (std::size_t li = 0; li < lines; ++li) {
            std::size_t base;
            if (a == 0) base = li;
            else if (a == 1) base = (li / s.t) * static_cast<std::size_t>(s.w) * s.t + li % s.t;
            else base = li * static_cast<std::size_t>(s.t);
            for (int i = 0; i < len; ++i) line[static_cast<std::size_t>(i)] = d[base + i * stride];
            edt_line(line, spacing[static_cast<std::size_t>(a)], out, v, z);
            for (int i = 0; i < len; ++i) d[base + i * stride] = out[static_cast<std::size_t>(i)];
        }
    }
    return d;
}

double percentile_of(std::vector<double> v, double pct) {
    if (v.empty()) return 0.0;
    if (pct >= 100.0) return *std::max_element(v.begin(), v.end());
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

double grid_diagonal_mm(const Shape3 &s, const Spacing &sp) {
    const double a = (s.h - 1) * sp[0], b = (s.w - 1) * sp[1], c = (s.t - 1) * sp[2];
    return std::sqrt(a * a + b * b + c * c);
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

double dice(const LabelMask &a, const LabelMask &b) {
    check_pair(a, b, "dice");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.shape().voxels(); ++i) {
        const bool x = a[i], y = b[i];
        na += x;
        nb += y;
        both += (x && y);
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<Voxel> surface_voxels(const LabelMask &m) {
    const Shape3 &s = m.shape();
    std::vector<Voxel> out;
    bool any = false;
    static constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                if (!m.at(i, j, k)) continue;
                any = true;
                for (const auto &o : kOffsets) {
                    const int ii = i + o[0], jj = j + o[1], kk = k + o[2];
                    if (!s.contains(ii, jj, kk) || !m.at(ii, jj, kk)) {
                        out.push_back({i, j, k});
                        break;
                    }
                }
            }
    if (!any) throw ValueError("surface_voxels: empty mask");
    return out;
}

std::vector<double> directed_surface_distances(const LabelMask &from, const LabelMask &to, const Spacing &spacing) {
    check_pair(from, to, "surface distance");
    const auto src = surface_voxels(from);
    const auto dst = surface_voxels(to);
    const auto d2 = squared_distance_map(to.shape(), dst, spacing);
    std::vector<double> out;
    out.reserve(src.size());
    for (const Voxel &v : src) out.push_back(std::sqrt(d2[from.shape().index(v[0], v[1], v[2])]));
    return out;
}

double hausdorff(const LabelMask &a, const LabelMask &b, const Spacing &spacing, double percentile) {
    if (!(percentile > 0.0 && percentile <= 100.0)) throw ValueError("hausdorff: percentile must be in (0, 100]");
    return std::max(percentile_of(directed_surface_distances(a, b, spacing), percentile),
                    percentile_of(directed_surface_distances(b, a, spacing), percentile));
}

double asd(const LabelMask &a, const LabelMask &b, const Spacing &spacing) {
    auto mean = [](const std::vector<double> &v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    return 0.5 * (mean(directed_surface_distances(a, b, spacing)) + mean(directed_surface_distances(b, a, spacing)));
}

MetricRow score_labels(const std::string &pair_id, const LabelMap &warped, const LabelMap &target, const Spacing &spacing,
                       double hd_percentile) {
    if (warped.shape() != target.shape()) throw ShapeError("score_labels: shape mismatch");
    MetricRow row;
    row.pair_id = pair_id;
    const auto labels = target.labels();
    if (labels.empty()) throw ValueError("score_labels: target has no foreground labels");
    for (std::uint8_t l : labels) {
        const LabelMask a = warped.mask_of(l), b = target.mask_of(l);
        LabelScore sc;
        sc.label = l;
        sc.dsc = dice(a, b);
        if (a.empty()) {
            // Surface distance to a vanished structure: report the grid diagonal.
            sc.hd_mm = sc.asd_mm = grid_diagonal_mm(target.shape(), spacing);
        } else {
            sc.hd_mm = hausdorff(a, b, spacing, hd_percentile);
            sc.asd_mm = asd(a, b, spacing);
        }
        row.per_label.push_back(sc);
        row.dsc += sc.dsc;
        row.hd_mm += sc.hd_mm;
        row.asd_mm += sc.asd_mm;
    }
    const double n = static_cast<double>(labels.size());
    row.dsc /= n;
    row.hd_mm /= n;
    row.asd_mm /= n;
    return row;
}

MetricRow mean_row(const std::vector<MetricRow> &rows) {
    MetricRow m;
    m.pair_id = "mean";
    if (rows.empty()) return m;
    for (const MetricRow &r : rows) {
        m.dsc += r.dsc;
        m.hd_mm += r.hd_mm;
        m.asd_mm += r.asd_mm;
        m.neg_jdet += r.neg_jdet;
    }
    const double n = static_cast<double>(rows.size());
    m.dsc /= n;
    m.hd_mm /= n;
    m.asd_mm /= n;
    m.neg_jdet /= n;
    return m;
}

std::string metric_table_header() { return "pair_id,label,dsc,hd_mm,asd_mm,neg_jdet"; }

void write_metric_table(std::ostream &os, const std::vector<MetricRow> &rows) {
    os << metric_table_header() << "\n";
    for (const MetricRow &r : rows) {
        for (const LabelScore &s : r.per_label) {
            os << r.pair_id << "," << s.label << "," << fmt(s.dsc) << "," << fmt(s.hd_mm) << "," << fmt(s.asd_mm) << ",\n";
        }
        os << r.pair_id << ",all," << fmt(r.dsc) << "," << fmt(r.hd_mm) << "," << fmt(r.asd_mm) << "," << fmt(r.neg_jdet) << "\n";
    }
}

} // namespace recureg::metrics
