// Brute-force reference implementations used by the tests. Each one follows
// the textbook definition directly and shares no code with the library.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "recureg/autodiff.hpp"
#include "recureg/core.hpp"

namespace oracle {

using recureg::DisplacementField;
using recureg::LabelMask;
using recureg::Shape3;
using recureg::Spacing;
using recureg::Tensor;
using recureg::Volume;

// ---- random instances ----

inline Volume random_volume(std::mt19937_64 &rng, Shape3 s, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<float> d(s.voxels());
    for (float &v : d) v = static_cast<float>(u(rng));
    return Volume(s, d);
}

inline DisplacementField random_field(std::mt19937_64 &rng, Shape3 s, double amp) {
    std::uniform_real_distribution<double> u(-amp, amp);
    std::vector<float> d(s.voxels() * 3);
    for (float &v : d) v = static_cast<float>(u(rng));
    return DisplacementField(s, d);
}

inline Tensor random_tensor(std::mt19937_64 &rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (double &v : t.data()) v = u(rng);
    return t;
}

inline LabelMask random_mask(std::mt19937_64 &rng, Shape3 s, double p) {
    std::bernoulli_distribution b(p);
    std::vector<std::uint8_t> d(s.voxels());
    bool any = false;
    for (auto &v : d) any |= (v = b(rng)) != 0;
    if (!any) d[std::uniform_int_distribution<std::size_t>(0, d.size() - 1)(rng)] = 1;
    return LabelMask(s, d);
}

// ---- interpolation ----

// Hat-function sum over every voxel after clamping the position into the grid.
inline double hat_sample(const std::function<double(int, int, int)> &f, Shape3 s, std::array<double, 3> p) {
    const int dims[3] = {s.h, s.w, s.t};
    for (int a = 0; a < 3; ++a) p[a] = std::min(std::max(p[a], 0.0), static_cast<double>(dims[a] - 1));
    double acc = 0.0;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                const double w = std::max(0.0, 1.0 - std::abs(p[0] - i)) * std::max(0.0, 1.0 - std::abs(p[1] - j)) *
                                 std::max(0.0, 1.0 - std::abs(p[2] - k));
                if (w != 0.0) acc += w * f(i, j, k);
            }
    return acc;
}

inline double sample(const Volume &v, std::array<double, 3> p) {
    return hat_sample([&](int i, int j, int k) { return static_cast<double>(v.at(i, j, k)); }, v.shape(), p);
}

inline std::array<double, 3> sample_field(const DisplacementField &u, std::array<double, 3> p) {
    std::array<double, 3> out{};
    for (int c = 0; c < 3; ++c) {
        out[c] = hat_sample([&](int i, int j, int k) { return static_cast<double>(u.at(i, j, k, c)); }, u.shape(), p);
    }
    return out;
}

// out(x) = v(x) + u(x + v(x)).
inline std::vector<double> compose(const DisplacementField &u, const DisplacementField &v) {
    const Shape3 s = v.shape();
    std::vector<double> out;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                const std::array<double, 3> p{i + v.at(i, j, k, 0), j + v.at(i, j, k, 1), k + v.at(i, j, k, 2)};
                const auto uu = sample_field(u, p);
                for (int c = 0; c < 3; ++c) out.push_back(v.at(i, j, k, c) + uu[c]);
            }
    return out;
}

// ---- derivatives ----

// d f / d axis at (i, j, k): central inside, one-sided on the two ends,
// zero when the axis has a single sample.
inline double derivative(const std::function<double(int, int, int)> &f, Shape3 s, int axis, int i, int j, int k) {
    const int n = s[axis];
    if (n == 1) return 0.0;
    int idx[3] = {i, j, k};
    const int x = idx[axis];
    auto at = [&](int q) {
        int p[3] = {i, j, k};
        p[axis] = q;
        return f(p[0], p[1], p[2]);
    };
    if (x == 0) return at(1) - at(0);
    if (x == n - 1) return at(n - 1) - at(n - 2);
    return 0.5 * (at(x + 1) - at(x - 1));
}

inline double det3(const double m[3][3]) {
    // Rule of Sarrus.
    return m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1] - m[0][2] * m[1][1] * m[2][0] -
           m[0][0] * m[1][2] * m[2][1] - m[0][1] * m[1][0] * m[2][2];
}

inline std::vector<double> jacobian_det(const DisplacementField &u) {
    const Shape3 s = u.shape();
    std::vector<double> out;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                double m[3][3];
                for (int c = 0; c < 3; ++c)
                    for (int a = 0; a < 3; ++a) {
                        m[c][a] = (c == a ? 1.0 : 0.0) +
                                  derivative([&](int x, int y, int z) { return static_cast<double>(u.at(x, y, z, c)); }, s, a, i, j, k);
                    }
                out.push_back(det3(m));
            }
    return out;
}

// ---- similarity ----

// -mean over voxels of CC^2 in the clipped (2r+1)^3 window.
inline double local_ncc(const Volume &a, const Volume &b, int window, double eps = 1e-5) {
    const Shape3 s = a.shape();
    const int r = window / 2;
    double total = 0.0;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                std::vector<double> va, vb;
                for (int x = std::max(0, i - r); x <= std::min(s.h - 1, i + r); ++x)
                    for (int y = std::max(0, j - r); y <= std::min(s.w - 1, j + r); ++y)
                        for (int z = std::max(0, k - r); z <= std::min(s.t - 1, k + r); ++z) {
                            va.push_back(a.at(x, y, z));
                            vb.push_back(b.at(x, y, z));
                        }
                double ma = 0, mb = 0;
                for (std::size_t q = 0; q < va.size(); ++q) {
                    ma += va[q];
                    mb += vb[q];
                }
                ma /= static_cast<double>(va.size());
                mb /= static_cast<double>(va.size());
                double cross = 0, sa = 0, sb = 0;
                for (std::size_t q = 0; q < va.size(); ++q) {
                    cross += (va[q] - ma) * (vb[q] - mb);
                    sa += (va[q] - ma) * (va[q] - ma);
                    sb += (vb[q] - mb) * (vb[q] - mb);
                }
                total += cross * cross / (sa * sb + eps);
            }
    return -total / static_cast<double>(s.voxels());
}

// ---- surfaces ----

inline std::vector<std::array<int, 3>> surface(const LabelMask &m) {
    const Shape3 s = m.shape();
    std::vector<std::array<int, 3>> out;
    for (int i = 0; i < s.h; ++i)
        for (int j = 0; j < s.w; ++j)
            for (int k = 0; k < s.t; ++k) {
                if (!m.at(i, j, k)) continue;
                auto bg = [&](int x, int y, int z) { return !s.contains(x, y, z) || !m.at(x, y, z); };
                if (bg(i - 1, j, k) || bg(i + 1, j, k) || bg(i, j - 1, k) || bg(i, j + 1, k) || bg(i, j, k - 1) || bg(i, j, k + 1)) {
                    out.push_back({i, j, k});
                }
            }
    return out;
}

inline std::vector<double> directed(const LabelMask &a, const LabelMask &b, const Spacing &sp) {
    const auto sa = surface(a), sb = surface(b);
    std::vector<double> out;
    for (const auto &p : sa) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto &q : sb) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = (p[c] - q[c]) * sp[c];
                d2 += d * d;
            }
            best = std::min(best, d2);
        }
        out.push_back(std::sqrt(best));
    }
    return out;
}

inline double hausdorff(const LabelMask &a, const LabelMask &b, const Spacing &sp) {
    const auto ab = directed(a, b, sp), ba = directed(b, a, sp);
    return std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
}

inline double asd(const LabelMask &a, const LabelMask &b, const Spacing &sp) {
    const auto ab = directed(a, b, sp), ba = directed(b, a, sp);
    double x = 0, y = 0;
    for (double d : ab) x += d;
    for (double d : ba) y += d;
    return 0.5 * (x / static_cast<double>(ab.size()) + y / static_cast<double>(ba.size()));
}

// ---- convolution ----

// Zero-padded "same" 3-D convolution, x (Ci,H,W,T), w (Co,Ci,K,K,K).
inline Tensor conv3d(const Tensor &x, const Tensor &w, const Tensor *bias, int dilation) {
    const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2), t = x.dim(3);
    const int co = w.dim(0), kk = w.dim(2), half = kk / 2;
    Tensor y({co, h, wd, t});
    auto xat = [&](int c, int i, int j, int k) {
        if (i < 0 || j < 0 || k < 0 || i >= h || j >= wd || k >= t) return 0.0;
        return x[((static_cast<std::size_t>(c) * h + i) * wd + j) * t + k];
    };
    for (int o = 0; o < co; ++o)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j)
                for (int k = 0; k < t; ++k) {
                    double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
                    for (int c = 0; c < ci; ++c)
                        for (int a = 0; a < kk; ++a)
                            for (int b = 0; b < kk; ++b)
                                for (int e = 0; e < kk; ++e) {
                                    const double wv = w[((((static_cast<std::size_t>(o) * ci + c) * kk + a) * kk + b) * kk) + e];
                                    acc += wv * xat(c, i + (a - half) * dilation, j + (b - half) * dilation, k + (e - half) * dilation);
                                }
                    y[((static_cast<std::size_t>(o) * h + i) * wd + j) * t + k] = acc;
                }
    return y;
}

inline Tensor leaky(Tensor x, double slope) {
    for (double &v : x.data()) v = v > 0 ? v : slope * v;
    return x;
}

inline Tensor add(Tensor a, const Tensor &b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

// Mean over each 2x2x2 cell.
inline Tensor pool(const Tensor &x) {
    const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2, t = x.dim(3) / 2;
    Tensor y({c, h, w, t});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int k = 0; k < t; ++k) {
                    double s = 0;
                    for (int d = 0; d < 8; ++d) {
                        const int ii = 2 * i + (d >> 2), jj = 2 * j + ((d >> 1) & 1), kk = 2 * k + (d & 1);
                        s += x[((static_cast<std::size_t>(ch) * x.dim(1) + ii) * x.dim(2) + jj) * x.dim(3) + kk];
                    }
                    y[((static_cast<std::size_t>(ch) * h + i) * w + j) * t + k] = s / 8.0;
                }
    return y;
}

// x2 trilinear upsampling with half-voxel alignment: output q samples the
// input at (q + 0.5) / 2 - 0.5, clamped into the grid.
inline Tensor upsample(const Tensor &x) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2), t = x.dim(3);
    Tensor y({c, 2 * h, 2 * w, 2 * t});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j)
                for (int k = 0; k < 2 * t; ++k) {
                    const std::array<double, 3> p{(i + 0.5) / 2 - 0.5, (j + 0.5) / 2 - 0.5, (k + 0.5) / 2 - 0.5};
                    y[((static_cast<std::size_t>(ch) * 2 * h + i) * 2 * w + j) * 2 * t + k] = hat_sample(
                        [&](int a, int b, int e) { return x[((static_cast<std::size_t>(ch) * h + a) * w + b) * t + e]; }, {h, w, t}, p);
                }
    return y;
}

inline Tensor concat(const Tensor &a, const Tensor &b) {
    std::vector<int> shape = a.shape();
    shape[0] += b.dim(0);
    Tensor y(shape);
    std::copy(a.data().begin(), a.data().end(), y.data().begin());
    std::copy(b.data().begin(), b.data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return y;
}

// ---- finite differences ----

// Central difference of a scalar function of one tensor entry.
inline double central_difference(Tensor &x, std::size_t idx, const std::function<double()> &f, double h) {
    const double keep = x[idx];
    x[idx] = keep + h;
    const double fp = f();
    x[idx] = keep - h;
    const double fm = f();
    x[idx] = keep;
    return (fp - fm) / (2.0 * h);
}

// |a - f| / max(1e-6, |a|, |f|).
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
}

} // namespace oracle
