#pragma once

#include <Eigen/Core>

#include "protoreg/volume.hpp"

namespace protoreg::detail {

// Sums over every fully-contained w^3 window. Output dims are (n - w + 1) per axis,
// indexed by the window's low corner.
inline Dims window_grid(const Dims& d, int w) { return {d.nx - w + 1, d.ny - w + 1, d.nz - w + 1}; }

inline Eigen::ArrayXd window_sums(const Dims& d, const Eigen::ArrayXd& v, int w) {
    // x pass
    Dims cur{d.nx - w + 1, d.ny, d.nz};
    Eigen::ArrayXd a(cur.size());
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < cur.nx; ++x) {
                double s = 0.0;
                for (int k = 0; k < w; ++k) s += v[d.index(x + k, y, z)];
                a[cur.index(x, y, z)] = s;
            }
    // y pass
    Dims cur2{cur.nx, d.ny - w + 1, d.nz};
    Eigen::ArrayXd b(cur2.size());
    for (int z = 0; z < cur2.nz; ++z)
        for (int y = 0; y < cur2.ny; ++y)
            for (int x = 0; x < cur2.nx; ++x) {
                double s = 0.0;
                for (int k = 0; k < w; ++k) s += a[cur.index(x, y + k, z)];
                b[cur2.index(x, y, z)] = s;
            }
    // z pass
    Dims out = window_grid(d, w);
    Eigen::ArrayXd c(out.size());
    for (int z = 0; z < out.nz; ++z)
        for (int y = 0; y < out.ny; ++y)
            for (int x = 0; x < out.nx; ++x) {
                double s = 0.0;
                for (int k = 0; k < w; ++k) s += b[cur2.index(x, y, z + k)];
                c[out.index(x, y, z)] = s;
            }
    return c;
}

// Adjoint of window_sums: each voxel receives the sum of the values of all windows
// containing it.
inline Eigen::ArrayXd window_scatter(const Dims& d, const Eigen::ArrayXd& centers, int w) {
    const Dims g = window_grid(d, w);
    Dims cur{g.nx, g.ny, d.nz};
    Eigen::ArrayXd a = Eigen::ArrayXd::Zero(cur.size());
    for (int z = 0; z < g.nz; ++z)
        for (int y = 0; y < g.ny; ++y)
            for (int x = 0; x < g.nx; ++x) {
                const double v = centers[g.index(x, y, z)];
                for (int k = 0; k < w; ++k) a[cur.index(x, y, z + k)] += v;
            }
    Dims cur2{g.nx, d.ny, d.nz};
    Eigen::ArrayXd b = Eigen::ArrayXd::Zero(cur2.size());
    for (int z = 0; z < cur.nz; ++z)
        for (int y = 0; y < cur.ny; ++y)
            for (int x = 0; x < cur.nx; ++x) {
                const double v = a[cur.index(x, y, z)];
                for (int k = 0; k < w; ++k) b[cur2.index(x, y + k, z)] += v;
            }
    Eigen::ArrayXd out = Eigen::ArrayXd::Zero(d.size());
    for (int z = 0; z < cur2.nz; ++z)
        for (int y = 0; y < cur2.ny; ++y)
            for (int x = 0; x < cur2.nx; ++x) {
                const double v = b[cur2.index(x, y, z)];
                for (int k = 0; k < w; ++k) out[d.index(x + k, y, z)] += v;
            }
    return out;
}

struct LnccWindows {
    Dims grid;
    Eigen::ArrayXd cross;  // A = sum (f - fbar)(m - mbar)
    Eigen::ArrayXd var_f;  // B = sum (f - fbar)^2
    Eigen::ArrayXd var_m;  // C = sum (m - mbar)^2
    Eigen::ArrayXd mean_f;
    Eigen::ArrayXd mean_m;
    Eigen::Array<bool, Eigen::Dynamic, 1> valid;
    Eigen::Index valid_count = 0;
};

inline LnccWindows lncc_windows(const Volume& fixed, const Volume& moved, int w, double var_floor) {
    const Dims& d = fixed.dims();
    const double n = double(w) * w * w;
    const Eigen::ArrayXd& f = fixed.data();
    const Eigen::ArrayXd& m = moved.data();
    LnccWindows out;
    out.grid = window_grid(d, w);
    const Eigen::ArrayXd sf = window_sums(d, f, w);
    const Eigen::ArrayXd sm = window_sums(d, m, w);
    const Eigen::ArrayXd sff = window_sums(d, f * f, w);
    const Eigen::ArrayXd smm = window_sums(d, m * m, w);
    const Eigen::ArrayXd sfm = window_sums(d, f * m, w);
    out.mean_f = sf / n;
    out.mean_m = sm / n;
    out.cross = sfm - sf * sm / n;
    out.var_f = sff - sf * sf / n;
    out.var_m = smm - sm * sm / n;
    out.var_f = (out.var_f < 0.0).select(0.0, out.var_f);
    out.var_m = (out.var_m < 0.0).select(0.0, out.var_m);
    // NaN windows stay valid so a non-finite image surfaces as a non-finite loss.
    out.valid = !(out.var_f / n < var_floor) && !(out.var_m / n < var_floor);
    out.valid_count = out.valid.count();
    return out;
}

}  // namespace protoreg::detail
